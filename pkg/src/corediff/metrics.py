"""Generation-quality metrics: Frechet distance on Gaussian fits, Gaussian-
kernel MMD, and per-class breakdowns, all under a caller-chosen encoder.

Values are comparable only within one encoder, so every report records the
encoder id.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .dataset import LabeledDataset
from .encoder import embed
from .errors import ConfigError, InsufficientData, ShapeError
from .numerics import DEFAULT_COV_REG, GaussianFit, fit_gaussian


@dataclass(frozen=True)
class EvalReport:
    frechet: float
    mmd_sq: float
    per_class_frechet: np.ndarray
    n_real: int
    n_generated: int
    encoder_id: str
    seed: int


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root; negative eigenvalues clamp to zero."""
    vals, vecs = np.linalg.eigh(_sym(m))
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(fit_a: GaussianFit, fit_b: GaussianFit) -> float:
    """2-Wasserstein distance squared between two Gaussian fits.

    ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}); the cross term uses
    tr((A S_b A)^{1/2}) with A = S_a^{1/2}, which is symmetric PSD, so the
    whole computation stays in real eigendecompositions. Clamped at zero.
    """
    if fit_a.dimension != fit_b.dimension:
        raise ShapeError(
            f"fit dimensions differ: {fit_a.dimension} vs {fit_b.dimension}"
        )
    diff = fit_a.mean - fit_b.mean
    a_half = _sqrtm_psd(fit_a.covariance)
    cross = _sqrtm_psd(a_half @ fit_b.covariance @ a_half)
    val = float(
        diff @ diff
        + np.trace(fit_a.covariance)
        + np.trace(fit_b.covariance)
        - 2.0 * np.trace(cross)
    )
    return max(val, 0.0)


def mmd_sq_gaussian(x: np.ndarray, y: np.ndarray, bandwidth="median") -> float:
    """Biased V-statistic MMD^2 with kernel exp(-||u-v||^2 / (2 sigma^2)).

    bandwidth="median" resolves sigma to the median pairwise distance of the
    pooled sample (falling back to 1.0 if that median is zero).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeError(f"need (n, e) arrays of equal width, got {x.shape} and {y.shape}")
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise InsufficientData("MMD needs at least 2 samples on each side")
    if isinstance(bandwidth, str):
        if bandwidth != "median":
            raise ConfigError(f"unknown bandwidth rule {bandwidth!r}")
        med = float(np.median(pdist(np.vstack([x, y]))))
        sigma = med if med > 0 else 1.0
    else:
        sigma = float(bandwidth)
        if sigma <= 0:
            raise ConfigError(f"bandwidth must be > 0, got {sigma}")
    gamma = 1.0 / (2.0 * sigma * sigma)
    k_xx = np.exp(-gamma * cdist(x, x, "sqeuclidean"))
    k_yy = np.exp(-gamma * cdist(y, y, "sqeuclidean"))
    k_xy = np.exp(-gamma * cdist(x, y, "sqeuclidean"))
    return float(k_xx.mean() + k_yy.mean() - 2.0 * k_xy.mean())


def evaluate(real_ds: LabeledDataset, generated: LabeledDataset, encoder,
             seed: int = 0, reg: float = DEFAULT_COV_REG,
             bandwidth="median") -> EvalReport:
    """Embed both sets with one encoder and compute global and per-class metrics.

    Per-class Frechet for class j is computed between the class-j restrictions
    only, so it needs at least 2 real and 2 generated samples in every class.
    """
    if real_ds.K != generated.K:
        raise ShapeError(f"class counts differ: {real_ds.K} vs {generated.K}")
    emb_real = embed(encoder, real_ds)
    emb_gen = embed(encoder, generated)
    fit_real = fit_gaussian(emb_real.vectors, reg=reg)
    fit_gen = fit_gaussian(emb_gen.vectors, reg=reg)
    global_frechet = frechet_distance(fit_real, fit_gen)
    mmd = mmd_sq_gaussian(emb_real.vectors, emb_gen.vectors, bandwidth=bandwidth)
    per_class = np.empty(real_ds.K)
    for j in range(real_ds.K):
        sel_r = real_ds.class_indices(j)
        sel_g = generated.class_indices(j)
        if sel_r.size < 2 or sel_g.size < 2:
            raise InsufficientData(f"class {j} needs >= 2 samples on both sides")
        per_class[j] = frechet_distance(
            fit_gaussian(emb_real.vectors[sel_r], reg=reg),
            fit_gaussian(emb_gen.vectors[sel_g], reg=reg),
        )
    return EvalReport(
        frechet=global_frechet,
        mmd_sq=mmd,
        per_class_frechet=per_class,
        n_real=real_ds.n,
        n_generated=generated.n,
        encoder_id=emb_real.source_encoder,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_report_csv(path, report: EvalReport, provenance: dict | None = None) -> None:
    meta = dict(provenance or {})
    meta.update(
        encoder=report.encoder_id,
        n_real=report.n_real,
        n_generated=report.n_generated,
        seed=report.seed,
    )
    lines = [f"# {k}={v}" for k, v in meta.items()]
    lines.append("metric,class,value")
    lines.append(f"frechet,global,{_fmt(report.frechet)}")
    lines.append(f"mmd_sq,global,{_fmt(report.mmd_sq)}")
    for j, v in enumerate(report.per_class_frechet):
        lines.append(f"frechet,{j},{_fmt(v)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_per_class_csv(path, report: EvalReport) -> None:
    lines = ["class,frechet"]
    for j, v in enumerate(report.per_class_frechet):
        lines.append(f"{j},{_fmt(v)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_svg_bars(path, report: EvalReport, title: str = "per-class Frechet") -> None:
    """Static SVG bar chart of the per-class Frechet values (deterministic)."""
    values = report.per_class_frechet
    k = values.size
    width, height, margin = 640, 360, 48
    plot_w, plot_h = width - 2 * margin, height - 2 * margin
    vmax = max(float(values.max()), 1e-12)
    bar_w = plot_w / max(k, 1)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width // 2}" y="{margin // 2}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title} ({report.encoder_id})</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
    ]
    for j, v in enumerate(values):
        h = plot_h * float(v) / vmax
        x = margin + j * bar_w + 0.1 * bar_w
        y = height - margin - h
        parts.append(
            f'<rect x="{x:.2f}" y="{y:.2f}" width="{0.8 * bar_w:.2f}" '
            f'height="{h:.2f}" fill="#4878d0"/>'
        )
        parts.append(
            f'<text x="{margin + (j + 0.5) * bar_w:.2f}" y="{height - margin + 16}" '
            f'text-anchor="middle" font-family="sans-serif" font-size="12">{j}</text>'
        )
        parts.append(
            f'<text x="{margin + (j + 0.5) * bar_w:.2f}" y="{y - 4:.2f}" '
            f'text-anchor="middle" font-family="sans-serif" font-size="10">{float(v):.3g}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")
