"""Embedding scores and coreset selection.

Two scoring criteria: the log-density of each embedding under one global
Gaussian fit, and the squared distance to the per-class coordinate-wise
median. Selection keeps a fraction R of the data, globally for the Gaussian
score and per class (a band around the median distance) for the median score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import LabeledDataset
from .encoder import EmbeddingSet
from .errors import ConfigError, FormatError, InsufficientData, ShapeError
from .numerics import (
    DEFAULT_COV_REG,
    fit_gaussian,
    mahalanobis_sq_batch,
    percentile_threshold,
    round_half_up,
)

METHOD_GAUSSIAN = "gaussian"
METHOD_MODERATE = "moderate_ds"
METHOD_UNIFORM = "uniform_random"


@dataclass(frozen=True)
class ScoreTable:
    """Per-sample scores aligned with dataset indices."""

    scores: np.ndarray
    method: str
    encoder_id: str

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        object.__setattr__(self, "scores", scores)
        if scores.ndim != 1:
            raise ShapeError(f"scores must be 1-d, got shape {scores.shape}")
        if not np.all(np.isfinite(scores)):
            raise ShapeError("scores contain non-finite values")


@dataclass(frozen=True)
class Coreset:
    """Selected sample indices plus bookkeeping about how they were chosen."""

    indices: np.ndarray
    data_ratio: float
    kept_fraction: float
    method: str
    per_class_counts: np.ndarray

    def __post_init__(self):
        idx = np.sort(np.asarray(self.indices, dtype=np.int64))
        object.__setattr__(self, "indices", idx)
        object.__setattr__(
            self, "per_class_counts", np.asarray(self.per_class_counts, dtype=np.int64)
        )
        if np.unique(idx).size != idx.size:
            raise ShapeError("coreset indices must be unique")
        if int(self.per_class_counts.sum()) != idx.size:
            raise ShapeError("per-class counts do not add up to the coreset size")

    @property
    def size(self) -> int:
        return int(self.indices.size)


def score_gaussian(
    emb: EmbeddingSet,
    reg: float = DEFAULT_COV_REG,
    labels=None,
    per_class: bool = False,
) -> ScoreTable:
    """Log-density of each embedding under a Gaussian fit.

    score_i = -1/2 [ (z_i - mu)^T Sigma^{-1} (z_i - mu) + ln|Sigma| + e ln(2 pi) ]

    One global fit over all embeddings by default; ``per_class=True`` fits one
    Gaussian per class instead (ablation variant, requires labels).
    """
    z = emb.vectors
    n, e = z.shape
    const = e * math.log(2.0 * math.pi)
    scores = np.empty(n)
    if per_class:
        if labels is None:
            raise ConfigError("per-class gaussian scoring requires labels")
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (n,):
            raise ShapeError("labels must align with embeddings")
        for cls in np.unique(labels):
            sel = np.flatnonzero(labels == cls)
            fit = fit_gaussian(z[sel], reg=reg)
            scores[sel] = -0.5 * (mahalanobis_sq_batch(fit, z[sel]) + fit.log_det + const)
    else:
        fit = fit_gaussian(z, reg=reg)
        scores = -0.5 * (mahalanobis_sq_batch(fit, z) + fit.log_det + const)
    return ScoreTable(scores=scores, method=METHOD_GAUSSIAN, encoder_id=emb.source_encoder)


def score_moderate(emb: EmbeddingSet, labels) -> ScoreTable:
    """Squared distance of each embedding to its class coordinate-wise median."""
    z = emb.vectors
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (z.shape[0],):
        raise ShapeError("labels must align with embeddings")
    scores = np.empty(z.shape[0])
    for cls in np.unique(labels):
        sel = np.flatnonzero(labels == cls)
        if sel.size == 0:
            raise InsufficientData(f"class {cls} has no embeddings")
        median = np.median(z[sel], axis=0)
        diff = z[sel] - median
        scores[sel] = np.einsum("ij,ij->i", diff, diff)
    return ScoreTable(scores=scores, method=METHOD_MODERATE, encoder_id=emb.source_encoder)


def _stratified_counts(labels: np.ndarray, K: int, ratio: float) -> np.ndarray:
    counts = np.bincount(labels, minlength=K)
    kept = np.zeros(K, dtype=np.int64)
    for j in range(K):
        if counts[j] > 0:
            kept[j] = min(counts[j], max(1, round_half_up(ratio * counts[j])))
    return kept


def select(table: ScoreTable, labels, ratio: float, K: int | None = None) -> Coreset:
    """Select a coreset at data ratio R from a score table.

    gaussian: global top-R fraction of the highest scores. moderate_ds: per
    class, the max(1, round(R*n_j)) samples whose distance is closest to that
    class's median distance; ties go to the smaller index.
    """
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"data ratio must be in (0, 1], got {ratio}")
    labels = np.asarray(labels, dtype=np.int64)
    n = table.scores.size
    if labels.shape != (n,):
        raise ShapeError("labels must align with scores")
    if K is None:
        K = int(labels.max()) + 1 if n else 0
    elif n and labels.max() >= K:
        raise ShapeError(f"label {labels.max()} out of range for K={K}")

    if table.method == METHOD_GAUSSIAN:
        kept = percentile_threshold(table.scores, ratio)
    elif table.method == METHOD_MODERATE:
        per_class_kept = _stratified_counts(labels, K, ratio)
        parts = []
        for j in range(K):
            sel = np.flatnonzero(labels == j)
            if sel.size == 0:
                continue
            dist = table.scores[sel]
            # lower median (an attained distance): the interpolated midpoint
            # would tie the two middle samples exactly, and such ties do not
            # survive a uniform score shift at float precision
            median = np.sort(dist)[(dist.size - 1) // 2]
            band = np.abs(dist - median)
            order = np.lexsort((sel, band))
            parts.append(sel[order[: per_class_kept[j]]])
        kept = np.sort(np.concatenate(parts))
    else:
        raise ConfigError(f"select() does not handle method {table.method!r}")

    counts = np.bincount(labels[kept], minlength=K)
    return Coreset(
        indices=kept,
        data_ratio=ratio,
        kept_fraction=kept.size / n,
        method=table.method,
        per_class_counts=counts,
    )


def select_uniform_random(ds: LabeledDataset, ratio: float, seed: int) -> Coreset:
    """Per class, keep max(1, round(R*n_j)) samples without replacement."""
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"data ratio must be in (0, 1], got {ratio}")
    rng = np.random.default_rng(seed)
    kept_counts = _stratified_counts(ds.labels, ds.K, ratio)
    parts = []
    for j in range(ds.K):
        sel = ds.class_indices(j)
        if sel.size == 0:
            continue
        chosen = rng.choice(sel, size=kept_counts[j], replace=False)
        parts.append(chosen)
    kept = np.sort(np.concatenate(parts))
    return Coreset(
        indices=kept,
        data_ratio=ratio,
        kept_fraction=kept.size / ds.n,
        method=METHOD_UNIFORM,
        per_class_counts=np.bincount(ds.labels[kept], minlength=ds.K),
    )


# ---------------------------------------------------------------------------
# CSV persistence (17 significant digits, enough to round-trip float64)
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_scores_csv(path, table: ScoreTable, labels, provenance: dict | None = None) -> None:
    labels = np.asarray(labels, dtype=np.int64)
    lines = [f"# {k}={v}" for k, v in (provenance or {}).items()]
    lines.append("index,label,score,method,encoder")
    for i, (lab, s) in enumerate(zip(labels, table.scores)):
        lines.append(f"{i},{lab},{_fmt(s)},{table.method},{table.encoder_id}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_scores_csv(path) -> tuple[ScoreTable, np.ndarray, dict]:
    meta, rows = _read_csv_lines(path, "index,label,score,method,encoder")
    labels, scores, methods, encoders = [], [], set(), set()
    for row in rows:
        parts = row.split(",")
        if len(parts) != 5:
            raise FormatError(f"malformed score row: {row!r}")
        labels.append(int(parts[1]))
        scores.append(float(parts[2]))
        methods.add(parts[3])
        encoders.add(parts[4])
    if len(methods) != 1 or len(encoders) != 1:
        raise FormatError("score table mixes methods or encoders")
    table = ScoreTable(np.array(scores), method=methods.pop(), encoder_id=encoders.pop())
    return table, np.array(labels, dtype=np.int64), meta


def write_coreset_csv(path, coreset: Coreset, provenance: dict | None = None) -> None:
    meta = dict(provenance or {})
    meta.update(
        method=coreset.method,
        data_ratio=_fmt(coreset.data_ratio),
        kept_fraction=_fmt(coreset.kept_fraction),
        per_class_counts="|".join(str(c) for c in coreset.per_class_counts),
    )
    lines = [f"# {k}={v}" for k, v in meta.items()]
    lines.append("index")
    lines.extend(str(i) for i in coreset.indices)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_coreset_csv(path) -> tuple[Coreset, dict]:
    meta, rows = _read_csv_lines(path, "index")
    required = ("method", "data_ratio", "kept_fraction", "per_class_counts")
    missing = [k for k in required if k not in meta]
    if missing:
        raise FormatError(f"coreset file missing metadata keys {missing}")
    indices = np.array([int(r) for r in rows], dtype=np.int64)
    counts = np.array([int(c) for c in meta["per_class_counts"].split("|")], dtype=np.int64)
    coreset = Coreset(
        indices=indices,
        data_ratio=float(meta["data_ratio"]),
        kept_fraction=float(meta["kept_fraction"]),
        method=meta["method"],
        per_class_counts=counts,
    )
    return coreset, meta


def _read_csv_lines(path, expected_header: str) -> tuple[dict, list[str]]:
    text = Path(path).read_text(encoding="utf-8")
    meta: dict[str, str] = {}
    rows: list[str] = []
    header_seen = False
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                key, value = body.split("=", 1)
                meta[key.strip()] = value.strip()
            continue
        if not header_seen:
            if line != expected_header:
                raise FormatError(f"expected header {expected_header!r}, got {line!r}")
            header_seen = True
            continue
        rows.append(line)
    if not header_seen:
        raise FormatError(f"missing header {expected_header!r} in {path}")
    return meta, rows
