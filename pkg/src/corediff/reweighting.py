"""Class weights via distributionally robust optimization against a reference.

A proxy model trains on the coreset while exponentiated-gradient ascent moves
the class weights toward classes where the proxy still lags the frozen
full-data reference. Margins use common random numbers: the proxy and the
reference see identical (t, eps) draws, otherwise sign flips dominate at desk
scale. The returned weights are the trajectory average.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import LabeledDataset
from .diffusion import DenoiserModel, NoiseSchedule, loss_batch, q_sample
from .errors import ConfigError, FormatError, InsufficientData, ShapeError


@dataclass(frozen=True)
class ClassWeights:
    """Simplex-constrained class weight vector.

    step_count is the number of DRO steps averaged into alpha (0 for an
    instantaneous vector).
    """

    alpha: np.ndarray
    step_count: int = 0

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64)
        object.__setattr__(self, "alpha", alpha)
        if alpha.ndim != 1 or alpha.size < 1:
            raise ShapeError("alpha must be a 1-d vector")
        if np.any(alpha <= 0):
            raise ConfigError("class weights must be strictly positive")
        if abs(float(alpha.sum()) - 1.0) > 1e-9:
            raise ConfigError(f"class weights must sum to 1, got {alpha.sum()!r}")

    @property
    def K(self) -> int:
        return self.alpha.size

    @classmethod
    def uniform(cls, K: int) -> "ClassWeights":
        return cls(alpha=np.full(K, 1.0 / K), step_count=0)


@dataclass
class DroConfig:
    """Hyperparameters for the weight-learning loop."""

    proxy_epochs: int
    eta: float = 0.1
    smoothing: float = 1e-3
    proxy_seed: int = 0
    batch_size: int = 32      # per-class batch size for margin estimates
    proxy_lr: float = 0.02

    def __post_init__(self):
        if self.proxy_epochs < 0:
            raise ConfigError(f"proxy_epochs must be >= 0, got {self.proxy_epochs}")
        if self.eta <= 0:
            raise ConfigError(f"eta must be > 0, got {self.eta}")
        if not 0.0 <= self.smoothing < 1.0:
            raise ConfigError(f"smoothing must be in [0, 1), got {self.smoothing}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.proxy_lr <= 0:
            raise ConfigError(f"proxy_lr must be > 0, got {self.proxy_lr}")


def _paired_class_losses(proxy, reference, class_batches, sched, rng):
    """Per-class noise-prediction losses with shared (t, eps) draws.

    class_batches: sequence of K arrays, each the (n_i, d) clean samples of
    class i. Draw order per class: t, then eps.
    """
    lp = np.empty(len(class_batches))
    lref = np.empty(len(class_batches))
    for i, x0 in enumerate(class_batches):
        x0 = np.asarray(x0, dtype=np.float64)
        if x0.ndim != 2 or x0.shape[0] == 0:
            raise InsufficientData(f"class {i} batch is empty")
        b = x0.shape[0]
        t = rng.integers(1, sched.T + 1, size=b)
        eps = rng.standard_normal(x0.shape)
        x_t = q_sample(x0, t, eps, sched)
        cond = np.full(b, i, dtype=np.int64)
        pred_p, _ = proxy.forward_batch(x_t, cond, t)
        pred_r, _ = reference.forward_batch(x_t, cond, t)
        lp[i] = float(np.mean(np.sum((pred_p - eps) ** 2, axis=1)))
        lref[i] = float(np.mean(np.sum((pred_r - eps) ** 2, axis=1)))
    return lp, lref


def class_margins(proxy, reference, class_batches, sched: NoiseSchedule, rng) -> np.ndarray:
    """Clipped excess loss per class: max(0, loss_proxy - loss_reference)."""
    lp, lref = _paired_class_losses(proxy, reference, class_batches, sched, rng)
    return np.maximum(0.0, lp - lref)


def update_weights(alpha: ClassWeights, margins, eta: float, smoothing: float) -> ClassWeights:
    """Multiplicative-weights ascent step followed by uniform smoothing.

    alpha'_i is proportional to alpha_i * exp(eta * margin_i); the result is
    then mixed as (1 - smoothing) * alpha' + smoothing / K. All-zero margins
    leave the multiplicative stage untouched bit-for-bit.
    """
    m = np.asarray(margins, dtype=np.float64)
    if m.shape != (alpha.K,):
        raise ShapeError(f"expected {alpha.K} margins, got shape {m.shape}")
    if np.any(m < 0):
        raise ConfigError("margins must be >= 0 (clip before updating)")
    if not 0.0 <= smoothing < 1.0:
        raise ConfigError(f"smoothing must be in [0, 1), got {smoothing}")
    a = alpha.alpha
    if np.any(m != 0.0):
        w = a * np.exp(eta * m)
        a = w / w.sum()
    if smoothing != 0.0:
        a = (1.0 - smoothing) * a + smoothing / alpha.K
    return ClassWeights(alpha=a, step_count=alpha.step_count)


@dataclass
class DroResult:
    weights: ClassWeights                # trajectory average, renormalized
    trajectory: np.ndarray               # (steps, K) alpha after each update
    clipped_fraction: float              # share of margins clipped to zero
    margins_trace: np.ndarray            # (steps, K) clipped margins


def run_dro(coreset_ds: LabeledDataset, reference: DenoiserModel, config: DroConfig,
            sched: NoiseSchedule) -> DroResult:
    """Alternate margin evaluation, weight ascent, and one proxy SGD step.

    The proxy shares the reference architecture but starts from a fresh
    seeded init. Steps per epoch scale so one epoch touches roughly the whole
    coreset; zero proxy epochs return uniform weights untouched.
    """
    K = coreset_ds.K
    class_idx = [coreset_ds.class_indices(j) for j in range(K)]
    if any(idx.size == 0 for idx in class_idx):
        empty = [j for j, idx in enumerate(class_idx) if idx.size == 0]
        raise InsufficientData(f"coreset classes {empty} are empty")
    if reference.d != coreset_ds.d or reference.K != K:
        raise ShapeError("reference model does not match the coreset dataset")

    steps_per_epoch = max(1, math.ceil(coreset_ds.n / (K * config.batch_size)))
    total_steps = config.proxy_epochs * steps_per_epoch
    if total_steps == 0:
        return DroResult(
            weights=ClassWeights.uniform(K),
            trajectory=np.empty((0, K)),
            clipped_fraction=0.0,
            margins_trace=np.empty((0, K)),
        )

    rng = np.random.default_rng(config.proxy_seed)
    proxy = DenoiserModel(
        d=reference.d, K=K, widths=reference.widths,
        time_dim=reference.time_dim, cond_dim=reference.cond_dim,
        seed=config.proxy_seed,
    )
    x_all = coreset_ds.samples.astype(np.float64)
    alpha = ClassWeights.uniform(K)
    trajectory = np.empty((total_steps, K))
    margins_trace = np.empty((total_steps, K))
    clipped = 0
    for step in range(total_steps):
        batches = []
        batch_idx = []
        for j in range(K):
            size = min(config.batch_size, class_idx[j].size)
            chosen = rng.choice(class_idx[j], size=size, replace=False)
            batches.append(x_all[chosen])
            batch_idx.append(chosen)
        lp, lref = _paired_class_losses(proxy, reference, batches, sched, rng)
        clipped += int(np.sum(lp - lref <= 0))
        margins = np.maximum(0.0, lp - lref)
        alpha = update_weights(alpha, margins, config.eta, config.smoothing)
        trajectory[step] = alpha.alpha
        margins_trace[step] = margins
        union = np.concatenate(batch_idx)
        _, grads = loss_batch(
            proxy, x_all[union], coreset_ds.labels[union], sched,
            weights=alpha.alpha, p_uncond=0.0, rng=rng,
        )
        proxy.sgd_step(grads, config.proxy_lr)

    mean_alpha = trajectory.mean(axis=0)
    mean_alpha = mean_alpha / mean_alpha.sum()
    return DroResult(
        weights=ClassWeights(alpha=mean_alpha, step_count=total_steps),
        trajectory=trajectory,
        clipped_fraction=clipped / (total_steps * K),
        margins_trace=margins_trace,
    )


# ---------------------------------------------------------------------------
# CSV persistence
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_weights_csv(path, weights: ClassWeights, provenance: dict | None = None) -> None:
    meta = dict(provenance or {})
    meta["steps"] = weights.step_count
    lines = [f"# {k}={v}" for k, v in meta.items()]
    lines.append("class,alpha_bar")
    for j, a in enumerate(weights.alpha):
        lines.append(f"{j},{_fmt(a)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_weights_csv(path) -> tuple[ClassWeights, dict]:
    meta: dict[str, str] = {}
    rows: list[str] = []
    header_seen = False
    for line in Path(path).read_text(encoding="utf-8").splitlines():
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
            if line != "class,alpha_bar":
                raise FormatError(f"expected header 'class,alpha_bar', got {line!r}")
            header_seen = True
            continue
        rows.append(line)
    if not header_seen:
        raise FormatError(f"missing header in weights file {path}")
    alpha = np.empty(len(rows))
    for row in rows:
        cls, value = row.split(",", 1)
        alpha[int(cls)] = float(value)
    steps = int(meta.get("steps", 0))
    try:
        return ClassWeights(alpha=alpha, step_count=steps), meta
    except (ConfigError, ShapeError) as exc:
        raise FormatError(f"weights file violates the simplex invariant: {exc}") from exc


def write_trajectory_csv(path, result: DroResult, provenance: dict | None = None) -> None:
    k = result.weights.K
    lines = [f"# {key}={v}" for key, v in (provenance or {}).items()]
    lines.append("step," + ",".join(f"alpha_{j}" for j in range(k)))
    for step, row in enumerate(result.trajectory):
        lines.append(f"{step}," + ",".join(_fmt(a) for a in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
