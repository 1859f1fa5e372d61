"""Class-conditional denoising diffusion at desk scale.

The denoiser is a fully-connected net over the concatenation of the noisy
sample, a fixed sinusoidal time embedding, and a learned class embedding with
one extra null row (index K) for classifier-free guidance. Gradients are exact
reverse-mode; the optimizer is plain SGD so that runs are bit-reproducible.

Checkpoint format (``.dmc``, little-endian):

    magic b"DMC1" | version u16 | d u32 | K u16 | time_dim u16 | cond_dim u16
    | n_hidden u8 | hidden widths u32 each | T u32
    | betas T f64 | cond_emb (K+1)*cond_dim f64 | mlp params f64
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import LabeledDataset
from .errors import ConfigError, FormatError, InsufficientData, ShapeError, VersionError
from .nn import Mlp

_MAGIC = b"DMC1"
_VERSION = 1

DEFAULT_T = 100
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
DEFAULT_WIDTHS = (128, 128)
DEFAULT_P_UNCOND = 0.1
DEFAULT_GUIDANCE = 0.3


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step corruption variances and cumulative signal retention.

    Arrays are indexed by t-1 for time steps t in 1..T.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray


def make_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Linear beta schedule over T steps with exact cumulative products."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )
    betas = np.linspace(beta_start, beta_end, T)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def q_sample(x0, t, eps, sched: NoiseSchedule):
    """Forward corruption: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    Accepts a single (d,) vector with integer t, or a (B, d) batch with a
    (B,) array of steps; eps must match x0's shape.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ShapeError(f"eps shape {eps.shape} must match x0 shape {x0.shape}")
    t_arr = np.asarray(t, dtype=np.int64)
    if np.any(t_arr < 1) or np.any(t_arr > sched.T):
        raise ConfigError(f"t must be in [1, {sched.T}]")
    ab = sched.alpha_bars[t_arr - 1]
    if x0.ndim == 2:
        ab = np.broadcast_to(ab, (x0.shape[0],))[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


class DenoiserModel:
    """Noise estimator eps_theta(x_t, c, t) with trainable class embeddings.

    Row K of the embedding table is the null (unconditional) token.
    """

    def __init__(self, d: int, K: int, widths=DEFAULT_WIDTHS,
                 time_dim: int = 16, cond_dim: int = 8, seed: int = 0):
        if d < 1 or K < 1:
            raise ConfigError(f"need d >= 1 and K >= 1, got d={d}, K={K}")
        if time_dim < 2 or time_dim % 2:
            raise ConfigError(f"time_dim must be even and >= 2, got {time_dim}")
        if cond_dim < 1:
            raise ConfigError(f"cond_dim must be >= 1, got {cond_dim}")
        self.d = int(d)
        self.K = int(K)
        self.widths = tuple(int(w) for w in widths)
        self.time_dim = int(time_dim)
        self.cond_dim = int(cond_dim)
        rng = np.random.default_rng(seed)
        self.cond_emb = rng.standard_normal((K + 1, cond_dim)) * 0.5
        self.mlp = Mlp((d + time_dim + cond_dim, *self.widths, d), rng)
        half = time_dim // 2
        self._time_freqs = 10000.0 ** (-np.arange(half) / half)

    @property
    def null_token(self) -> int:
        return self.K

    def time_features(self, t: np.ndarray) -> np.ndarray:
        ang = np.asarray(t, dtype=np.float64)[:, None] * self._time_freqs[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    def forward_batch(self, x_t: np.ndarray, cond: np.ndarray, t: np.ndarray):
        """(B, d) noisy inputs with per-sample condition and step -> (eps_hat, cache)."""
        x_t = np.asarray(x_t, dtype=np.float64)
        cond = np.asarray(cond, dtype=np.int64)
        if x_t.ndim != 2 or x_t.shape[1] != self.d:
            raise ShapeError(f"expected (B, {self.d}) inputs, got {x_t.shape}")
        if np.any(cond < 0) or np.any(cond > self.K):
            raise ConfigError(f"condition tokens must be in [0, {self.K}]")
        feats = np.concatenate(
            [x_t, self.time_features(t), self.cond_emb[cond]], axis=1
        )
        out, mlp_cache = self.mlp.forward(feats)
        return out, (mlp_cache, cond)

    def backward_batch(self, cache, grad_out: np.ndarray):
        """Gradients of sum(grad_out * eps_hat) for MLP params and embeddings."""
        mlp_cache, cond = cache
        mlp_grads, grad_in = self.mlp.backward(mlp_cache, grad_out)
        emb_grad = np.zeros_like(self.cond_emb)
        np.add.at(emb_grad, cond, grad_in[:, self.d + self.time_dim:])
        return mlp_grads, emb_grad

    def sgd_step(self, grads, lr: float) -> None:
        mlp_grads, emb_grad = grads
        self.mlp.sgd_step(mlp_grads, lr)
        self.cond_emb -= lr * emb_grad

    def param_vector(self) -> np.ndarray:
        return np.concatenate([self.cond_emb.ravel(), self.mlp.param_vector()])

    def set_param_vector(self, vec: np.ndarray) -> None:
        n_emb = self.cond_emb.size
        self.cond_emb[...] = vec[:n_emb].reshape(self.cond_emb.shape)
        self.mlp.set_param_vector(vec[n_emb:])

    def copy(self) -> "DenoiserModel":
        dup = DenoiserModel.__new__(DenoiserModel)
        dup.d, dup.K = self.d, self.K
        dup.widths, dup.time_dim, dup.cond_dim = self.widths, self.time_dim, self.cond_dim
        dup.cond_emb = self.cond_emb.copy()
        dup.mlp = self.mlp.copy()
        dup._time_freqs = self._time_freqs.copy()
        return dup


def _weight_multipliers(labels: np.ndarray, weights) -> np.ndarray:
    if weights is None:
        return np.ones(labels.shape[0])
    alpha = np.asarray(weights, dtype=np.float64)
    _check_simplex(alpha)
    if labels.size and labels.max() >= alpha.size:
        raise ShapeError(f"label {labels.max()} out of range for {alpha.size} class weights")
    return alpha.size * alpha[labels]


def _check_simplex(alpha: np.ndarray, tol: float = 1e-9) -> None:
    if alpha.ndim != 1 or alpha.size < 1:
        raise ShapeError("class weights must be a 1-d vector")
    if np.any(alpha <= 0) or abs(float(alpha.sum()) - 1.0) > tol:
        raise ConfigError("class weights must be strictly positive and sum to 1")


def loss_batch(model: DenoiserModel, x0, labels, sched: NoiseSchedule,
               weights=None, p_uncond: float = 0.0, rng=None):
    """Noise-prediction loss and exact parameter gradients for one batch.

    Per sample: t ~ U{1..T}, eps ~ N(0, I); with probability p_uncond the
    label is replaced by the null token. The batch loss is the mean of
    ||eps_hat - eps||^2, each term multiplied by K * alpha_label when class
    weights are given (uniform weights give multiplier exactly 1).

    Draw order from rng: t, then eps, then the dropout uniforms.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if x0.ndim != 2:
        raise ShapeError("x0 must be a (B, d) batch")
    b = x0.shape[0]
    if b == 0:
        raise InsufficientData("empty batch")
    if labels.shape != (b,):
        raise ShapeError("labels must align with the batch")
    if not 0.0 <= p_uncond < 1.0:
        raise ConfigError(f"p_uncond must be in [0, 1), got {p_uncond}")
    if rng is None:
        raise ConfigError("loss_batch requires an explicit rng for reproducibility")
    t = rng.integers(1, sched.T + 1, size=b)
    eps = rng.standard_normal(x0.shape)
    u = rng.random(b)
    cond = np.where(u < p_uncond, model.null_token, labels)
    x_t = q_sample(x0, t, eps, sched)
    eps_hat, cache = model.forward_batch(x_t, cond, t)
    resid = eps_hat - eps
    sq = np.einsum("ij,ij->i", resid, resid)
    mult = _weight_multipliers(labels, weights)
    loss = float(np.mean(mult * sq))
    grad_out = (2.0 / b) * mult[:, None] * resid
    grads = model.backward_batch(cache, grad_out)
    return loss, grads


@dataclass
class TrainConfig:
    """Knobs for the weighted diffusion training loop."""

    epochs: int
    batch_size: int = 64
    lr: float = 0.02
    seed: int = 0
    p_uncond: float = DEFAULT_P_UNCOND
    class_weights: np.ndarray | None = None
    anneal_ratio: float | None = None
    weight_mode: str = "multiplier"  # or "resample"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.p_uncond < 1.0:
            raise ConfigError(f"p_uncond must be in [0, 1), got {self.p_uncond}")
        if self.class_weights is not None:
            alpha = np.asarray(self.class_weights, dtype=np.float64)
            _check_simplex(alpha)
            self.class_weights = alpha
        if self.anneal_ratio is not None and not 0.0 < self.anneal_ratio <= 1.0:
            raise ConfigError(f"anneal_ratio must be in (0, 1], got {self.anneal_ratio}")
        if self.weight_mode not in ("multiplier", "resample"):
            raise ConfigError(f"unknown weight_mode {self.weight_mode!r}")


@dataclass
class TrainResult:
    loss_trace: list[float] = field(default_factory=list)
    epoch_sizes: list[int] = field(default_factory=list)
    rng: np.random.Generator | None = None


def train(model: DenoiserModel, ds: LabeledDataset, config: TrainConfig,
          sched: NoiseSchedule, full_ds: LabeledDataset | None = None,
          rng: np.random.Generator | None = None) -> TrainResult:
    """Seeded SGD training, optionally annealing from a coreset to full data.

    With anneal_ratio = a, epochs 1..ceil(a*E) run on ds and the rest on
    full_ds. Pass ``rng`` to resume from a previous run's generator state;
    otherwise a fresh generator is seeded from config.seed.
    """
    if config.anneal_ratio is not None and full_ds is None:
        raise ConfigError("anneal_ratio set but no full dataset provided")
    if config.class_weights is not None and config.class_weights.size != ds.K:
        raise ShapeError(
            f"class weights length {config.class_weights.size} != K={ds.K}"
        )
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    split = config.epochs
    if config.anneal_ratio is not None:
        split = min(config.epochs, math.ceil(config.anneal_ratio * config.epochs))
    phases = {False: ds, True: full_ds}
    cache = {}
    result = TrainResult(rng=rng)
    resample = config.weight_mode == "resample" and config.class_weights is not None
    for epoch in range(1, config.epochs + 1):
        data = phases[epoch > split]
        if id(data) not in cache:
            cache[id(data)] = (data.samples.astype(np.float64), data.labels)
        x_all, y_all = cache[id(data)]
        n = y_all.shape[0]
        if resample:
            alpha = config.class_weights
            probs = alpha[y_all] / np.bincount(y_all, minlength=alpha.size)[y_all]
            probs = probs / probs.sum()
            order = rng.choice(n, size=n, replace=True, p=probs)
            weights = None
        else:
            order = rng.permutation(n)
            weights = config.class_weights
        batch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = loss_batch(
                model, x_all[idx], y_all[idx], sched,
                weights=weights, p_uncond=config.p_uncond, rng=rng,
            )
            model.sgd_step(grads, config.lr)
            batch_losses.append(loss)
        result.loss_trace.append(float(np.mean(batch_losses)))
        result.epoch_sizes.append(n)
    return result


def cfg_eps(model: DenoiserModel, x_t, c: int, t: int, w: float) -> np.ndarray:
    """Classifier-free guidance: (1+w) eps(x, c, t) - w eps(x, null, t)."""
    if w < 0:
        raise ConfigError(f"guidance weight must be >= 0, got {w}")
    x_t = np.asarray(x_t, dtype=np.float64)
    single = x_t.ndim == 1
    x2 = x_t[None, :] if single else x_t
    b = x2.shape[0]
    t_arr = np.full(b, int(t), dtype=np.int64)
    cond, _ = model.forward_batch(x2, np.full(b, int(c), dtype=np.int64), t_arr)
    uncond, _ = model.forward_batch(x2, np.full(b, model.null_token, dtype=np.int64), t_arr)
    out = (1.0 + w) * cond - w * uncond
    return out[0] if single else out


def sample_ddpm(model: DenoiserModel, sched: NoiseSchedule, c: int, w: float,
                n: int, seed: int) -> np.ndarray:
    """Ancestral sampling over all T steps with sigma_t = sqrt(beta_t)."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, model.d))
    for t in range(sched.T, 0, -1):
        eps_hat = cfg_eps(model, x, c, t, w)
        beta = sched.betas[t - 1]
        alpha = sched.alphas[t - 1]
        abar = sched.alpha_bars[t - 1]
        mean = (x - beta / math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(alpha)
        if t > 1:
            x = mean + math.sqrt(beta) * rng.standard_normal((n, model.d))
        else:
            x = mean
    return x


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Strictly increasing uniform-stride subsequence of 1..T ending at T."""
    if not 1 <= steps <= T:
        raise ConfigError(f"steps must be in [1, {T}], got {steps}")
    return [((i + 1) * T) // steps for i in range(steps)]


def sample_ddim(model: DenoiserModel, sched: NoiseSchedule, c: int, w: float,
                n: int, steps: int, seed: int) -> np.ndarray:
    """Deterministic (eta = 0) DDIM over a uniform timestep subsequence.

    The only randomness is the seeded x_T draw; nothing after initialization
    consumes the generator.
    """
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    taus = ddim_timesteps(sched.T, steps)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, model.d))
    for k in range(len(taus) - 1, -1, -1):
        t = taus[k]
        abar = sched.alpha_bars[t - 1]
        abar_prev = sched.alpha_bars[taus[k - 1] - 1] if k > 0 else 1.0
        eps_hat = cfg_eps(model, x, c, t, w)
        x0_pred = (x - math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(abar)
        x = math.sqrt(abar_prev) * x0_pred + math.sqrt(1.0 - abar_prev) * eps_hat
    return x


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def checkpoint_bytes(model: DenoiserModel, sched: NoiseSchedule) -> bytes:
    head = struct.pack(
        "<4sHIHHHB", _MAGIC, _VERSION, model.d, model.K,
        model.time_dim, model.cond_dim, len(model.widths),
    )
    head += struct.pack(f"<{len(model.widths)}I", *model.widths)
    head += struct.pack("<I", sched.T)
    payload = np.ascontiguousarray(sched.betas, dtype="<f8").tobytes()
    payload += np.ascontiguousarray(model.param_vector(), dtype="<f8").tobytes()
    return head + payload


def save_checkpoint(path, model: DenoiserModel, sched: NoiseSchedule) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, sched))


def load_checkpoint(path) -> tuple[DenoiserModel, NoiseSchedule]:
    blob = Path(path).read_bytes()
    head = struct.Struct("<4sHIHHHB")
    if len(blob) < head.size:
        raise FormatError("file too short for a checkpoint header")
    magic, version, d, K, time_dim, cond_dim, n_widths = head.unpack_from(blob, 0)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    if version != _VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    off = head.size
    try:
        widths = struct.unpack_from(f"<{n_widths}I", blob, off)
        off += 4 * n_widths
        (T,) = struct.unpack_from("<I", blob, off)
        off += 4
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint header: {exc}") from exc
    model = DenoiserModel(d=d, K=K, widths=widths, time_dim=time_dim,
                          cond_dim=cond_dim, seed=0)
    n_params = model.param_vector().size
    expected = off + 8 * (T + n_params)
    if len(blob) != expected:
        raise FormatError(
            f"checkpoint payload length {len(blob)} does not match header (expected {expected})"
        )
    betas = np.frombuffer(blob, dtype="<f8", count=T, offset=off).copy()
    off += 8 * T
    params = np.frombuffer(blob, dtype="<f8", count=n_params, offset=off)
    if not (np.all(np.isfinite(betas)) and np.all(np.isfinite(params))):
        raise FormatError("checkpoint contains non-finite values")
    if T < 1 or np.any(betas <= 0) or np.any(betas >= 1):
        raise FormatError("checkpoint schedule violates 0 < beta < 1")
    model.set_param_vector(params.astype(np.float64))
    alphas = 1.0 - betas
    sched = NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))
    return model, sched
