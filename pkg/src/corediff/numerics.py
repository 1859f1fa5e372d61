"""Deterministic linear-algebra and statistics primitives.

Everything here is a pure function over float64 numpy arrays. The Gaussian
fit keeps its Cholesky factor so quadratic forms and log-determinants never
touch an explicit matrix inverse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ConfigError, InsufficientData, ShapeError, SingularCovariance

DEFAULT_COV_REG = 1e-6


@dataclass(frozen=True)
class GaussianFit:
    """Mean/covariance estimate with a cached lower-triangular Cholesky factor.

    Attributes:
        mean: Sample mean, shape (d,).
        covariance: Regularized unbiased sample covariance, shape (d, d).
        log_det: log |covariance|, computed from the Cholesky diagonal.
        dimension: d.
        chol: Lower-triangular factor L with L @ L.T == covariance.
    """

    mean: np.ndarray
    covariance: np.ndarray
    log_det: float
    dimension: int
    chol: np.ndarray


def _as_matrix(vectors) -> np.ndarray:
    try:
        arr = np.asarray(vectors, dtype=np.float64)
    except ValueError as exc:
        raise ShapeError(f"vectors must share one dimension: {exc}") from exc
    if arr.ndim != 2:
        raise ShapeError(f"expected a list of equal-length vectors, got ndim={arr.ndim}")
    return arr


def fit_gaussian(vectors, reg: float = DEFAULT_COV_REG) -> GaussianFit:
    """Fit a single Gaussian to a set of d-vectors.

    The covariance is the unbiased (n-1 denominator) sample covariance with
    ``reg * trace/d`` added to each diagonal entry, then factorized once.

    Args:
        vectors: Sequence of n vectors of equal dimension d, n >= 2.
        reg: Nonnegative relative ridge; 0 disables regularization.

    Returns:
        GaussianFit over the regularized covariance.

    Raises:
        InsufficientData: Fewer than 2 vectors.
        ShapeError: Ragged input.
        SingularCovariance: Factorization fails after regularization.
        ConfigError: reg < 0.
    """
    if reg < 0:
        raise ConfigError(f"covariance regularization must be >= 0, got {reg}")
    arr = _as_matrix(vectors)
    n, d = arr.shape
    if n < 2:
        raise InsufficientData(f"need at least 2 vectors to fit a Gaussian, got {n}")
    mean = arr.mean(axis=0)
    centered = arr - mean
    cov = centered.T @ centered / (n - 1)
    cov = 0.5 * (cov + cov.T)
    if reg > 0:
        cov = cov + (reg * np.trace(cov) / d) * np.eye(d)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance(
            f"covariance not positive definite after regularization (reg={reg})"
        ) from exc
    diag = np.diagonal(chol)
    # LAPACK happily factors exactly-singular matrices into round-off pivots,
    # so pivots must clear an eps-scale floor relative to the matrix scale.
    scale = float(np.max(np.diagonal(cov)))
    if (
        not np.all(np.isfinite(diag))
        or scale <= 0
        or np.any(diag * diag <= 1e-12 * scale)
    ):
        raise SingularCovariance("Cholesky pivot at round-off level; covariance is singular")
    log_det = 2.0 * float(np.log(diag).sum())
    return GaussianFit(mean=mean, covariance=cov, log_det=log_det, dimension=d, chol=chol)


def mahalanobis_sq(fit: GaussianFit, z) -> float:
    """Squared Mahalanobis distance of z under the fit, via triangular solves.

    Args:
        fit: A factorized Gaussian.
        z: Vector of dimension fit.dimension.

    Returns:
        (z - mean)^T Sigma^{-1} (z - mean), always >= 0.

    Raises:
        ShapeError: Dimension mismatch.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (fit.dimension,):
        raise ShapeError(f"expected vector of dimension {fit.dimension}, got shape {z.shape}")
    y = solve_triangular(fit.chol, z - fit.mean, lower=True)
    return float(y @ y)


def mahalanobis_sq_batch(fit: GaussianFit, zs: np.ndarray) -> np.ndarray:
    """Vectorized mahalanobis_sq over rows of zs, shape (n, d) -> (n,)."""
    zs = np.asarray(zs, dtype=np.float64)
    if zs.ndim != 2 or zs.shape[1] != fit.dimension:
        raise ShapeError(f"expected (n, {fit.dimension}) array, got shape {zs.shape}")
    ys = solve_triangular(fit.chol, (zs - fit.mean).T, lower=True)
    return np.einsum("ij,ij->j", ys, ys)


def round_half_up(x: float) -> int:
    """Round a nonnegative float half away from zero."""
    return int(math.floor(x + 0.5))


def percentile_threshold(scores, keep_fraction: float) -> np.ndarray:
    """Indices of the top keep_fraction of scores.

    Keeps exactly max(1, round(keep_fraction * n)) entries, rounding half away
    from zero. Ties are broken in favor of the smaller original index.

    Args:
        scores: Non-empty sequence of finite scores.
        keep_fraction: Fraction in (0, 1].

    Returns:
        Kept indices, sorted ascending.

    Raises:
        InsufficientData: Empty input.
        ConfigError: keep_fraction outside (0, 1].
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise ShapeError(f"scores must be one-dimensional, got shape {s.shape}")
    n = s.size
    if n == 0:
        raise InsufficientData("cannot threshold an empty score list")
    if not 0.0 < keep_fraction <= 1.0:
        raise ConfigError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    k = min(n, max(1, round_half_up(keep_fraction * n)))
    order = np.lexsort((np.arange(n), -s))
    return np.sort(order[:k])
