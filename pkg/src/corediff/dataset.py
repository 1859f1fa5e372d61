"""Labeled desk-scale datasets: synthetic generators plus binary persistence.

File format (``.lds``, little-endian throughout):

    magic b"LDS1" | version u16 | K u16 | d u32 | n u32 | name_len u16 | name utf-8
    samples: n*d float32 | labels: n uint16

A file must end exactly after the label block; anything else is a FormatError.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, InsufficientData, VersionError

_MAGIC = b"LDS1"
_VERSION = 1
_HEADER = struct.Struct("<4sHHIIH")

GENERATORS = ("gaussian_mixture", "ring_mixture", "sprite_images")

SPRITE_SIDE = 8
SPRITE_DIM = SPRITE_SIDE * SPRITE_SIDE


@dataclass(frozen=True)
class LabeledDataset:
    """Immutable labeled sample set.

    samples are float32 (n, d); labels are int64 in [0, K). Classes may be
    empty after subsetting, so class presence is not enforced here.
    """

    samples: np.ndarray
    labels: np.ndarray
    K: int
    d: int
    name: str = "dataset"

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "labels", labels)
        if samples.ndim != 2:
            raise DataError(f"samples must be 2-d, got shape {samples.shape}")
        if samples.shape != (labels.shape[0], self.d):
            raise DataError(
                f"samples shape {samples.shape} inconsistent with n={labels.shape[0]}, d={self.d}"
            )
        if labels.ndim != 1:
            raise DataError("labels must be 1-d")
        if self.K < 1 or self.K > 0xFFFF:
            raise DataError(f"K must be in [1, 65535], got {self.K}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.K):
            raise DataError(f"labels must lie in [0, {self.K}), got range "
                            f"[{labels.min()}, {labels.max()}]")
        if not np.all(np.isfinite(samples)):
            raise DataError("samples contain non-finite values")

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.K)

    def class_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)


@dataclass(frozen=True)
class DatasetSpec:
    """Recipe for a synthetic dataset; the seed fully determines the output."""

    generator: str
    K: int
    per_class: int
    d: int
    seed: int
    name: str = ""

    def __post_init__(self):
        if self.K < 2:
            raise ConfigError(f"K must be >= 2, got {self.K}")
        if self.per_class < 2:
            raise ConfigError(f"per_class must be >= 2, got {self.per_class}")
        if self.d < 1:
            raise ConfigError(f"d must be >= 1, got {self.d}")


def _class_circle_means(K: int, d: int, radius: float = 4.0) -> np.ndarray:
    means = np.zeros((K, d))
    angles = 2.0 * np.pi * np.arange(K) / K
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


def _sprite_template(cls: int) -> np.ndarray:
    # Diagonal stripes; orientation and stripe width vary by class.
    r, c = np.meshgrid(np.arange(SPRITE_SIDE), np.arange(SPRITE_SIDE), indexing="ij")
    a = 1 + cls % 3
    b = (cls // 3) % 3 - 1
    width = 2 + cls % 2
    mask = ((a * r + b * c) // width) % 2 == 0
    return np.where(mask, 0.8, 0.2)


def generate(spec: DatasetSpec) -> LabeledDataset:
    """Generate a balanced dataset from the spec; deterministic given the seed.

    gaussian_mixture: class means on a circle of radius 4 with unit
    within-class covariance. ring_mixture: classes on concentric rings.
    sprite_images: 8x8 grayscale class templates with pixel noise, flattened
    to d = 64 with every value in [0, 1].
    """
    if spec.generator not in GENERATORS:
        raise ConfigError(f"unknown generator {spec.generator!r}; expected one of {GENERATORS}")
    rng = np.random.default_rng(spec.seed)
    K, m, d = spec.K, spec.per_class, spec.d
    labels = np.repeat(np.arange(K), m)

    if spec.generator == "gaussian_mixture":
        if d < 2:
            raise ConfigError("gaussian_mixture needs d >= 2")
        means = _class_circle_means(K, d)
        samples = means[labels] + rng.standard_normal((K * m, d))
    elif spec.generator == "ring_mixture":
        if d < 2:
            raise ConfigError("ring_mixture needs d >= 2")
        radii = 2.0 * (np.arange(K) + 1.0)
        angles = rng.uniform(0.0, 2.0 * np.pi, size=K * m)
        radial = radii[labels] + rng.normal(0.0, 0.15, size=K * m)
        samples = rng.normal(0.0, 0.15, size=(K * m, d))
        samples[:, 0] = radial * np.cos(angles)
        samples[:, 1] = radial * np.sin(angles)
    else:
        if d != SPRITE_DIM:
            raise ConfigError(f"sprite_images requires d = {SPRITE_DIM}, got {d}")
        templates = np.stack([_sprite_template(j) for j in range(K)])
        noisy = templates[labels].reshape(K * m, SPRITE_DIM)
        noisy = noisy + rng.normal(0.0, 0.08, size=noisy.shape)
        samples = np.clip(noisy, 0.0, 1.0)

    name = spec.name or f"{spec.generator}-K{K}-m{m}-d{d}-s{spec.seed}"
    return LabeledDataset(samples=samples, labels=labels, K=K, d=d, name=name)


def subset(ds: LabeledDataset, indices) -> tuple[LabeledDataset, tuple[int, ...]]:
    """Restrict a dataset to the given unique indices (taken in sorted order).

    Returns the restricted dataset plus the labels of classes that ended up
    empty; K is preserved even when classes vanish.

    Raises:
        InsufficientData: Empty index set.
        IndexError: Out-of-range index.
        DataError: Duplicate indices.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise InsufficientData("cannot take an empty subset")
    if idx.min() < 0 or idx.max() >= ds.n:
        raise IndexError(f"subset index out of range [0, {ds.n})")
    if np.unique(idx).size != idx.size:
        raise DataError("subset indices must be unique")
    idx = np.sort(idx)
    out = LabeledDataset(
        samples=ds.samples[idx], labels=ds.labels[idx], K=ds.K, d=ds.d, name=ds.name
    )
    empty = tuple(int(j) for j in range(ds.K) if not np.any(out.labels == j))
    return out, empty


def to_bytes(ds: LabeledDataset) -> bytes:
    name_bytes = ds.name.encode("utf-8")
    if len(name_bytes) > 0xFFFF:
        raise DataError("dataset name too long to serialize")
    header = _HEADER.pack(_MAGIC, _VERSION, ds.K, ds.d, ds.n, len(name_bytes))
    samples = np.ascontiguousarray(ds.samples, dtype="<f4").tobytes()
    labels = np.ascontiguousarray(ds.labels.astype("<u2")).tobytes()
    return header + name_bytes + samples + labels


def save(ds: LabeledDataset, path) -> None:
    """Write the dataset to path in .lds format (bit-exact round trip)."""
    Path(path).write_bytes(to_bytes(ds))


def from_bytes(blob: bytes) -> LabeledDataset:
    if len(blob) < _HEADER.size:
        raise FormatError(f"file too short for a dataset header ({len(blob)} bytes)")
    magic, version, K, d, n, name_len = _HEADER.unpack_from(blob, 0)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    if version != _VERSION:
        raise VersionError(f"unsupported dataset format version {version}")
    off = _HEADER.size
    expected = off + name_len + 4 * n * d + 2 * n
    if len(blob) != expected:
        raise FormatError(f"payload length {len(blob)} does not match header (expected {expected})")
    name = blob[off:off + name_len].decode("utf-8", errors="strict")
    off += name_len
    samples = np.frombuffer(blob, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    off += 4 * n * d
    labels = np.frombuffer(blob, dtype="<u2", count=n, offset=off).astype(np.int64)
    if labels.size and labels.max() >= K:
        raise FormatError(f"label {labels.max()} out of range for K={K}")
    if not np.all(np.isfinite(samples)):
        raise FormatError("samples contain non-finite values")
    try:
        return LabeledDataset(samples=samples.copy(), labels=labels, K=K, d=d, name=name)
    except DataError as exc:
        raise FormatError(str(exc)) from exc


def load(path) -> LabeledDataset:
    """Read a .lds file written by save()."""
    return from_bytes(Path(path).read_bytes())
