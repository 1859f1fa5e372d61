"""Surrogate encoders producing the latent vectors that pruning and metrics use.

Three desk-scale encoders: the identity map, the penultimate layer of a small
softmax classifier, and a PCA projection. All are immutable once built and
embed samples one by one (order-preserving, per-sample).

Checkpoint format (``.enc``, little-endian):

    magic b"ENC1" | version u16 | kind u8 | d u32 | e u32 | kind-specific payload
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import LabeledDataset
from .errors import ConfigError, FormatError, InsufficientData, ShapeError, VersionError
from .nn import Mlp, softmax_cross_entropy

_MAGIC = b"ENC1"
_VERSION = 1
_KIND_IDENTITY, _KIND_CLASSIFIER, _KIND_PCA = 0, 1, 2

CLASSIFIER_LR = 0.05  # fixed plain-SGD rate for the surrogate classifier


@dataclass(frozen=True)
class EmbeddingSet:
    """Latent vectors aligned with the dataset that produced them."""

    vectors: np.ndarray
    source_encoder: str

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        object.__setattr__(self, "vectors", vectors)
        if vectors.ndim != 2 or vectors.shape[1] < 1:
            raise ShapeError(f"embeddings must be (n, e) with e >= 1, got {vectors.shape}")
        if not np.all(np.isfinite(vectors)):
            raise ShapeError("embeddings contain non-finite values")

    @property
    def e(self) -> int:
        return self.vectors.shape[1]

    @property
    def sample_count(self) -> int:
        return self.vectors.shape[0]


def _digest(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()[:8]


class IdentityEncoder:
    """z = x; isolates scoring behavior from encoder behavior."""

    kind = "identity"

    def __init__(self, d: int):
        self.d = int(d)
        self.e = self.d

    @property
    def encoder_id(self) -> str:
        return "identity"

    def transform(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64)


class ClassifierEncoder:
    """Penultimate-layer (pre-logits) features of a trained softmax classifier."""

    kind = "classifier"

    def __init__(self, mlp: Mlp, K: int, epochs: int, train_accuracy: float):
        self.mlp = mlp
        self.K = int(K)
        self.epochs = int(epochs)
        self.train_accuracy = float(train_accuracy)
        self.d = mlp.widths[0]
        # With no hidden layers the embedding falls back to the input itself.
        self.e = mlp.widths[-2] if len(mlp.widths) > 2 else mlp.widths[0]

    @property
    def encoder_id(self) -> str:
        return f"classifier-{_digest(self.mlp.param_vector())}"

    def logits(self, x: np.ndarray) -> np.ndarray:
        out, _ = self.mlp.forward(np.asarray(x, dtype=np.float64))
        return out

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if len(self.mlp.widths) == 2:
            return x
        _, (hs, _) = self.mlp.forward(x)
        return hs[-1]


class PcaEncoder:
    """Mean-centered projection onto the top principal components."""

    kind = "pca"

    def __init__(self, mean: np.ndarray, components: np.ndarray, explained_variance: np.ndarray):
        self.mean_ = np.asarray(mean, dtype=np.float64)
        self.components_ = np.asarray(components, dtype=np.float64)
        self.explained_variance_ = np.asarray(explained_variance, dtype=np.float64)
        self.d = self.mean_.shape[0]
        self.e = self.components_.shape[0]

    @property
    def encoder_id(self) -> str:
        return f"pca{self.e}-{_digest(self.components_)}"

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean_) @ self.components_.T

    def reconstruct(self, z: np.ndarray) -> np.ndarray:
        return z @ self.components_ + self.mean_


def train_classifier(
    ds: LabeledDataset,
    hidden_widths,
    epochs: int,
    seed: int,
    batch_size: int = 32,
) -> ClassifierEncoder:
    """Train the surrogate classifier with cross-entropy and plain SGD.

    Minibatch order is drawn from a generator seeded with ``seed``, so equal
    seeds give bit-identical parameters.

    Raises:
        ConfigError: epochs < 1.
        InsufficientData: Fewer than 2 classes present in the data.
    """
    if epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {epochs}")
    present = np.unique(ds.labels)
    if present.size < 2:
        raise InsufficientData("classifier training needs at least 2 classes present")
    rng = np.random.default_rng(seed)
    widths = (ds.d, *[int(w) for w in hidden_widths], ds.K)
    mlp = Mlp(widths, rng)
    x_all = ds.samples.astype(np.float64)
    y_all = ds.labels
    for _ in range(epochs):
        perm = rng.permutation(ds.n)
        for start in range(0, ds.n, batch_size):
            idx = perm[start:start + batch_size]
            logits, cache = mlp.forward(x_all[idx])
            _, grad_logits = softmax_cross_entropy(logits, y_all[idx])
            grads, _ = mlp.backward(cache, grad_logits)
            mlp.sgd_step(grads, CLASSIFIER_LR)
    final_logits, _ = mlp.forward(x_all)
    accuracy = float(np.mean(final_logits.argmax(axis=1) == y_all))
    return ClassifierEncoder(mlp, K=ds.K, epochs=epochs, train_accuracy=accuracy)


def pca_encoder(ds: LabeledDataset, components: int) -> PcaEncoder:
    """Fit a PCA projection to the dataset samples.

    Explained variances come from the singular values of the centered data
    and are non-increasing by construction.

    Raises:
        ConfigError: components outside [1, d].
    """
    if not 1 <= components <= ds.d:
        raise ConfigError(f"components must be in [1, {ds.d}], got {components}")
    x = ds.samples.astype(np.float64)
    mean = x.mean(axis=0)
    centered = x - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:components]
    # Deterministic sign: make the largest-magnitude entry of each row positive.
    for row in comps:
        j = np.argmax(np.abs(row))
        if row[j] < 0:
            row *= -1.0
    explained = (svals[:components] ** 2) / (ds.n - 1)
    return PcaEncoder(mean=mean, components=comps, explained_variance=explained)


def embed(encoder, ds: LabeledDataset) -> EmbeddingSet:
    """Embed every sample, order-aligned with the dataset.

    Raises:
        ShapeError: Encoder input dimension does not match ds.d.
    """
    if encoder.d != ds.d:
        raise ShapeError(f"encoder expects d={encoder.d}, dataset has d={ds.d}")
    vectors = encoder.transform(ds.samples.astype(np.float64))
    return EmbeddingSet(vectors=vectors, source_encoder=encoder.encoder_id)


def _pack_f64(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_encoder(encoder, path) -> None:
    """Serialize any of the three encoder kinds to an .enc file."""
    head = struct.Struct("<4sHBII")
    if isinstance(encoder, IdentityEncoder):
        blob = head.pack(_MAGIC, _VERSION, _KIND_IDENTITY, encoder.d, encoder.e)
    elif isinstance(encoder, ClassifierEncoder):
        widths = encoder.mlp.widths
        blob = head.pack(_MAGIC, _VERSION, _KIND_CLASSIFIER, encoder.d, encoder.e)
        blob += struct.pack("<HHIdB", encoder.K, len(widths), encoder.epochs,
                            encoder.train_accuracy, len(widths))
        blob += struct.pack(f"<{len(widths)}I", *widths)
        blob += _pack_f64(encoder.mlp.param_vector())
    elif isinstance(encoder, PcaEncoder):
        blob = head.pack(_MAGIC, _VERSION, _KIND_PCA, encoder.d, encoder.e)
        blob += _pack_f64(encoder.mean_)
        blob += _pack_f64(encoder.components_)
        blob += _pack_f64(encoder.explained_variance_)
    else:
        raise ConfigError(f"cannot serialize encoder of type {type(encoder).__name__}")
    Path(path).write_bytes(blob)


def load_encoder(path):
    """Load an .enc file written by save_encoder()."""
    blob = Path(path).read_bytes()
    head = struct.Struct("<4sHBII")
    if len(blob) < head.size:
        raise FormatError("file too short for an encoder header")
    magic, version, kind, d, e = head.unpack_from(blob, 0)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    if version != _VERSION:
        raise VersionError(f"unsupported encoder format version {version}")
    off = head.size
    try:
        if kind == _KIND_IDENTITY:
            if len(blob) != off:
                raise FormatError("trailing bytes after identity encoder header")
            return IdentityEncoder(d)
        if kind == _KIND_CLASSIFIER:
            meta = struct.Struct("<HHIdB")
            K, n_widths, epochs, accuracy, n_widths2 = meta.unpack_from(blob, off)
            off += meta.size
            if n_widths != n_widths2:
                raise FormatError("inconsistent classifier width count")
            widths = struct.unpack_from(f"<{n_widths}I", blob, off)
            off += 4 * n_widths
            mlp = Mlp.__new__(Mlp)
            mlp.widths = widths
            mlp.params = [
                [np.zeros((a, b)), np.zeros(b)] for a, b in zip(widths[:-1], widths[1:])
            ]
            n_params = sum(w.size + b.size for w, b in mlp.params)
            vec = np.frombuffer(blob, dtype="<f8", count=n_params, offset=off)
            off += 8 * n_params
            if len(blob) != off:
                raise FormatError("classifier encoder payload length mismatch")
            mlp.set_param_vector(vec.astype(np.float64))
            return ClassifierEncoder(mlp, K=K, epochs=epochs, train_accuracy=accuracy)
        if kind == _KIND_PCA:
            need = off + 8 * (d + e * d + e)
            if len(blob) != need:
                raise FormatError("pca encoder payload length mismatch")
            mean = np.frombuffer(blob, dtype="<f8", count=d, offset=off)
            off += 8 * d
            comps = np.frombuffer(blob, dtype="<f8", count=e * d, offset=off).reshape(e, d)
            off += 8 * e * d
            explained = np.frombuffer(blob, dtype="<f8", count=e, offset=off)
            return PcaEncoder(mean.copy(), comps.copy(), explained.copy())
    except struct.error as exc:
        raise FormatError(f"truncated encoder file: {exc}") from exc
    raise FormatError(f"unknown encoder kind {kind}")
