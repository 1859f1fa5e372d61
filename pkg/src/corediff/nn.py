"""Minimal fully-connected network with hand-written reverse-mode gradients.

Float64, single-threaded, deterministic given the init RNG. Hidden layers are
rectified-linear; the output layer is linear.
"""

from __future__ import annotations

import numpy as np


class Mlp:
    """Feed-forward net over explicit (W, b) pairs.

    widths = (in, h1, ..., out). He-scaled normal init for weights, zero
    biases. params[i] = [W_i, b_i] with W_i of shape (fan_in, fan_out).
    """

    def __init__(self, widths, rng: np.random.Generator):
        self.widths = tuple(int(w) for w in widths)
        if len(self.widths) < 2:
            raise ValueError("need at least input and output widths")
        self.params = []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
            b = np.zeros(fan_out)
            self.params.append([w, b])

    def forward(self, x: np.ndarray):
        """x: (B, in) -> (out (B, last), cache for backward)."""
        hs = [x]                      # layer inputs (post-activation)
        zs = []                       # hidden pre-activations
        h = x
        last = len(self.params) - 1
        for i, (w, b) in enumerate(self.params):
            z = h @ w + b
            if i < last:
                zs.append(z)
                h = np.maximum(z, 0.0)
                hs.append(h)
            else:
                h = z
        return h, (hs, zs)

    def backward(self, cache, grad_out: np.ndarray):
        """Exact gradients of sum(grad_out * output) w.r.t. params and input.

        Returns (grads, grad_input) with grads shaped like self.params.
        """
        hs, zs = cache
        grads = [[None, None] for _ in self.params]
        g = grad_out
        for i in range(len(self.params) - 1, -1, -1):
            w, _ = self.params[i]
            grads[i][0] = hs[i].T @ g
            grads[i][1] = g.sum(axis=0)
            g = g @ w.T
            if i > 0:
                g = g * (zs[i - 1] > 0)
        return grads, g

    def sgd_step(self, grads, lr: float) -> None:
        for (w, b), (gw, gb) in zip(self.params, grads):
            w -= lr * gw
            b -= lr * gb

    def param_vector(self) -> np.ndarray:
        return np.concatenate([p.ravel() for pair in self.params for p in pair])

    def set_param_vector(self, vec: np.ndarray) -> None:
        off = 0
        for pair in self.params:
            for j, p in enumerate(pair):
                pair[j][...] = vec[off:off + p.size].reshape(p.shape)
                off += p.size
        if off != vec.size:
            raise ValueError(f"parameter vector length {vec.size}, expected {off}")

    def copy(self) -> "Mlp":
        dup = Mlp.__new__(Mlp)
        dup.widths = self.widths
        dup.params = [[w.copy(), b.copy()] for w, b in self.params]
        return dup


def zero_grads_like(mlp: Mlp):
    return [[np.zeros_like(w), np.zeros_like(b)] for w, b in mlp.params]


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. logits, (B, K) and (B,)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    probs = expd / expd.sum(axis=1, keepdims=True)
    b = labels.shape[0]
    nll = -np.log(probs[np.arange(b), labels] + 1e-300)
    grad = probs.copy()
    grad[np.arange(b), labels] -= 1.0
    return float(nll.mean()), grad / b
