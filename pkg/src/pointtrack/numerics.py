"""Differentiable numerical kernels with explicit backward passes.

Every op comes in up to three flavours:

* ``op(...)`` returns the forward value,
* ``op_forward(...)`` returns ``(value, cache)``,
* ``op_backward(cache, upstream)`` returns gradients w.r.t. inputs and
  parameters.

Arrays are plain ``numpy.ndarray``; ops follow the dtype of their inputs, so
float64 is used for gradient checks and float32 for training.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np
from scipy.special import expit

from .errors import NumericError, ShapeError

# --------------------------------------------------------------------------
# bookkeeping

_mac_counters: list = []


@contextlib.contextmanager
def count_macs() -> Iterator[dict]:
    """Tally multiply-accumulates issued by instrumented ops inside the block.

    Yields a dict whose ``"count"`` entry holds the running total.  Only
    forward passes are instrumented.  Blocks may nest.
    """
    counter = {"count": 0}
    _mac_counters.append(counter)
    try:
        yield counter
    finally:
        _mac_counters.remove(counter)


def add_macs(n: int) -> None:
    for counter in _mac_counters:
        counter["count"] += int(n)


def check_finite(x: np.ndarray, what: str = "value") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite entries in {what}")
    return x


# --------------------------------------------------------------------------
# initialisation

def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_linear(rng, in_dim: int, out_dim: int, dtype=np.float32):
    """Weight (out, in) and bias (out,), both uniform in +-1/sqrt(in)."""
    w = uniform_init(rng, (out_dim, in_dim), in_dim, dtype)
    b = uniform_init(rng, (out_dim,), in_dim, dtype)
    return w, b


# --------------------------------------------------------------------------
# linear

def linear(weight: np.ndarray, bias: np.ndarray | None, x: np.ndarray) -> np.ndarray:
    """y = W x + b applied over the last axis of ``x``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    add_macs(x.size // weight.shape[1] * weight.size)
    y = x @ weight.T
    if bias is not None:
        y = y + bias
    return y


def linear_backward(weight: np.ndarray, x: np.ndarray, dy: np.ndarray):
    """Return ``(dx, dW, db)`` for ``y = linear(weight, bias, x)``."""
    x2 = x.reshape(-1, weight.shape[1])
    dy2 = dy.reshape(-1, weight.shape[0])
    dW = dy2.T @ x2
    db = dy2.sum(axis=0)
    dx = (dy2 @ weight).reshape(x.shape)
    return dx, dW, db


# --------------------------------------------------------------------------
# pointwise

def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, dy):
    return dy * (x > 0)


def sigmoid(x):
    return expit(x)


def bce_with_logits(logits, labels):
    """Elementwise binary cross-entropy on raw logits (stable form)."""
    logits = np.asarray(logits)
    return np.maximum(logits, 0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))


def bce_with_logits_backward(logits, labels, dy):
    return dy * (sigmoid(logits) - labels)


# --------------------------------------------------------------------------
# softmax

def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax along ``axis``."""
    x = np.asarray(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(y: np.ndarray, dy: np.ndarray, axis: int = -1) -> np.ndarray:
    """Gradient through softmax given its output ``y``."""
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


# --------------------------------------------------------------------------
# layer norm

def layer_norm_forward(x, gamma, beta, eps: float = 1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layer_norm_backward(cache, dy):
    xhat, inv, gamma = cache
    lead = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=lead)
    dbeta = dy.sum(axis=lead)
    g = dy * gamma
    n = xhat.shape[-1]
    dx = inv / n * (n * g - g.sum(-1, keepdims=True) - xhat * (g * xhat).sum(-1, keepdims=True))
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------
# MLP

@dataclass
class MlpParams:
    """Stack of linear layers with ReLU in between and none at the output."""

    weights: list
    biases: list

    def __post_init__(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise ShapeError("mlp needs at least one layer and one bias per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or 0 in w.shape:
                raise ShapeError(f"mlp layer {i} has degenerate weight shape {w.shape}")
            if b.shape != (w.shape[0],):
                raise ShapeError(f"mlp layer {i} bias {b.shape} vs weight {w.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"mlp layer {i} input {w.shape[1]} does not chain "
                                 f"from {self.weights[i - 1].shape[0]}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @classmethod
    def init(cls, rng, sizes, dtype=np.float32, zero_last: bool = False):
        if len(sizes) < 2 or min(sizes) <= 0:
            raise ShapeError(f"mlp sizes must be positive, got {sizes}")
        ws, bs = [], []
        for a, b in zip(sizes[:-1], sizes[1:]):
            w, bias = init_linear(rng, a, b, dtype)
            ws.append(w)
            bs.append(bias)
        if zero_last:
            ws[-1][...] = 0
            bs[-1][...] = 0
        return cls(ws, bs)

    def to_flat(self, prefix: str) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.{i}.W"] = w
            out[f"{prefix}.{i}.b"] = b
        return out

    @classmethod
    def from_flat(cls, params: dict, prefix: str):
        ws, bs = [], []
        i = 0
        while f"{prefix}.{i}.W" in params:
            ws.append(params[f"{prefix}.{i}.W"])
            bs.append(params[f"{prefix}.{i}.b"])
            i += 1
        return cls(ws, bs)


def mlp_forward(params: MlpParams, x: np.ndarray):
    if x.shape[-1] != params.in_dim:
        raise ShapeError(f"mlp: input dim {x.shape[-1]} != {params.in_dim}")
    inputs, pre = [], []
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = linear(w, b, h)
        pre.append(z)
        h = relu(z) if i < last else z
    return h, (inputs, pre)


def mlp(params: MlpParams, x: np.ndarray) -> np.ndarray:
    return mlp_forward(params, x)[0]


def mlp_backward(params: MlpParams, cache, dy):
    """Return ``(dx, grads)`` where ``grads`` is an :class:`MlpParams`."""
    inputs, pre = cache
    n = len(params.weights)
    dws, dbs = [None] * n, [None] * n
    g = dy
    for i in reversed(range(n)):
        if i < n - 1:
            g = relu_backward(pre[i], g)
        g, dws[i], dbs[i] = linear_backward(params.weights[i], inputs[i], g)
    return g, MlpParams(dws, dbs)


# --------------------------------------------------------------------------
# gradient checking

def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5,
                       indices=None) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x`` (``x`` is restored).

    ``indices`` restricts the probe to a subset of flat positions; the other
    entries of the result are left at zero.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    probe = range(flat.size) if indices is None else indices
    for i in probe:
        old = flat[i]
        flat[i] = old + eps
        fp = f(x)
        flat[i] = old - eps
        fm = f(x)
        flat[i] = old
        grad.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(a, b, floor: float = 1e-10) -> float:
    """||a - b|| / max(||a||, ||b||), guarded against all-zero gradients."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
