"""Dense numeric substrate: LU log-determinants, a small MLP with exact
gradients, optimizers, a central-difference gradient oracle and seeded RNGs.

Everything runs in float64. Random streams come from numpy's PCG64 bit
generator (``numpy.random.Generator(PCG64(seed))``), whose algorithm and
output are fixed and platform independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("identity", "tanh", "relu", "softmax")


class ShapeError(ValueError):
    """Raised when array shapes do not compose."""


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical seeds give identical streams."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive_seed(seed: int, *tags: int) -> int:
    """Deterministic child seed from a master seed and integer tags."""
    ss = np.random.SeedSequence([int(seed), *[int(t) for t in tags]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


# ---------------------------------------------------------------------------
# determinants


def slogdet(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sign and log|det| by LU factorization with partial pivoting.

    Accepts a single square matrix or a stack ``(..., d, d)``. Exactly
    singular inputs return ``sign == 0`` and ``logabs == -inf``.
    """
    a = np.array(m, dtype=np.float64, copy=True)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"slogdet needs square matrices, got shape {a.shape}")
    batch_shape = a.shape[:-2]
    d = a.shape[-1]
    a = a.reshape(-1, d, d)
    nb = a.shape[0]
    rows = np.arange(nb)
    sign = np.ones(nb)
    logabs = np.zeros(nb)
    for k in range(d):
        piv = k + np.argmax(np.abs(a[:, k:, k]), axis=1)
        swap = piv != k
        if swap.any():
            tmp = a[rows[swap], k, :].copy()
            a[rows[swap], k, :] = a[rows[swap], piv[swap], :]
            a[rows[swap], piv[swap], :] = tmp
            sign[swap] = -sign[swap]
        pivot = a[:, k, k]
        zero = pivot == 0.0
        sign[zero] = 0.0
        safe = np.where(zero, 1.0, pivot)
        sign *= np.sign(safe)
        with np.errstate(divide="ignore"):
            logabs += np.log(np.abs(safe))
        if k + 1 < d:
            factors = a[:, k + 1:, k] / safe[:, None]
            a[:, k + 1:, k:] -= factors[:, :, None] * a[:, k:k + 1, k:]
    logabs[sign == 0.0] = -np.inf
    return sign.reshape(batch_shape), logabs.reshape(batch_shape)


# ---------------------------------------------------------------------------
# MLP


@dataclass
class MlpParams:
    """Layer weights ``(out, in)``, biases ``(out,)`` and one activation tag per layer."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeError("weights, biases and activations must have equal length")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if act == "softmax" and i != len(self.weights) - 1:
                raise ValueError("softmax is only allowed on the output layer")
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"layer {i} input {w.shape[1]} != previous output "
                                 f"{self.weights[i - 1].shape[0]}")

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         list(self.activations))


def init_mlp(sizes: Sequence[int], activations: Sequence[str], rng: np.random.Generator,
             scale: float = 1.0) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    if len(activations) != len(sizes) - 1:
        raise ShapeError("need one activation per layer")
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = scale / math.sqrt(fan_in)
        ws.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return MlpParams(ws, bs, list(activations))


def _activate(a: np.ndarray, act: str) -> np.ndarray:
    if act == "identity":
        return a
    if act == "tanh":
        return np.tanh(a)
    if act == "relu":
        return np.maximum(a, 0.0)
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def mlp_forward(p: MlpParams, x: np.ndarray, return_cache: bool = False):
    """Forward pass for one vector ``(n_in,)`` or a batch ``(k, n_in)``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != p.n_in:
        raise ShapeError(f"input width {h.shape[1]} != {p.n_in}")
    outs = [h]
    for w, b, act in zip(p.weights, p.biases, p.activations):
        h = _activate(h @ w.T + b, act)
        outs.append(h)
    y = h[0] if single else h
    if return_cache:
        return y, outs
    return y


def mlp_backward(p: MlpParams, cache: list[np.ndarray], grad_out: np.ndarray,
                 logits_grad: bool = False) -> tuple[list[np.ndarray], np.ndarray]:
    """Backpropagate ``grad_out`` (same shape as the batch output).

    With ``logits_grad`` the incoming gradient is taken with respect to the
    pre-activation of the last layer (used for fused softmax cross-entropy).
    Returns gradients in ``p.arrays()`` order and the gradient on the input.
    """
    g = np.asarray(grad_out, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    grads: list[np.ndarray] = [None] * (2 * len(p.weights))  # type: ignore[list-item]
    for i in range(len(p.weights) - 1, -1, -1):
        act = p.activations[i]
        out = cache[i + 1]
        if i == len(p.weights) - 1 and logits_grad:
            da = g
        elif act == "identity":
            da = g
        elif act == "tanh":
            da = g * (1.0 - out * out)
        elif act == "relu":
            da = g * (out > 0.0)
        else:
            da = out * (g - np.sum(g * out, axis=1, keepdims=True))
        grads[2 * i] = da.T @ cache[i]
        grads[2 * i + 1] = da.sum(axis=0)
        g = da @ p.weights[i]
    return grads, g


def softmax_cross_entropy(p: MlpParams, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy of a softmax-output MLP.

    Returns ``(loss, param_grads, input_grad)`` where the input gradient is
    per-row and already carries the 1/k batch-mean factor.
    """
    if p.activations[-1] != "softmax":
        raise ValueError("softmax_cross_entropy needs a softmax output layer")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    probs, cache = mlp_forward(p, x, return_cache=True)
    k = x.shape[0]
    picked = np.clip(probs[np.arange(k), y], 1e-300, None)
    loss = float(-np.mean(np.log(picked)))
    g = probs.copy()
    g[np.arange(k), y] -= 1.0
    g /= k
    grads, gx = mlp_backward(p, cache, g, logits_grad=True)
    return loss, grads, gx


def mse_loss(p: MlpParams, x: np.ndarray, target: np.ndarray):
    """Mean over rows of the squared error summed over output coordinates."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    pred, cache = mlp_forward(p, x, return_cache=True)
    diff = pred - target
    k = x.shape[0]
    loss = float(np.sum(diff * diff) / k)
    grads, gx = mlp_backward(p, cache, 2.0 * diff / k)
    return loss, grads, gx


# ---------------------------------------------------------------------------
# parameter vectors and finite differences


def flatten(arrays: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays]) if arrays else np.zeros(0)


def unflatten(vec: np.ndarray, like: Sequence[np.ndarray]) -> list[np.ndarray]:
    out, pos = [], 0
    for a in like:
        out.append(np.asarray(vec[pos:pos + a.size], dtype=np.float64).reshape(a.shape))
        pos += a.size
    if pos != len(vec):
        raise ShapeError("vector length does not match template arrays")
    return out


def grad_oracle(f: Callable[[np.ndarray], float], theta: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient ``(f(t + s e_i) - f(t - s e_i)) / 2s``."""
    if step <= 0:
        raise ValueError("step must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    probe = theta.copy()
    for i in range(theta.size):
        orig = probe.flat[i]
        probe.flat[i] = orig + step
        fp = f(probe)
        probe.flat[i] = orig - step
        fm = f(probe)
        probe.flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite objective at coordinate {i}")
        grad.flat[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max-norm relative error ``|a - n|_inf / max(|n|_inf, floor)``."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    return float(np.max(np.abs(a - n), initial=0.0) / max(np.max(np.abs(n), initial=0.0), floor))


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class Sgd:
    lr: float

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        for p, g in zip(params, grads):
            p -= self.lr * g


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return Sgd(lr)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r}")
