"""The power mechanism.

Two privatizer families are provided:

``linear-power``
    A network ``P_N`` maps ``x`` to a ``d x d`` matrix ``H = reshape(P_N(x)) + I``
    which is applied ``p`` times: ``z = H^p x``. Each power step is a layer with
    Jacobian ``H`` (``H`` is computed once from the input and reused), so the
    summed log-determinant is ``p log|det H(x)|`` and its x-gradient flows
    through ``P_N``.

``two-layer-tanh``
    ``z = tanh(W2 W1 x + b2)``. The linear layer has constant Jacobian, the
    nonlinear one contributes ``sum_i log(1 - tanh(a_i)^2)`` whose x-gradient
    is ``W1^T W2^T xi`` with ``xi = -2 tanh(a)``.

The privacy loss is ``|| grad log f_X(x) - grad_x sum_k log|det J_k| ||_2``.
Parameter gradients of that loss are second order (they differentiate an
x-gradient); :func:`backward` implements the reverse pass by hand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import blob
from .density import DensityModel, kde_score
from .numkit import MlpParams, init_mlp, slogdet

VARIANTS = ("linear-power", "two-layer-tanh")
SINGULAR_DET = 1e-8


class Unprivatizable(ValueError):
    """The sample's H stays singular after the jitter retry."""


@dataclass
class PrivatizerParams:
    variant: str
    d: int
    p: int = 1
    jitter: float = 1e-4
    net: MlpParams | None = None
    W1: np.ndarray | None = None
    W2: np.ndarray | None = None
    b2: np.ndarray | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown privatizer variant {self.variant!r}")
        if int(self.p) < 1:
            raise ValueError("power p must be >= 1")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")
        if self.variant == "linear-power":
            if self.net is None or self.net.n_in != self.d or self.net.n_out != self.d * self.d:
                raise ValueError("linear-power needs a net mapping d -> d*d")
            if any(a not in ("tanh", "identity") for a in self.net.activations):
                raise ValueError("linear-power net supports tanh/identity layers only")
        else:
            if self.W1 is None or self.W2 is None or self.b2 is None:
                raise ValueError("two-layer-tanh needs W1, W2 and b2")
            if self.W1.shape[1] != self.d or self.W2.shape != (self.d, self.W1.shape[0]) \
                    or self.b2.shape != (self.d,):
                raise ValueError("two-layer-tanh needs W1 (h_w x d), W2 (d x h_w), b2 (d,)")

    def arrays(self) -> list[np.ndarray]:
        """Trainable arrays (mutated in place by optimizers)."""
        if self.variant == "linear-power":
            return self.net.arrays()
        return [self.W1, self.W2, self.b2]

    def copy(self) -> "PrivatizerParams":
        if self.variant == "linear-power":
            return PrivatizerParams(self.variant, self.d, self.p, self.jitter, net=self.net.copy())
        return PrivatizerParams(self.variant, self.d, self.p, self.jitter,
                                W1=self.W1.copy(), W2=self.W2.copy(), b2=self.b2.copy())

    def with_arrays(self, arrays) -> "PrivatizerParams":
        new = self.copy()
        for dst, src in zip(new.arrays(), arrays):
            dst[...] = src
        return new


# ---------------------------------------------------------------------------
# constructors


def linear_power(d: int, rng: np.random.Generator, p: int = 1, hidden: list[int] | None = None,
                 jitter: float = 1e-4, out_scale: float | None = None) -> PrivatizerParams:
    """``d -> 2d (tanh) -> d^2`` network with near-identity start.

    The output layer is additionally scaled by ``out_scale`` (default ``1/d``)
    so that ``H - I`` stays small in high dimension.
    """
    hidden = [2 * d] if hidden is None else list(hidden)
    sizes = [d, *hidden, d * d]
    net = init_mlp(sizes, ["tanh"] * len(hidden) + ["identity"], rng)
    net.weights[-1] *= (1.0 / d) if out_scale is None else out_scale
    return PrivatizerParams("linear-power", d, p, jitter, net=net)


def constant(H: np.ndarray, p: int = 1, jitter: float = 1e-4) -> PrivatizerParams:
    """Linear-power privatizer whose ``H`` does not depend on ``x``."""
    H = np.asarray(H, dtype=np.float64)
    d = H.shape[0]
    net = MlpParams([np.zeros((d, d)), np.zeros((d * d, d))],
                    [np.zeros(d), (H - np.eye(d)).reshape(-1)], ["tanh", "identity"])
    return PrivatizerParams("linear-power", d, p, jitter, net=net)


def identity(d: int) -> PrivatizerParams:
    return constant(np.eye(d), 1)


def two_layer_tanh(d: int, h_w: int, rng: np.random.Generator) -> PrivatizerParams:
    W1 = rng.uniform(-1, 1, size=(h_w, d)) / math.sqrt(d)
    W2 = rng.uniform(-1, 1, size=(d, h_w)) / math.sqrt(h_w)
    return PrivatizerParams("two-layer-tanh", d, 1, 0.0, W1=W1, W2=W2, b2=np.zeros(d))


def project_weights(params: PrivatizerParams) -> None:
    """Enforce ``|W1|_2 <= sqrt(h_w)`` and ``|W2|_F <= sqrt(m)`` in place (two-layer-tanh)."""
    if params.variant != "two-layer-tanh":
        return
    h_w = params.W1.shape[0]
    m = params.W2.shape[0]
    s = np.linalg.norm(params.W1, 2)
    if s > math.sqrt(h_w):
        params.W1 *= math.sqrt(h_w) / s
    f = np.linalg.norm(params.W2)
    if f > math.sqrt(m):
        params.W2 *= math.sqrt(m) / f


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class Forward:
    """Batch forward state; rows with ``ok == False`` carry NaNs."""

    x: np.ndarray
    z: np.ndarray
    logdet_sum: np.ndarray
    logdet_grad_x: np.ndarray
    ok: np.ndarray
    sign: np.ndarray
    jittered: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)


def _as_batch(x, d):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != d:
        raise ValueError(f"input dimension {x.shape[1]} != privatizer dimension {d}")
    return x, single


def _forward_linear_power(params: PrivatizerParams, x: np.ndarray) -> Forward:
    k, d, p = x.shape[0], params.d, int(params.p)
    net = params.net
    hs = [x]
    h = x
    for w, b, act in zip(net.weights, net.biases, net.activations):
        a = h @ w.T + b
        h = np.tanh(a) if act == "tanh" else a
        hs.append(h)
    H = hs[-1].reshape(k, d, d) + np.eye(d)
    sign, logabs = slogdet(H)
    jittered = logabs < math.log(SINGULAR_DET)
    if jittered.any() and params.jitter > 0:
        H[jittered] += params.jitter * np.eye(d)
        sign[jittered], logabs[jittered] = slogdet(H[jittered])
    ok = logabs >= math.log(SINGULAR_DET)
    M = np.full_like(H, np.nan)
    if ok.any():
        M[ok] = np.linalg.inv(H[ok])
    # g = p vec(H^{-T}) is the gradient of p log|det H| with respect to vec(H)
    g = p * np.swapaxes(M, 1, 2).reshape(k, d * d)
    # VJP of g through the net gives q = grad_x of the summed log-determinant
    deltas = [None] * (len(net.weights) + 1)
    gammas = [None] * (len(net.weights) + 1)
    delta = g
    for li in range(len(net.weights), 0, -1):
        deltas[li] = delta
        act = net.activations[li - 1]
        gamma = delta * (1.0 - hs[li] ** 2) if act == "tanh" else delta
        gammas[li] = gamma
        delta = gamma @ net.weights[li - 1]
    q = delta
    zs = [x]
    zc = x
    for _ in range(p):
        zc = np.einsum("kij,kj->ki", H, zc)
        zs.append(zc)
    bad = ~ok
    z = zs[-1].copy()
    z[bad] = np.nan
    q = q.copy()
    q[bad] = np.nan
    logdet = p * logabs
    logdet[bad] = np.nan
    cache = {"hs": hs, "H": H, "M": M, "deltas": deltas, "gammas": gammas, "zs": zs}
    return Forward(x, z, logdet, q, ok, sign, jittered, cache)


def _forward_two_layer(params: PrivatizerParams, x: np.ndarray) -> Forward:
    y1 = x @ params.W1.T
    a = y1 @ params.W2.T + params.b2
    t = np.tanh(a)
    xi = -2.0 * t
    q = (xi @ params.W2) @ params.W1
    W = params.W2 @ params.W1
    sign_w, logabs_w = slogdet(W)
    # log(1 - tanh(a)^2) = log sech(a)^2, written so it stays finite where tanh rounds to +-1
    aa = np.abs(a)
    logdet = np.sum(2.0 * (math.log(2.0) - aa - np.log1p(np.exp(-2.0 * aa))), axis=1) + logabs_w
    k = x.shape[0]
    ok = np.full(k, bool(sign_w != 0))
    sign = np.full(k, float(sign_w))
    cache = {"y1": y1, "t": t, "xi": xi}
    return Forward(x, t, logdet, q, ok, sign, np.zeros(k, bool), cache)


def forward(params: PrivatizerParams, x) -> Forward:
    x, _ = _as_batch(x, params.d)
    if params.variant == "linear-power":
        return _forward_linear_power(params, x)
    return _forward_two_layer(params, x)


def backward(params: PrivatizerParams, fw: Forward, q_bar=None, z_bar=None) -> list[np.ndarray]:
    """Gradients of ``sum_rows(<q_bar, q> + <z_bar, z>)`` with respect to ``params.arrays()``.

    Rows that are not ``ok`` must carry zero upstream gradient.
    """
    k, d = fw.x.shape
    q_bar = np.zeros((k, d)) if q_bar is None else np.where(fw.ok[:, None], q_bar, 0.0)
    z_bar = np.zeros((k, d)) if z_bar is None else np.where(fw.ok[:, None], z_bar, 0.0)
    if params.variant == "linear-power":
        return _backward_linear_power(params, fw, q_bar, z_bar)
    return _backward_two_layer(params, fw, q_bar, z_bar)


def _backward_linear_power(params, fw, q_bar, z_bar):
    net = params.net
    c = fw.cache
    hs, H, deltas, gammas, zs = c["hs"], c["H"], c["deltas"], c["gammas"], c["zs"]
    ok = fw.ok
    M = np.where(ok[:, None, None], c["M"], 0.0)
    k, d, p = fw.x.shape[0], params.d, int(params.p)
    L = len(net.weights)
    gW = [np.zeros_like(w) for w in net.weights]
    gb = [np.zeros_like(b) for b in net.biases]
    a_bar = [None] + [np.zeros_like(hs[li]) for li in range(1, L + 1)]
    # reverse through the VJP pass (from q back up to g)
    delta_bar = q_bar
    for li in range(1, L + 1):
        w = net.weights[li - 1]
        gamma = gammas[li]
        gW[li - 1] += gamma.T @ delta_bar
        gamma_bar = delta_bar @ w.T
        if net.activations[li - 1] == "tanh":
            t = hs[li]
            dphi = 1.0 - t * t
            a_bar[li] += gamma_bar * deltas[li] * (-2.0 * t * dphi)
            delta_bar = gamma_bar * dphi
        else:
            delta_bar = gamma_bar
    g_bar = delta_bar.reshape(k, d, d)
    # g = p vec(M^T), M = H^{-1}  =>  H_bar = -p M^T G_bar^T M^T
    Mt = np.swapaxes(M, 1, 2)
    H_bar = -p * Mt @ np.swapaxes(g_bar, 1, 2) @ Mt
    # z = H^p x
    zb = z_bar
    for step in range(p, 0, -1):
        H_bar += zb[:, :, None] * zs[step - 1][:, None, :]
        zb = np.einsum("kij,ki->kj", H, zb)
    a_bar[L] += H_bar.reshape(k, d * d)
    # reverse through the forward pass of P_N
    for li in range(L, 0, -1):
        ab = a_bar[li]
        gW[li - 1] += ab.T @ hs[li - 1]
        gb[li - 1] += ab.sum(axis=0)
        if li > 1:
            hb = ab @ net.weights[li - 1]
            if net.activations[li - 2] == "tanh":
                hb = hb * (1.0 - hs[li - 1] ** 2)
            a_bar[li - 1] += hb
    out = []
    for w, b in zip(gW, gb):
        out += [w, b]
    return out


def _backward_two_layer(params, fw, q_bar, z_bar):
    c = fw.cache
    y1, t, xi = c["y1"], c["t"], c["xi"]
    u = xi @ params.W2
    gW1 = u.T @ q_bar
    u_bar = q_bar @ params.W1.T
    gW2 = xi.T @ u_bar
    xi_bar = u_bar @ params.W2.T
    t_bar = -2.0 * xi_bar + z_bar
    a_bar = t_bar * (1.0 - t * t)
    gW2 += a_bar.T @ y1
    gb2 = a_bar.sum(axis=0)
    gW1 += (a_bar @ params.W2).T @ fw.x
    return [gW1, gW2, gb2]


# ---------------------------------------------------------------------------
# public per-sample operations


@dataclass
class PrivatizedSample:
    """Embedding plus log-determinant terms; fields are batched when the input was."""

    x: np.ndarray
    z: np.ndarray
    logdet_sum: np.ndarray | float
    logdet_grad_x: np.ndarray
    ok: np.ndarray | bool
    sign: np.ndarray | float


def privatize(params: PrivatizerParams, x) -> PrivatizedSample:
    xb, single = _as_batch(x, params.d)
    fw = forward(params, xb)
    if single:
        return PrivatizedSample(xb[0], fw.z[0], float(fw.logdet_sum[0]), fw.logdet_grad_x[0],
                                bool(fw.ok[0]), float(fw.sign[0]))
    return PrivatizedSample(xb, fw.z, fw.logdet_sum, fw.logdet_grad_x, fw.ok, fw.sign)


def embed(params: PrivatizerParams, X, chunk: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Embeddings and ok-mask for a large matrix, evaluated in chunks."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if chunk is None:
        chunk = max(1, 2_000_000 // (X.shape[1] ** 2))
    Z = np.empty_like(X)
    ok = np.empty(X.shape[0], dtype=bool)
    for s in range(0, X.shape[0], chunk):
        fw = forward(params, X[s:s + chunk])
        Z[s:s + chunk] = fw.z
        ok[s:s + chunk] = fw.ok
    return Z, ok


def logdet_grad_x(params: PrivatizerParams, x) -> np.ndarray:
    """Exact x-gradient of the summed Jacobian log-determinants."""
    xb, single = _as_batch(x, params.d)
    fw = forward(params, xb)
    if single and not fw.ok[0]:
        raise Unprivatizable("H is singular beyond the jitter budget")
    return fw.logdet_grad_x[0] if single else fw.logdet_grad_x


def privacy_loss_from_scores(params: PrivatizerParams, x, scores) -> np.ndarray:
    fw = forward(params, x)
    return np.linalg.norm(np.atleast_2d(scores) - fw.logdet_grad_x, axis=1)


def privacy_loss(params: PrivatizerParams, density: DensityModel, x):
    """``|| kde_score(x) - logdet_grad_x(x) ||_2``."""
    xb, single = _as_batch(x, params.d)
    fw = forward(params, xb)
    if single and not fw.ok[0]:
        raise Unprivatizable("H is singular beyond the jitter budget")
    lp = np.linalg.norm(kde_score(density, xb) - fw.logdet_grad_x, axis=1)
    return float(lp[0]) if single else lp


def composed_logdet_grad_fd(params: PrivatizerParams, x, step: float = 1e-5) -> np.ndarray:
    """Debug mode (small d): x-gradient of log|det dG/dx| of the full map, by finite differences."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    if d > 4:
        raise ValueError("full-composition Jacobian debug mode is limited to d <= 4")

    def G(v):
        return forward(params, v[None, :]).z[0]

    def logdet_jac(v):
        J = np.empty((d, d))
        for j in range(d):
            e = np.zeros(d)
            e[j] = step
            J[:, j] = (G(v + e) - G(v - e)) / (2 * step)
        return float(slogdet(J)[1])

    out = np.empty(d)
    outer = 1e3 * step
    for j in range(d):
        e = np.zeros(d)
        e[j] = outer
        out[j] = (logdet_jac(x + e) - logdet_jac(x - e)) / (2 * outer)
    return out


# ---------------------------------------------------------------------------
# serialization


def to_bytes(params: PrivatizerParams, meta: dict | None = None) -> bytes:
    info = {"variant": params.variant, "d": params.d, "p": int(params.p), "jitter": params.jitter}
    info.update(meta or {})
    if params.variant == "linear-power":
        arrays = {f"a{i}": a for i, a in enumerate(params.net.arrays())}
        info["activations"] = list(params.net.activations)
    else:
        arrays = {"W1": params.W1, "W2": params.W2, "b2": params.b2}
    return blob.pack("privatizer", arrays, info)


def from_bytes(data: bytes) -> tuple[PrivatizerParams, dict]:
    header, arrays = blob.unpack(data, "privatizer")
    meta = header["meta"]
    if meta["variant"] == "linear-power":
        flat = [arrays[f"a{i}"] for i in range(len(arrays))]
        net = MlpParams(flat[0::2], flat[1::2], list(meta["activations"]))
        params = PrivatizerParams("linear-power", meta["d"], meta["p"], meta["jitter"], net=net)
    else:
        params = PrivatizerParams("two-layer-tanh", meta["d"], meta["p"], meta["jitter"],
                                  W1=arrays["W1"], W2=arrays["W2"], b2=arrays["b2"])
    return params, meta


__all__ = [
    "PrivatizerParams", "PrivatizedSample", "Forward", "Unprivatizable", "VARIANTS",
    "linear_power", "constant", "identity", "two_layer_tanh", "project_weights",
    "forward", "backward", "privatize", "embed", "logdet_grad_x", "privacy_loss",
    "privacy_loss_from_scores", "composed_logdet_grad_fd", "to_bytes", "from_bytes",
]
