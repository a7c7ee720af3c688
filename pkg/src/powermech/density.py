"""Gaussian kernel density estimation with scores, confidence intervals and
empirical Fisher information.

The kernel is the standard Gaussian ``K(u) = (2 pi)^(-d/2) exp(-|u|^2 / 2)``,
for which ``mu_K = int K^2 = 1 / (2^d pi^(d/2))``. All evaluations are done in
log space so that densities in dozens of dimensions stay representable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np
from scipy.special import logsumexp

DENSITY_FLOOR = 1e-12
_CHUNK_ELEMENTS = 4_000_000


def mu_k(d: int) -> float:
    return 1.0 / (2.0 ** d * math.pi ** (d / 2.0))


def log_mu_k(d: int) -> float:
    return -d * math.log(2.0) - 0.5 * d * math.log(math.pi)


def z_quantile(alpha: float) -> float:
    """``z_{1 - alpha/2}`` via the stdlib inverse normal CDF (Wichura AS241, ~1e-16 accuracy)."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    return NormalDist().inv_cdf(1.0 - alpha / 2.0)


def scott_bandwidth(X: np.ndarray) -> float:
    """``mean_j std_j * n^(-1/(d+4))``."""
    X = np.atleast_2d(X)
    n, d = X.shape
    sigma = float(np.mean(X.std(axis=0, ddof=1))) if n > 1 else 1.0
    if not sigma > 0:
        sigma = 1.0
    return sigma * n ** (-1.0 / (d + 4))


@dataclass(frozen=True)
class DensityModel:
    samples: np.ndarray
    h: float
    alpha: float = 0.05
    _sq_norms: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        X = np.ascontiguousarray(np.atleast_2d(np.asarray(self.samples, dtype=np.float64)))
        if X.shape[0] < 1:
            raise ValueError("density model needs at least one sample")
        if not self.h > 0:
            raise ValueError("bandwidth must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        object.__setattr__(self, "samples", X)
        object.__setattr__(self, "_sq_norms", np.einsum("ij,ij->i", X, X))

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def d(self) -> int:
        return self.samples.shape[1]

    @property
    def mu_k(self) -> float:
        return mu_k(self.d)

    @property
    def z(self) -> float:
        return z_quantile(self.alpha)

    @property
    def log_norm(self) -> float:
        """log of ``1 / (n h^d (2 pi)^(d/2))``."""
        return -math.log(self.n) - self.d * math.log(self.h) - 0.5 * self.d * math.log(2 * math.pi)


def fit(X: np.ndarray, bandwidth="scott", alpha: float = 0.05) -> DensityModel:
    h = scott_bandwidth(X) if bandwidth in (None, "scott") else float(bandwidth)
    return DensityModel(np.asarray(X, dtype=np.float64), h, alpha)


def _points(m: DensityModel, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != m.d:
        raise ValueError(f"point dimension {x.shape[1]} != model dimension {m.d}")
    return x, single


def _chunks(m: DensityModel, k: int):
    step = max(1, _CHUNK_ELEMENTS // max(m.n, 1))
    for start in range(0, k, step):
        yield slice(start, min(k, start + step))


def _log_kernels(m: DensityModel, x: np.ndarray) -> np.ndarray:
    """``-|x - X_i|^2 / (2 h^2)`` for a chunk of points, shape ``(k, n)``."""
    sq = np.einsum("ij,ij->i", x, x)[:, None] + m._sq_norms[None, :] - 2.0 * (x @ m.samples.T)
    np.maximum(sq, 0.0, out=sq)
    return sq * (-0.5 / (m.h * m.h))


def _eval(m: DensityModel, x: np.ndarray, want_score: bool):
    logf = np.empty(x.shape[0])
    score = np.empty_like(x) if want_score else None
    for sl in _chunks(m, x.shape[0]):
        lk = _log_kernels(m, x[sl])
        lse = logsumexp(lk, axis=1)
        logf[sl] = lse + m.log_norm
        if want_score:
            w = np.exp(lk - lse[:, None])
            score[sl] = (w @ m.samples - x[sl]) / (m.h * m.h)
    return logf, score


def kde_log_estimate(m: DensityModel, x) -> np.ndarray | float:
    x, single = _points(m, x)
    logf, _ = _eval(m, x, False)
    return float(logf[0]) if single else logf


def kde_estimate(m: DensityModel, x) -> np.ndarray | float:
    """``f_hat(x) = 1/(n h^d) sum_i K((x - X_i)/h)``."""
    out = np.exp(kde_log_estimate(m, x))
    return float(out) if np.ndim(out) == 0 else out


def kde_score(m: DensityModel, x) -> np.ndarray:
    """Exact ``grad_x log f_hat(x) = sum_i w_i (X_i - x) / h^2`` with kernel responsibilities ``w_i``."""
    x, single = _points(m, x)
    _, score = _eval(m, x, True)
    return score[0] if single else score


def relative_halfwidth(m: DensityModel, log_fhat) -> np.ndarray:
    """``halfwidth / f_hat = z sqrt(mu_K / (n h^d f_hat))`` computed from ``log f_hat``."""
    log_ratio = log_mu_k(m.d) - math.log(m.n) - m.d * math.log(m.h) - np.asarray(log_fhat)
    return m.z * np.exp(0.5 * log_ratio)


def kde_ci(m: DensityModel, x):
    """``(f_hat, halfwidth)`` with ``halfwidth = z_{1-alpha/2} sqrt(mu_K f_hat / (n h^d))``."""
    logf = kde_log_estimate(m, x)
    fhat = np.exp(logf)
    hw = fhat * relative_halfwidth(m, logf)
    if np.ndim(fhat) == 0:
        return float(fhat), float(hw)
    return fhat, hw


@dataclass(frozen=True)
class DensityEval:
    """Batch of KDE evaluations; per-row arrays."""

    x: np.ndarray
    log_fhat: np.ndarray
    score: np.ndarray
    rel_halfwidth: np.ndarray

    @property
    def fhat(self) -> np.ndarray:
        return np.exp(self.log_fhat)

    @property
    def grad(self) -> np.ndarray:
        return self.fhat[:, None] * self.score

    @property
    def halfwidth(self) -> np.ndarray:
        return self.fhat * self.rel_halfwidth


def evaluate(m: DensityModel, x) -> DensityEval:
    x, _ = _points(m, x)
    logf, score = _eval(m, x, True)
    return DensityEval(x, logf, score, relative_halfwidth(m, logf))


def fisher_trace(m: DensityModel, eval_samples) -> float:
    """Trace of ``(1/n) sum_i s_hat(x_i) s_hat(x_i)^T`` over the evaluation samples."""
    x = np.atleast_2d(np.asarray(eval_samples, dtype=np.float64))
    if x.shape[0] < 1:
        raise ValueError("fisher_trace needs at least one evaluation sample")
    s = kde_score(m, x)
    return float(np.mean(np.einsum("ij,ij->i", s, s)))


def fisher_matrix(m: DensityModel, eval_samples) -> np.ndarray:
    s = kde_score(m, np.atleast_2d(eval_samples))
    return s.T @ s / s.shape[0]


def sample(m: DensityModel, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw from the KDE mixture itself."""
    idx = rng.integers(0, m.n, size=count)
    return m.samples[idx] + m.h * rng.standard_normal((count, m.d))
