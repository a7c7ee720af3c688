"""Lower bounds on the squared reconstruction error of any estimator of x from z.

Only the identity-mean form ``d^2 / (eps^2 + Tr I)`` is evaluated, plus the
variant inflated by the KDE score error ``c1^2 / (n h^(d+4))``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import density as dens
from .numkit import make_rng


@dataclass(frozen=True)
class ReconBoundInputs:
    d: int
    eps: float
    fisher_trace: float
    n: int
    h: float
    c1: float = 0.0

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be >= 1")
        for name in ("eps", "fisher_trace", "c1"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if self.n < 1 or not self.h > 0:
            raise ValueError("n and h must be positive")


def recon_lower_bound(d: int, eps: float, fisher_trace: float) -> float:
    """``d^2 / (eps^2 + fisher_trace)``; ``inf`` marks the unbounded case."""
    denom = eps * eps + fisher_trace
    if denom <= 0:
        return math.inf
    return d * d / denom


def kde_error_term(n: int, h: float, d: int, c1: float) -> float:
    return c1 * c1 / (n * h ** (d + 4))


def empirical_recon_bound(inp: ReconBoundInputs) -> float:
    """``d^2 / (eps^2 + fisher_trace + c1^2 / (n h^(d+4)))``."""
    return recon_lower_bound(inp.d, inp.eps, inp.fisher_trace + kde_error_term(inp.n, inp.h, inp.d, inp.c1))


def is_unbounded(value: float) -> bool:
    return math.isinf(value)


def estimate_c1(density: dens.DensityModel, holdout, true_score) -> float:
    """``sqrt(MSE * n h^(d+4))`` where MSE is the mean squared score error on held-out points.

    This is a per-run estimate of the KDE error constant, chosen so that the
    inflation term equals the observed score MSE.
    """
    holdout = np.atleast_2d(holdout)
    err = dens.kde_score(density, holdout) - np.asarray(true_score)
    mse = float(np.mean(np.einsum("ij,ij->i", err, err)))
    return math.sqrt(mse * density.n * density.h ** (density.d + 4))


def gaussian_c1(density: dens.DensityModel, count: int = 2000, seed: int = 0) -> float:
    """``estimate_c1`` against a Gaussian fitted to the density's own samples."""
    X = density.samples
    mu = X.mean(axis=0)
    cov = np.atleast_2d(np.cov(X, rowvar=False))
    rng = make_rng(seed)
    held = rng.multivariate_normal(mu, cov, size=count, method="cholesky")
    score = -np.linalg.solve(cov, (held - mu).T).T
    return estimate_c1(density, held, score)


def check_lemmas(density: dens.DensityModel, count: int = 20000, seed: int = 0) -> dict:
    """Monte-Carlo checks of the covariance-trace identity and the zero-mean score.

    * ``A(z) = z`` with ``z ~ N(mu, I_d)``: ``E|A(z) - mu|^2`` against ``Tr I_d = d``.
    * a deterministic ``A``: both sides are 0.
    * KDE score averaged over draws from the KDE itself is 0 in expectation.
    """
    rng = make_rng(seed)
    d = density.d
    mu = density.samples.mean(axis=0)
    z = mu + rng.standard_normal((count, d))
    sq = np.einsum("ij,ij->i", z - mu, z - mu)
    mc_mean = float(sq.mean())
    mc_se = float(sq.std(ddof=1) / math.sqrt(count))

    # a deterministic map applied repeatedly to one x has no conditional spread
    a = np.tanh(np.tile(mu, (16, 1)))
    det_dev = float(np.sum((a - a.mean(axis=0)) ** 2, axis=1).mean())

    draws = dens.sample(density, count, rng)
    s = dens.kde_score(density, draws)
    mean = s.mean(axis=0)
    se = s.std(axis=0, ddof=1) / math.sqrt(count)
    return {
        "cov_trace_expected": float(d),
        "cov_trace_mc": mc_mean,
        "cov_trace_se": mc_se,
        "cov_trace_ok": abs(mc_mean - d) < 3 * mc_se,
        "deterministic_trace": 0.0,
        "deterministic_sq_dev": det_dev,
        "score_mean_norm": float(np.linalg.norm(mean)),
        "score_se_norm": float(np.linalg.norm(se)),
        "score_mean_ok": bool(np.linalg.norm(mean) <= 3 * np.linalg.norm(se)),
    }


@dataclass(frozen=True)
class BoundReport:
    d: int
    eps: float
    fisher_trace: float
    c1: float
    n: int
    h: float
    bound_exact: float
    bound_empirical: float

    def to_json(self) -> str:
        d = {k: (None if isinstance(v, float) and math.isinf(v) else v) for k, v in asdict(self).items()}
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


def bound_report(inp: ReconBoundInputs) -> BoundReport:
    if not inp.fisher_trace > 0:
        exact = empirical = math.inf
    else:
        exact = recon_lower_bound(inp.d, inp.eps, inp.fisher_trace)
        empirical = empirical_recon_bound(inp)
    return BoundReport(inp.d, inp.eps, inp.fisher_trace, inp.c1, inp.n, inp.h, exact, empirical)
