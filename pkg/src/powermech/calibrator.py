"""Per-sample epsilon calibration, (eps, delta)-DP conversion and release filtering.

For a sample ``x`` with KDE estimate ``f`` and CI halfwidth ``hw``::

    lower = | grad f / (f - hw) - jac |      upper = | grad f / (f + hw) - jac |
    eps'  = max(lower, upper)
    eps   = eps' + d sqrt(K / (4 f)) z,      K = mu_K / (n h^d)

where ``jac`` is the x-gradient of the summed log-determinants. Since
``grad f / f`` is the KDE score, the batch path works with relative
halfwidths ``r = hw / f`` so that nothing underflows in high dimension.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import density as dens
from . import privatizer as P

DENOM_FLOOR = 1e-12
BIN_EDGES = tuple(float(x) for x in np.arange(0.0, 5.0 + 1e-9, 0.25)) + (math.inf,)


def epsilon_prime_raw(grad_f, fhat: float, hw: float, jac) -> tuple[float, float, float, bool]:
    """Direct evaluation from ``grad f``, ``f`` and ``hw``: ``(eps', lower, upper, clamped)``."""
    grad_f = np.atleast_1d(np.asarray(grad_f, dtype=np.float64))
    jac = np.broadcast_to(np.asarray(jac, dtype=np.float64), grad_f.shape)
    lo_den = fhat - hw
    clamped = lo_den <= DENOM_FLOOR
    lo_den = max(lo_den, DENOM_FLOOR)
    lower = float(np.linalg.norm(grad_f / lo_den - jac))
    upper = float(np.linalg.norm(grad_f / max(fhat + hw, DENOM_FLOOR) - jac))
    return max(lower, upper), lower, upper, bool(clamped)


def epsilon_prime_terms(score, rel_halfwidth, jac):
    """Vectorised form on the score ``grad f / f`` and ``r = hw / f``.

    Returns ``(eps', lower, upper, clamped)``; the shrunken denominator
    ``1 - r`` is floored at 1e-12 and flagged.
    """
    score = np.atleast_2d(score)
    jac = np.atleast_2d(jac)
    r = np.atleast_1d(np.asarray(rel_halfwidth, dtype=np.float64))
    shrink = 1.0 - r
    clamped = shrink <= DENOM_FLOOR
    shrink = np.maximum(shrink, DENOM_FLOOR)
    lower = np.linalg.norm(score / shrink[:, None] - jac, axis=1)
    upper = np.linalg.norm(score / (1.0 + r)[:, None] - jac, axis=1)
    return np.maximum(lower, upper), lower, upper, clamped


def addon(d: int, n: int, h: float, log_fhat, alpha: float = 0.05):
    """``d sqrt(K / (4 f)) z_{1-alpha/2}`` with ``K = mu_K / (n h^d)``."""
    log_k = dens.log_mu_k(d) - math.log(n) - d * math.log(h)
    out = d * dens.z_quantile(alpha) * np.exp(0.5 * (log_k - math.log(4.0) - np.asarray(log_fhat)))
    return float(out) if np.ndim(out) == 0 else out


def epsilon_prime(priv: P.PrivatizerParams, density: dens.DensityModel, x):
    """``(eps', lower, upper)`` for one sample or a batch; raises on unprivatizable samples."""
    single = np.ndim(x) == 1
    ev = dens.evaluate(density, x)
    fw = P.forward(priv, ev.x)
    if not fw.ok.all():
        raise P.Unprivatizable(f"{int((~fw.ok).sum())} sample(s) have a singular Jacobian")
    eps, lo, up, _ = epsilon_prime_terms(ev.score, ev.rel_halfwidth, fw.logdet_grad_x)
    if single:
        return float(eps[0]), float(lo[0]), float(up[0])
    return eps, lo, up


def epsilon_final(eps_prime, density: dens.DensityModel, x):
    """``eps' + d sqrt(K / (4 f_hat(x))) z`` using the model's ``n``, ``h`` and ``alpha``."""
    log_f = dens.kde_log_estimate(density, x)
    return eps_prime + addon(density.d, density.n, density.h, log_f, density.alpha)


@dataclass(frozen=True)
class DpGuarantee:
    eps_lip: float
    lambda_adj: float
    eps_dp: float
    delta: float


def to_dp(eps_lip: float, lambda_adj: float = 1.0, alpha: float = 0.05) -> DpGuarantee:
    if not lambda_adj > 0:
        raise ValueError("adjacency radius must be positive")
    if eps_lip < 0:
        raise ValueError("epsilon must be non-negative")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    return DpGuarantee(eps_lip, lambda_adj, eps_lip * lambda_adj, alpha)


@dataclass
class CalibrationRecord:
    index: int
    eps_prime: float
    eps_final: float
    alpha: float
    fhat: float
    halfwidth: float
    released: bool = False
    clamped: bool = False


@dataclass
class CalibrationTable:
    """Column-wise calibration results; unprivatizable rows carry ``nan`` epsilons."""

    index: np.ndarray
    eps_prime: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    eps_final: np.ndarray
    log_fhat: np.ndarray
    rel_halfwidth: np.ndarray
    ok: np.ndarray
    clamped: np.ndarray
    alpha: float
    released: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.released is None:
            self.released = np.zeros(len(self.index), dtype=bool)

    def __len__(self):
        return len(self.index)

    @property
    def fhat(self) -> np.ndarray:
        return np.exp(self.log_fhat)

    @property
    def halfwidth(self) -> np.ndarray:
        return self.fhat * self.rel_halfwidth

    def record(self, i: int) -> CalibrationRecord:
        return CalibrationRecord(int(self.index[i]), float(self.eps_prime[i]), float(self.eps_final[i]),
                                 self.alpha, float(self.fhat[i]), float(self.halfwidth[i]),
                                 bool(self.released[i]), bool(self.clamped[i]))

    def records(self) -> list[CalibrationRecord]:
        return [self.record(i) for i in range(len(self))]

    def to_csv(self, path, config_hash: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if config_hash:
                fh.write(f"# config_hash={config_hash}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "eps_prime", "eps_final", "fhat", "halfwidth", "released"])
            fh_, hw = self.fhat, self.halfwidth
            for i in range(len(self)):
                w.writerow([int(self.index[i]), repr(float(self.eps_prime[i])),
                            repr(float(self.eps_final[i])), repr(float(fh_[i])), repr(float(hw[i])),
                            int(self.released[i])])


def calibrate(priv: P.PrivatizerParams, density: dens.DensityModel, X, index=None) -> CalibrationTable:
    """Calibrate every row of ``X``; the CI level comes from the density model's ``alpha``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    k = X.shape[0]
    ev = dens.evaluate(density, X)
    # the linear-power forward state is O(d^2) per row; bound peak memory
    chunk = max(1, 2_000_000 // (X.shape[1] ** 2))
    jac = np.empty_like(X)
    ok = np.empty(k, dtype=bool)
    for s in range(0, k, chunk):
        fw = P.forward(priv, X[s:s + chunk])
        jac[s:s + chunk] = fw.logdet_grad_x
        ok[s:s + chunk] = fw.ok
    eps, lo, up, clamped = epsilon_prime_terms(ev.score, ev.rel_halfwidth, jac)
    final = eps + addon(density.d, density.n, density.h, ev.log_fhat, density.alpha)
    for arr in (eps, lo, up, final):
        arr[~ok] = np.nan
    idx = np.arange(k) if index is None else np.asarray(index, dtype=np.int64)
    return CalibrationTable(idx, eps, lo, up, final, ev.log_fhat, ev.rel_halfwidth, ok,
                            clamped & ok, density.alpha)


@dataclass
class PrivacyReport:
    bins: list[float]
    counts: list[int]
    released_counts: list[int]
    alpha: float
    delta: float
    eps_target: float
    released_count: int
    total: int
    clamp_count: int
    unprivatizable_count: int
    warning: str | None
    dataset_eps: float | None
    lambda_adj: float
    dataset_eps_dp: float | None

    def to_json(self) -> str:
        d = asdict(self)
        d["bins"] = ["inf" if math.isinf(b) else b for b in self.bins]
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


def histogram(values) -> list[int]:
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    idx = np.searchsorted(np.asarray(BIN_EDGES), v, side="right") - 1
    return np.bincount(idx, minlength=len(BIN_EDGES) - 1)[: len(BIN_EDGES) - 1].astype(int).tolist()


def filter_release(table: CalibrationTable, eps_target: float, lambda_adj: float = 1.0):
    """Mark rows with ``eps_final <= eps_target`` as released.

    Returns the released row indices (into the table) and a report. An empty
    release is valid and carries a warning.
    """
    if not eps_target >= 0:
        raise ValueError("eps_target must be >= 0")
    released = table.ok & (table.eps_final <= eps_target)
    table.released = released
    chosen = np.flatnonzero(released)
    warning = None
    if chosen.size == 0:
        warning = f"no sample meets eps_target={eps_target}; nothing to release"
    ds_eps = float(np.max(table.eps_final[chosen])) if chosen.size else None
    report = PrivacyReport(
        bins=list(BIN_EDGES), counts=histogram(table.eps_final[table.ok]),
        released_counts=histogram(table.eps_final[chosen]), alpha=table.alpha, delta=table.alpha,
        eps_target=float(eps_target), released_count=int(chosen.size), total=len(table),
        clamp_count=int(table.clamped.sum()), unprivatizable_count=int((~table.ok).sum()),
        warning=warning, dataset_eps=ds_eps, lambda_adj=lambda_adj,
        dataset_eps_dp=None if ds_eps is None else to_dp(ds_eps, lambda_adj, table.alpha).eps_dp)
    return chosen, report
