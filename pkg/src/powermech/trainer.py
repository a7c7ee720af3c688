"""Joint client training of the privatizer and the utility network.

The objective per batch is ``mean(L_P) + lam * mean(L_U)`` with ``L_P`` the
privacy-inducing loss and ``L_U`` the cross-entropy of the utility network on
the embeddings.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import density as dens
from . import privatizer as P
from .dataio import TabularDataset
from .numkit import (MlpParams, init_mlp, make_optimizer, make_rng, mlp_forward,
                     softmax_cross_entropy)

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    """Non-finite loss or gradient during training."""


@dataclass
class TrainConfig:
    lam: float = 1.0
    optimizer: str = "adam"
    lr: float = 3e-3
    batch: int = 128
    steps: int = 300
    seed: int = 0
    p: int = 1
    variant: str = "linear-power"
    bandwidth: str | float = "scott"
    alpha: float = 0.05
    priv_hidden: list[int] | None = None
    util_hidden: list[int] = field(default_factory=lambda: [16])
    project: bool = False
    jitter: float = 1e-4
    clip: float | None = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.variant not in P.VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if self.clip is not None and not self.clip > 0:
            raise ValueError("clip must be positive or None")


@dataclass
class StepRecord:
    step: int
    lp: float
    lu: float
    joint: float
    gradnorm: float


@dataclass
class TrainHistory:
    records: list[StepRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self, path, config_hash: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if config_hash:
                fh.write(f"# config_hash={config_hash}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "lp", "lu", "joint", "gradnorm"])
            for r in self.records:
                w.writerow([r.step, repr(r.lp), repr(r.lu), repr(r.joint), repr(r.gradnorm)])


def init_client(d: int, n_classes: int, cfg: TrainConfig, rng: np.random.Generator):
    if cfg.variant == "two-layer-tanh":
        priv = P.two_layer_tanh(d, d, rng)
    else:
        priv = P.linear_power(d, rng, p=cfg.p, hidden=cfg.priv_hidden, jitter=cfg.jitter)
    sizes = [d, *cfg.util_hidden, n_classes]
    util = init_mlp(sizes, ["tanh"] * len(cfg.util_hidden) + ["softmax"], rng)
    return priv, util


def joint_loss_and_grads(priv: P.PrivatizerParams, util: MlpParams, x: np.ndarray, y: np.ndarray,
                         scores: np.ndarray, lam: float):
    """Joint loss and gradients over the privatizable rows of a batch.

    Returns ``(lp_mean, lu_mean, joint, priv_grads, util_grads, n_used)``.
    """
    fw = P.forward(priv, x)
    ok = fw.ok
    used = int(ok.sum())
    if used == 0:
        raise TrainingDivergence("no privatizable samples in batch")
    r = np.where(ok[:, None], scores - fw.logdet_grad_x, 0.0)
    lp = np.linalg.norm(r, axis=1)
    unit = np.divide(r, lp[:, None], out=np.zeros_like(r), where=lp[:, None] > 0)
    q_bar = -unit / used
    lu, gu, gz = softmax_cross_entropy(util, fw.z[ok], y[ok])
    z_bar = np.zeros_like(x)
    z_bar[ok] = lam * gz
    gp = P.backward(priv, fw, q_bar, z_bar)
    gu = [lam * g for g in gu]
    lp_mean = float(lp[ok].mean())
    return lp_mean, lu, lp_mean + lam * lu, gp, gu, used


def joint_step(priv: P.PrivatizerParams, util: MlpParams, x, y, density: dens.DensityModel | None,
               cfg: TrainConfig, opt, scores=None) -> StepRecord:
    """One optimizer update on ``mean(L_P) + lam * mean(L_U)``; parameters change in place."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if scores is None:
        scores = dens.kde_score(density, x)
    lp, lu, joint, gp, gu, used = joint_loss_and_grads(priv, util, x, y, scores, cfg.lam)
    if used < x.shape[0]:
        log.debug("skipped %d unprivatizable sample(s) in batch", x.shape[0] - used)
    grads = gp + gu
    gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if not (math.isfinite(joint) and math.isfinite(gnorm)):
        raise TrainingDivergence(f"non-finite loss (L_P={lp}, L_U={lu}, |grad|={gnorm})")
    if cfg.clip is not None and gnorm > cfg.clip:
        # near-singular H makes the log-det gradient spike; rescale to the clip norm
        grads = [g * (cfg.clip / gnorm) for g in grads]
    opt.step(priv.arrays() + util.arrays(), grads)
    if cfg.project:
        P.project_weights(priv)
    return StepRecord(0, lp, lu, joint, gnorm)


def fit_density(X_train: np.ndarray, cfg: TrainConfig) -> dens.DensityModel:
    return dens.fit(X_train, cfg.bandwidth, cfg.alpha)


def train_client(ds: TabularDataset, cfg: TrainConfig, density: dens.DensityModel | None = None):
    """Seeded mini-batch joint training on the training split.

    The density model is fit once on the training split and frozen.
    Returns ``(privatizer, utility_net, history)``.
    """
    rng = make_rng(cfg.seed)
    X, y = ds.X_train, ds.y_train
    n = X.shape[0]
    if cfg.batch > n:
        raise ValueError(f"batch {cfg.batch} exceeds training rows {n}")
    density = density or fit_density(X, cfg)
    priv, util = init_client(ds.d, ds.n_classes, cfg, rng)
    if cfg.project:
        P.project_weights(priv)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    history = TrainHistory()
    order = rng.permutation(n)
    pos = 0
    for step in range(1, cfg.steps + 1):
        if pos + cfg.batch > n:
            order = rng.permutation(n)
            pos = 0
        idx = np.sort(order[pos:pos + cfg.batch])
        pos += cfg.batch
        rec = joint_step(priv, util, X[idx], y[idx], density, cfg, opt)
        rec.step = step
        history.records.append(rec)
        if step == 1 or step % 50 == 0 or step == cfg.steps:
            log.info("step %d: L_P=%.4f L_U=%.4f joint=%.4f", step, rec.lp, rec.lu, rec.joint)
    return priv, util, history


def client_accuracy(priv: P.PrivatizerParams, util: MlpParams, X, y) -> float:
    Z, ok = P.embed(priv, X)
    if not ok.any():
        return float("nan")
    pred = np.argmax(mlp_forward(util, Z[ok]), axis=1)
    return float(np.mean(pred == np.asarray(y)[ok]))


def lambda_sweep(ds: TabularDataset, cfg: TrainConfig, lambdas=None, count: int = 5,
                 low: float = 1e-2, high: float = 1e2) -> list[dict]:
    """Train one client per lambda on a geometric grid; report final losses and accuracy."""
    if lambdas is None:
        lambdas = np.geomspace(low, high, count)
    density = fit_density(ds.X_train, cfg)
    rows = []
    for lam in lambdas:
        c = TrainConfig(**{**asdict(cfg), "lam": float(lam)})
        priv, util, hist = train_client(ds, c, density)
        lp = P.privacy_loss(priv, density, ds.X_val)
        rows.append({"lam": float(lam), "lp_train": float(hist.records[-1].lp) if len(hist) else None,
                     "lp_val": float(np.nanmean(lp)),
                     "val_accuracy": client_accuracy(priv, util, ds.X_val, ds.y_val)})
    return rows


# ---------------------------------------------------------------------------
# smoothness and SGD rate for the two-layer tanh privatizer


@dataclass(frozen=True)
class SmoothnessInputs:
    m: int
    h_w: float
    c: int = 2
    lam: float = 0.0
    sigma2: float = 0.0
    T: int = 1
    gap: float = 1.0


def smoothness_bound(s: SmoothnessInputs) -> tuple[float, float]:
    """``L = 4 m^2 h_w + lam c h_w`` and the step-size ceiling ``1/L``."""
    L = 4.0 * s.m * s.m * s.h_w + s.lam * s.c * s.h_w
    return L, 1.0 / L


def sgd_rate_bound(s: SmoothnessInputs, eta: float, L: float | None = None) -> float:
    """Descent-lemma bound on ``min_t E|grad L(theta_t)|^2`` after ``T`` SGD steps."""
    L = smoothness_bound(s)[0] if L is None else L
    if not 0 < eta < 1.0 / L:
        raise ValueError(f"step size {eta} must satisfy 0 < eta < 1/L = {1.0 / L}")
    shrink = 1.0 - L * eta / 2.0
    return s.gap / (eta * shrink * s.T) + L * eta * s.sigma2 / (2.0 * shrink)
