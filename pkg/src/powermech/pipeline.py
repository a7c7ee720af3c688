"""End-to-end orchestration shared by the CLI and the experiment harness."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import attack as A
from . import calibrator as C
from . import dataio
from . import density as dens
from . import privatizer as P
from . import serverside as S
from .config import RunConfig
from .protocol import ReleaseBundle
from .trainer import TrainConfig, TrainHistory, train_client

log = logging.getLogger(__name__)


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(lam=cfg.lam, optimizer=cfg.optimizer, lr=cfg.lr, batch=cfg.batch, steps=cfg.steps,
                       seed=cfg.seed, p=cfg.p, variant=cfg.variant, bandwidth=cfg.bandwidth,
                       alpha=cfg.alpha, priv_hidden=cfg.priv_hidden, util_hidden=list(cfg.util_hidden),
                       clip=cfg.clip)


def server_config(cfg: RunConfig) -> S.ServerConfig:
    return S.ServerConfig(hidden=list(cfg.server_hidden), epochs=cfg.server_epochs, lr=cfg.server_lr,
                          batch=cfg.server_batch, n_trees=cfg.n_trees, max_depth=cfg.max_depth,
                          gbt_rounds=cfg.gbt_rounds, gbt_depth=cfg.gbt_depth, shrinkage=cfg.shrinkage)


def attack_config(cfg: RunConfig) -> A.AttackConfig:
    return A.AttackConfig(hidden=list(cfg.attack_hidden), epochs=cfg.attack_epochs, lr=cfg.attack_lr)


def load_dataset(cfg: RunConfig) -> dataio.TabularDataset:
    data, schema = cfg.dataset_paths()
    return dataio.load_csv(data, schema, seed=cfg.seed)


def fit_density(ds: dataio.TabularDataset, cfg: RunConfig) -> dens.DensityModel:
    return dens.fit(ds.X_train, cfg.bandwidth, cfg.alpha)


@dataclass
class ClientRun:
    ds: dataio.TabularDataset
    density: dens.DensityModel
    priv: P.PrivatizerParams
    util: object
    history: TrainHistory
    table: C.CalibrationTable


def run_client(ds: dataio.TabularDataset, cfg: RunConfig, priv: P.PrivatizerParams | None = None) -> ClientRun:
    """Train (unless ``priv`` is given) and calibrate every training row."""
    density = fit_density(ds, cfg)
    if priv is None:
        priv, util, hist = train_client(ds, train_config(cfg), density)
    else:
        util, hist = None, TrainHistory()
    table = C.calibrate(priv, density, ds.X_train, index=ds.train)
    return ClientRun(ds, density, priv, util, hist, table)


def make_bundle(run: ClientRun, eps_target: float, lambda_adj: float = 1.0):
    """Filter by ``eps_target`` and package the released training rows.

    Returns ``(bundle, released_positions, report)``; positions index the
    training split.
    """
    chosen, report = C.filter_release(run.table, eps_target, lambda_adj)
    if report.warning:
        log.warning(report.warning)
    Z, _ = P.embed(run.priv, run.ds.X_train[chosen])
    bundle = ReleaseBundle(Z.reshape(len(chosen), run.ds.d), run.ds.y_train[chosen], float(eps_target),
                           run.table.alpha, float(lambda_adj), run.ds.schema.hash())
    return bundle, chosen, report


def eval_bundle(run: ClientRun) -> ReleaseBundle:
    """Privatized validation split, used only to score server models."""
    Z, ok = P.embed(run.priv, run.ds.X_val)
    return ReleaseBundle(Z[ok], run.ds.y_val[ok], 0.0, run.table.alpha, 1.0, run.ds.schema.hash())


def server_accuracy(bundle: ReleaseBundle, test: ReleaseBundle, kind: str, cfg: RunConfig) -> float:
    """Test accuracy of a ``kind`` model trained on ``bundle``; ``nan`` for an empty release."""
    if bundle.n == 0:
        return float("nan")
    model = S.train_server(bundle, kind, server_config(cfg), cfg.seed)
    return S.evaluate(model, test.embeddings, test.labels, bundle.n).accuracy


def accuracy_sweep(run: ClientRun, cfg: RunConfig, eps_grid=None, kinds=None) -> list[dict]:
    eps_grid = cfg.eps_grid if eps_grid is None else eps_grid
    kinds = cfg.server_kinds if kinds is None else kinds
    test = eval_bundle(run)
    rows = []
    for eps in eps_grid:
        bundle, chosen, _ = make_bundle(run, eps, cfg.lambda_adj)
        for kind in kinds:
            rows.append({"eps_target": float(eps), "kind": kind, "released": int(bundle.n),
                         "accuracy": server_accuracy(bundle, test, kind, cfg)})
    return rows


def attack_run(run: ClientRun, chosen: np.ndarray, cfg: RunConfig, mechanism=None) -> A.AttackReport:
    """Adversary with the validation split as public data, scored on released rows."""
    mech = run.priv if mechanism is None else mechanism
    attacker = A.train_attacker(run.ds.X_val, mech, attack_config(cfg), cfg.seed, groups=run.ds.schema.groups)
    X = run.ds.X_train[chosen]
    Z, _ = A.query(mech, X)
    return A.leakage_metrics(attacker, X, Z)
