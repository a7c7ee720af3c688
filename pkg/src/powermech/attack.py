"""Reconstruction adversary against released embeddings.

The adversary holds public data from the same distribution, pushes it
through the privatizer as a black box and fits a decoder from embeddings
back to standardized features. This is weaker than a full feature-space
hijacking attack (the server never steers client training), so resisting it
is necessary but not sufficient evidence of privacy.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import privatizer as P
from .dataio import TabularDataset
from .numkit import MlpParams, init_mlp, make_optimizer, make_rng, mlp_forward, mse_loss


class SchemaMismatch(ValueError):
    pass


@dataclass
class AttackConfig:
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    activation: str = "tanh"
    epochs: int = 60
    lr: float = 3e-3
    batch: int = 128

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1 or not self.lr > 0:
            raise ValueError("attack epochs, batch and lr must be positive")


@dataclass
class AttackerModel:
    decoder: MlpParams
    groups: list[list[int]]

    def reconstruct(self, Z) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        if Z.shape[1] != self.decoder.n_in:
            raise SchemaMismatch(f"decoder expects {self.decoder.n_in}-d embeddings, got {Z.shape[1]}")
        return mlp_forward(self.decoder, Z)


Mechanism = P.PrivatizerParams | Callable[[np.ndarray], np.ndarray]


def query(mechanism: Mechanism, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Black-box embedding of ``X``; returns ``(Z, ok)``."""
    if isinstance(mechanism, P.PrivatizerParams):
        return P.embed(mechanism, X)
    Z = np.asarray(mechanism(X), dtype=np.float64)
    return Z, np.all(np.isfinite(Z), axis=1)


def train_attacker(public: TabularDataset | np.ndarray, mechanism: Mechanism,
                   cfg: AttackConfig | None = None, seed: int = 0,
                   groups: list[list[int]] | None = None) -> AttackerModel:
    """Fit a decoder ``z -> x`` by squared error on the adversary's public rows."""
    cfg = cfg or AttackConfig()
    if isinstance(public, TabularDataset):
        X = public.X
        groups = public.schema.groups if groups is None else groups
    else:
        X = np.atleast_2d(np.asarray(public, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("public set is empty")
    Z, ok = query(mechanism, X)
    Z, X = Z[ok], X[ok]
    if Z.shape[0] == 0:
        raise ValueError("no public row could be privatized")
    rng = make_rng(seed)
    sizes = [Z.shape[1], *cfg.hidden, X.shape[1]]
    net = init_mlp(sizes, [cfg.activation] * len(cfg.hidden) + ["identity"], rng)
    opt = make_optimizer("adam", cfg.lr)
    n = Z.shape[0]
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for s in range(0, n, cfg.batch):
            idx = perm[s:s + cfg.batch]
            _, grads, _ = mse_loss(net, Z[idx], X[idx])
            opt.step(net.arrays(), grads)
    return AttackerModel(net, [list(g) for g in (groups or [])])


@dataclass
class AttackReport:
    accuracy: float | None
    mse: float
    recon_error: float
    correlation: float
    n: int

    def to_json(self) -> str:
        d = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(self).items()}
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


def metrics_from_reconstruction(X_hat, X, groups) -> AttackReport:
    """Leakage metrics of a reconstruction against the true standardized rows.

    ``accuracy`` is the fraction of rows whose every one-hot group is
    recovered by argmax (``None`` without categorical groups); ``mse`` is per
    coordinate and ``recon_error`` is the per-row squared error ``|x_hat - x|^2``.
    """
    X_hat = np.atleast_2d(np.asarray(X_hat, dtype=np.float64))
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X_hat.shape != X.shape:
        raise SchemaMismatch(f"reconstruction {X_hat.shape} vs features {X.shape}")
    n = X.shape[0]
    if n == 0:
        raise ValueError("no rows to score")
    if groups:
        hit = np.ones(n, dtype=bool)
        for g in groups:
            hit &= np.argmax(X_hat[:, g], axis=1) == np.argmax(X[:, g], axis=1)
        acc = float(hit.mean())
    else:
        acc = None
    err = X_hat - X
    mse = float(np.mean(err * err))
    a, b = X_hat.ravel() - X_hat.mean(), X.ravel() - X.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    corr = float(a @ b / den) if den > 0 else 0.0
    return AttackReport(acc, mse, mse * X.shape[1], max(-1.0, min(1.0, corr)), n)


def leakage_metrics(attacker: AttackerModel, private_X, Z) -> AttackReport:
    """Score the attacker on released embeddings ``Z`` of the rows ``private_X``."""
    if isinstance(private_X, TabularDataset):
        private_X = private_X.X
    private_X = np.atleast_2d(np.asarray(private_X, dtype=np.float64))
    Z = getattr(Z, "embeddings", Z)
    if attacker.decoder.n_out != private_X.shape[1]:
        raise SchemaMismatch(f"attacker reconstructs {attacker.decoder.n_out} features, "
                             f"data has {private_X.shape[1]}")
    if np.shape(Z)[0] != private_X.shape[0]:
        raise SchemaMismatch("embedding rows do not match private rows")
    return metrics_from_reconstruction(attacker.reconstruct(Z), private_X, attacker.groups)
