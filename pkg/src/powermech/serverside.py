"""Downstream learners trained only on a release bundle.

Three kinds share one interface: a softmax MLP, a bagged forest of CART
classifiers and gradient-boosted regression trees. Trees are stored as flat
node arrays so a model can be dumped with :mod:`powermech.blob`.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import blob
from .dataio import split_indices
from .numkit import (MlpParams, derive_seed, init_mlp, make_optimizer, make_rng, mlp_forward,
                     softmax_cross_entropy)
from .protocol import ReleaseBundle

log = logging.getLogger(__name__)

KINDS = ("mlp", "forest", "gbt")


@dataclass
class ServerConfig:
    hidden: list[int] = field(default_factory=lambda: [64, 32])
    activation: str = "relu"
    epochs: int = 100
    lr: float = 3e-3
    batch: int = 128
    n_trees: int = 50
    max_depth: int = 8
    min_leaf: int = 2
    gbt_rounds: int = 100
    gbt_depth: int = 4
    shrinkage: float = 0.1

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1 or not self.lr > 0:
            raise ValueError("mlp epochs, batch and lr must be positive")
        if self.n_trees < 1 or self.max_depth < 1 or self.min_leaf < 1:
            raise ValueError("forest sizes must be positive")
        if self.gbt_rounds < 1 or self.gbt_depth < 1 or not 0 < self.shrinkage <= 1:
            raise ValueError("gbt rounds/depth must be positive and shrinkage in (0, 1]")


# ---------------------------------------------------------------------------
# trees


@dataclass
class Tree:
    """Flat binary tree; ``feature == -1`` marks a leaf. ``value`` is per-node output."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def depth(self) -> int:
        def rec(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(rec(self.left[i]), rec(self.right[i]))
        return rec(0)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index per row."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            nd = node[idx]
            go_left = X[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]


class _Builder:
    def __init__(self, out_dim: int):
        self.feature, self.threshold, self.left, self.right, self.value = [], [], [], [], []
        self.out_dim = out_dim

    def add(self, value) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(np.asarray(value, dtype=np.float64).reshape(self.out_dim))
        return len(self.feature) - 1

    def tree(self) -> Tree:
        return Tree(np.array(self.feature, dtype=np.int64), np.array(self.threshold),
                    np.array(self.left, dtype=np.int64), np.array(self.right, dtype=np.int64),
                    np.array(self.value).reshape(-1, self.out_dim))


def _best_split(X: np.ndarray, stats: np.ndarray, features, min_leaf: int, impurity):
    """Best ``(gain, feature, threshold)`` over candidate features.

    ``stats`` holds per-row additive statistics; ``impurity(cum, count)``
    returns the count-weighted impurity of a prefix. Ties keep the earlier
    feature and the smaller threshold.
    """
    n = X.shape[0]
    total = stats.sum(axis=0)
    parent = impurity(total[None, :], np.array([n]))[0]
    best = (0.0, -1, 0.0)
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        cum = np.cumsum(stats[order], axis=0)[:-1]
        cnt = np.arange(1, n)
        valid = (xs[:-1] < xs[1:]) & (cnt >= min_leaf) & (n - cnt >= min_leaf)
        if not valid.any():
            continue
        child = impurity(cum, cnt) + impurity(total[None, :] - cum, n - cnt)
        gain = np.where(valid, parent - child, -np.inf)
        k = int(np.argmax(gain))
        if gain[k] > best[0] + 1e-12:
            best = (float(gain[k]), int(f), float(0.5 * (xs[k] + xs[k + 1])))
    return best


def _gini_weighted(cum: np.ndarray, cnt: np.ndarray) -> np.ndarray:
    """``count * gini`` from class-count prefixes."""
    cnt = cnt.astype(np.float64)
    return cnt - np.einsum("ij,ij->i", cum, cum) / cnt


def _sse_weighted(cum: np.ndarray, cnt: np.ndarray) -> np.ndarray:
    """Sum of squared errors up to a constant, from ``[sum g]`` prefixes."""
    return -cum[:, 0] ** 2 / cnt


def fit_cart(X: np.ndarray, y: np.ndarray, n_classes: int, max_depth: int, min_leaf: int,
             rng: np.random.Generator | None = None, max_features: int | None = None) -> Tree:
    """Gini classification tree. Leaves hold class frequency vectors."""
    onehot = np.eye(n_classes)[y]
    b = _Builder(n_classes)
    d = X.shape[1]
    k = d if max_features is None else max_features

    def grow(rows, depth):
        counts = onehot[rows].sum(axis=0)
        node = b.add(counts / counts.sum())
        if depth >= max_depth or rows.size < 2 * min_leaf or counts.max() == rows.size:
            return node
        feats = range(d) if k >= d else np.sort(rng.choice(d, size=k, replace=False))
        gain, f, thr = _best_split(X[rows], onehot[rows], feats, min_leaf, _gini_weighted)
        if f < 0:
            return node
        mask = X[rows, f] <= thr
        b.feature[node], b.threshold[node] = f, thr
        b.left[node] = grow(rows[mask], depth + 1)
        b.right[node] = grow(rows[~mask], depth + 1)
        return node

    grow(np.arange(X.shape[0]), 0)
    return b.tree()


def fit_regression_tree(X: np.ndarray, g: np.ndarray, hess: np.ndarray, max_depth: int,
                        min_leaf: int) -> Tree:
    """Least-squares tree on gradients with Newton leaf values ``-sum g / sum h``."""
    b = _Builder(1)
    d = X.shape[1]

    def grow(rows, depth):
        node = b.add(-g[rows].sum() / max(hess[rows].sum(), 1e-12))
        if depth >= max_depth or rows.size < 2 * min_leaf:
            return node
        gain, f, thr = _best_split(X[rows], g[rows, None], range(d), min_leaf, _sse_weighted)
        if f < 0:
            return node
        mask = X[rows, f] <= thr
        b.feature[node], b.threshold[node] = f, thr
        b.left[node] = grow(rows[mask], depth + 1)
        b.right[node] = grow(rows[~mask], depth + 1)
        return node

    grow(np.arange(X.shape[0]), 0)
    return b.tree()


# ---------------------------------------------------------------------------
# models


@dataclass
class ServerModel:
    kind: str
    n_classes: int
    dim: int
    mlp: MlpParams | None = None
    trees: list[Tree] = field(default_factory=list)
    base: np.ndarray | None = None
    shrinkage: float = 1.0
    constant: int | None = None
    holdout_accuracy: float | None = None

    def scores(self, X) -> np.ndarray:
        """Per-class scores; the predicted class is the first argmax."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} features, got {X.shape[1]}")
        if self.constant is not None:
            out = np.zeros((X.shape[0], self.n_classes))
            out[:, self.constant] = 1.0
            return out
        if self.kind == "mlp":
            return mlp_forward(self.mlp, X)
        if self.kind == "forest":
            votes = np.zeros((X.shape[0], self.n_classes))
            rows = np.arange(X.shape[0])
            for t in self.trees:
                votes[rows, np.argmax(t.predict(X), axis=1)] += 1.0
            return votes
        # gbt: trees are laid out round-major, one per output column
        cols = self.base.shape[0]
        F = np.tile(self.base, (X.shape[0], 1))
        for i, t in enumerate(self.trees):
            F[:, i % cols] += self.shrinkage * t.predict(X)[:, 0]
        if cols == 1:
            return np.hstack([-F, F])
        return F

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.scores(X), axis=1)


def _fit_mlp(X, y, n_classes, cfg: ServerConfig, seed: int) -> MlpParams:
    rng = make_rng(seed)
    sizes = [X.shape[1], *cfg.hidden, n_classes]
    net = init_mlp(sizes, [cfg.activation] * len(cfg.hidden) + ["softmax"], rng)
    opt = make_optimizer("adam", cfg.lr)
    n = X.shape[0]
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for s in range(0, n, cfg.batch):
            idx = perm[s:s + cfg.batch]
            _, grads, _ = softmax_cross_entropy(net, X[idx], y[idx])
            opt.step(net.arrays(), grads)
    return net


def _fit_forest(X, y, n_classes, cfg: ServerConfig, seed: int) -> list[Tree]:
    n, d = X.shape
    k = max(1, int(math.isqrt(d)))
    trees = []
    for t in range(cfg.n_trees):
        rng = make_rng(derive_seed(seed, t))
        rows = rng.integers(0, n, size=n)
        trees.append(fit_cart(X[rows], y[rows], n_classes, cfg.max_depth, cfg.min_leaf, rng, k))
    return trees


def _softmax(F):
    F = F - F.max(axis=1, keepdims=True)
    e = np.exp(F)
    return e / e.sum(axis=1, keepdims=True)


def _fit_gbt(X, y, n_classes, cfg: ServerConfig):
    """Logistic loss for two classes, softmax loss otherwise."""
    n = X.shape[0]
    cols = 1 if n_classes == 2 else n_classes
    Y = np.eye(n_classes)[y]
    if cols == 1:
        p = np.clip(Y[:, 1].mean(), 1e-6, 1 - 1e-6)
        base = np.array([0.5 * math.log(p / (1 - p))])
    else:
        prior = np.clip(Y.mean(axis=0), 1e-6, None)
        base = np.log(prior) - np.log(prior).mean()
    F = np.tile(base, (n, 1))
    trees = []
    for _ in range(cfg.gbt_rounds):
        if cols == 1:
            # margin F with p = sigmoid(2F), matching scores [-F, F]
            p = 1.0 / (1.0 + np.exp(-2.0 * F[:, 0]))
            g = 2.0 * (p - Y[:, 1])
            hs = 4.0 * p * (1.0 - p)
            t = fit_regression_tree(X, g, hs, cfg.gbt_depth, cfg.min_leaf)
            trees.append(t)
            F[:, 0] += cfg.shrinkage * t.predict(X)[:, 0]
        else:
            P = _softmax(F)
            upd = np.zeros_like(F)
            for c in range(cols):
                g = P[:, c] - Y[:, c]
                hs = P[:, c] * (1.0 - P[:, c])
                t = fit_regression_tree(X, g, hs, cfg.gbt_depth, cfg.min_leaf)
                trees.append(t)
                upd[:, c] = t.predict(X)[:, 0]
            F += cfg.shrinkage * upd
    return trees, base


def fit_model(X, y, kind: str, cfg: ServerConfig | None = None, seed: int = 0,
              n_classes: int | None = None) -> ServerModel:
    """Fit one learner on arrays (no internal split)."""
    if kind not in KINDS:
        raise ValueError(f"unknown server kind {kind!r}; expected one of {KINDS}")
    cfg = cfg or ServerConfig()
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0:
        raise ValueError("cannot train on an empty set")
    if y.min() < 0:
        raise ValueError("labels must be non-negative class ids")
    c = max(int(y.max()) + 1, 2) if n_classes is None else n_classes
    model = ServerModel(kind, c, X.shape[1])
    present = np.unique(y)
    if present.size == 1:
        log.warning("single-class training data; using a constant predictor")
        model.constant = int(present[0])
        return model
    if kind == "mlp":
        model.mlp = _fit_mlp(X, y, c, cfg, seed)
    elif kind == "forest":
        model.trees = _fit_forest(X, y, c, cfg, seed)
    else:
        model.trees, model.base = _fit_gbt(X, y, c, cfg)
        model.shrinkage = cfg.shrinkage
    return model


def train_server(bundle: ReleaseBundle, kind: str, cfg: ServerConfig | None = None,
                 seed: int = 0) -> ServerModel:
    """Fit on 80% of the bundle and record accuracy on the remaining 20%.

    Only the bundle is consulted, so anything learned is post-processing of
    the release.
    """
    if bundle.n == 0:
        raise ValueError("empty bundle")
    X, y = bundle.embeddings, bundle.labels
    if bundle.n >= 5:
        tr, ho = split_indices(bundle.n, seed)
    else:
        tr, ho = np.arange(bundle.n), np.arange(0)
    model = fit_model(X[tr], y[tr], kind, cfg, seed, n_classes=max(int(y.max()) + 1, 2))
    if ho.size:
        model.holdout_accuracy = evaluate(model, X[ho], y[ho]).accuracy
    return model


@dataclass
class EvalReport:
    accuracy: float
    per_class: dict[str, dict[str, int]]
    n_train: int | None
    n_test: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def evaluate(model: ServerModel, X, y, n_train: int | None = None) -> EvalReport:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] != y.shape[0]:
        raise ValueError("X and y row counts differ")
    if y.size == 0:
        raise ValueError("nothing to evaluate")
    pred = model.predict(X)
    per = {}
    for c in range(max(model.n_classes, int(y.max()) + 1)):
        m = y == c
        per[str(c)] = {"support": int(m.sum()), "correct": int((pred[m] == c).sum()),
                       "predicted": int((pred == c).sum())}
    return EvalReport(float(np.mean(pred == y)), per, n_train, int(y.size))


# ---------------------------------------------------------------------------
# persistence


def to_bytes(model: ServerModel, meta: dict | None = None) -> bytes:
    arrays = {}
    info = {"kind": model.kind, "n_classes": model.n_classes, "dim": model.dim,
            "constant": model.constant, "shrinkage": model.shrinkage,
            "holdout_accuracy": model.holdout_accuracy, "n_trees": len(model.trees), **(meta or {})}
    if model.mlp is not None:
        info["activations"] = list(model.mlp.activations)
        for i, (w, b) in enumerate(zip(model.mlp.weights, model.mlp.biases)):
            arrays[f"w{i}"], arrays[f"b{i}"] = w, b
    for i, t in enumerate(model.trees):
        for name in ("feature", "threshold", "left", "right", "value"):
            arrays[f"t{i}.{name}"] = getattr(t, name)
    if model.base is not None:
        arrays["base"] = model.base
    return blob.pack("server-model", arrays, info)


def from_bytes(data: bytes) -> tuple[ServerModel, dict]:
    header, arrays = blob.unpack(data, "server-model")
    meta = header["meta"]
    model = ServerModel(meta["kind"], meta["n_classes"], meta["dim"], constant=meta["constant"],
                        shrinkage=meta["shrinkage"], holdout_accuracy=meta["holdout_accuracy"])
    if "activations" in meta:
        k = len(meta["activations"])
        model.mlp = MlpParams([arrays[f"w{i}"] for i in range(k)], [arrays[f"b{i}"] for i in range(k)],
                              list(meta["activations"]))
    model.trees = [Tree(*(arrays[f"t{i}.{n}"] for n in ("feature", "threshold", "left", "right", "value")))
                   for i in range(meta["n_trees"])]
    model.base = arrays.get("base")
    return model, meta


def save(path, model: ServerModel, meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(model, meta))


def load(path) -> tuple[ServerModel, dict]:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
