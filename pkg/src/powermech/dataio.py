"""Tabular ingestion: CSV parsing, one-hot/standard encoding and seeded 80/20 splits."""

from __future__ import annotations

import csv
import gzip
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numkit import make_rng

log = logging.getLogger(__name__)

ROLES = ("numeric", "categorical", "label")
MISSING = ("", "?", "NA", "nan")
TRAIN_FRACTION = 0.8


class DataError(ValueError):
    """Malformed input data (missing column, bad cell, empty file, ...)."""


def fnv1a32(data: bytes) -> int:
    h = 0x811C9DC5
    for byte in data:
        h ^= byte
        h = (h * 0x01000193) & 0xFFFFFFFF
    return h


@dataclass(frozen=True)
class FeatureSchema:
    """Column roles, category dictionaries and train-split standardization stats."""

    columns: tuple[str, ...]
    roles: dict[str, str]
    categories: dict[str, tuple[str, ...]]
    label_values: tuple[str, ...]
    means: dict[str, float] = field(default_factory=dict)
    stds: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        labels = [c for c in self.columns if self.roles[c] == "label"]
        if len(labels) != 1:
            raise DataError(f"schema needs exactly one label column, found {len(labels)}")
        for col, values in self.categories.items():
            if len(set(values)) != len(values):
                raise DataError(f"duplicate categories in column {col!r}")

    @property
    def label(self) -> str:
        return next(c for c in self.columns if self.roles[c] == "label")

    @property
    def numeric(self) -> list[str]:
        return [c for c in self.columns if self.roles[c] == "numeric"]

    @property
    def categorical(self) -> list[str]:
        return [c for c in self.columns if self.roles[c] == "categorical"]

    @property
    def feature_names(self) -> list[str]:
        names = []
        for c in self.columns:
            if self.roles[c] == "numeric":
                names.append(c)
            elif self.roles[c] == "categorical":
                names += [f"{c}={v}" for v in self.categories[c]]
        return names

    @property
    def groups(self) -> list[list[int]]:
        """Encoded column indices of each one-hot group, in column order."""
        out, pos = [], 0
        for c in self.columns:
            if self.roles[c] == "numeric":
                pos += 1
            elif self.roles[c] == "categorical":
                k = len(self.categories[c])
                out.append(list(range(pos, pos + k)))
                pos += k
        return out

    @property
    def numeric_positions(self) -> list[int]:
        out, pos = [], 0
        for c in self.columns:
            if self.roles[c] == "numeric":
                out.append(pos)
                pos += 1
            elif self.roles[c] == "categorical":
                pos += len(self.categories[c])
        return out

    @property
    def dim(self) -> int:
        return len(self.feature_names)

    def to_dict(self) -> dict:
        return {
            "columns": list(self.columns),
            "roles": dict(self.roles),
            "categories": {k: list(v) for k, v in self.categories.items()},
            "label_values": list(self.label_values),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> int:
        """32-bit FNV-1a of the canonical schema JSON (statistics excluded)."""
        return fnv1a32(self.to_json().encode("utf-8"))

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(tuple(d["columns"]), dict(d["roles"]),
                   {k: tuple(v) for k, v in d["categories"].items()}, tuple(d["label_values"]))


@dataclass(frozen=True)
class TabularDataset:
    """Encoded features ``X`` (standardized with train-split statistics) and labels ``y``."""

    X: np.ndarray
    y: np.ndarray
    schema: FeatureSchema
    train: np.ndarray
    validation: np.ndarray
    raw: np.ndarray
    dropped: int = 0

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.schema.label_values)

    @property
    def X_train(self) -> np.ndarray:
        return self.X[self.train]

    @property
    def y_train(self) -> np.ndarray:
        return self.y[self.train]

    @property
    def X_val(self) -> np.ndarray:
        return self.X[self.validation]

    @property
    def y_val(self) -> np.ndarray:
        return self.y[self.validation]

    def subset(self, rows) -> "TabularDataset":
        """Rows as a new dataset (split recomputed with seed 0, stats kept)."""
        rows = np.asarray(rows, dtype=np.int64)
        n = len(rows)
        return TabularDataset(self.X[rows], self.y[rows], self.schema,
                              np.arange(n), np.arange(0), self.raw[rows], 0)


def _parse_schema_spec(schema_spec) -> dict[str, str]:
    if isinstance(schema_spec, (str, Path)):
        schema_spec = json.loads(Path(schema_spec).read_text())
    spec = dict(schema_spec)
    for col, role in spec.items():
        if role not in ROLES:
            raise DataError(f"column {col!r}: unknown role {role!r}")
    return spec


def _open_text(path: Path):
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8", newline="")
    return open(path, encoding="utf-8", newline="")


def read_rows(path, schema_spec) -> tuple[list[str], list[list[str]], int]:
    """Header, rows with no missing cells, and the count of dropped rows."""
    path = Path(path)
    spec = _parse_schema_spec(schema_spec)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with _open_text(path) as fh:
        reader = csv.reader(fh, skipinitialspace=True)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        missing = [c for c in spec if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}")
        extra = [c for c in header if c not in spec]
        if extra:
            raise DataError(f"{path}: column(s) not in schema {extra}")
        rows, dropped = [], 0
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(row)} cells, expected {len(header)}")
            cells = [c.strip() for c in row]
            if any(c in MISSING for c in cells):
                dropped += 1
                continue
            rows.append(cells)
    if not rows:
        raise DataError(f"{path}: no usable data rows")
    return header, rows, dropped


def encode(header: list[str], rows: list[list[str]], spec: dict[str, str],
           path_label: str = "<data>") -> tuple[np.ndarray, np.ndarray, FeatureSchema]:
    """One-hot/numeric encoding without standardization."""
    cols = list(zip(*rows))
    by_name = dict(zip(header, cols))
    categories = {c: tuple(sorted(set(by_name[c]))) for c in header if spec[c] == "categorical"}
    label_col = [c for c in header if spec[c] == "label"]
    if len(label_col) != 1:
        raise DataError(f"schema needs exactly one label column, found {len(label_col)}")
    label_values = tuple(sorted(set(by_name[label_col[0]])))
    schema = FeatureSchema(tuple(header), {c: spec[c] for c in header}, categories, label_values)
    n = len(rows)
    blocks = []
    for c in header:
        role = spec[c]
        if role == "numeric":
            vals = np.empty(n)
            for i, cell in enumerate(by_name[c]):
                try:
                    vals[i] = float(cell)
                except ValueError:
                    raise DataError(f"{path_label}: unparseable numeric cell {cell!r} in column "
                                    f"{c!r} at data row {i}") from None
                if not math.isfinite(vals[i]):
                    raise DataError(f"{path_label}: non-finite value in column {c!r} at data row {i}")
            blocks.append(vals[:, None])
        elif role == "categorical":
            index = {v: j for j, v in enumerate(categories[c])}
            onehot = np.zeros((n, len(index)))
            onehot[np.arange(n), [index[v] for v in by_name[c]]] = 1.0
            blocks.append(onehot)
    raw = np.hstack(blocks) if blocks else np.zeros((n, 0))
    lab_index = {v: j for j, v in enumerate(label_values)}
    y = np.array([lab_index[v] for v in by_name[label_col[0]]], dtype=np.int64)
    return raw, y, schema


def _standardize(raw: np.ndarray, schema: FeatureSchema, train: np.ndarray):
    X = raw.copy()
    means, stds = {}, {}
    for name, pos in zip(schema.numeric, schema.numeric_positions):
        col = raw[train, pos]
        mu = float(col.mean())
        sd = float(col.std())
        if not sd > 0:
            sd = 1.0
        X[:, pos] = (raw[:, pos] - mu) / sd
        means[name], stds[name] = mu, sd
    return X, replace(schema, means=means, stds=stds)


def split_indices(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if n < 5:
        raise DataError(f"need at least 5 rows to split, got {n}")
    perm = make_rng(seed).permutation(n)
    n_train = int(math.floor(TRAIN_FRACTION * n + 0.5))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def split(ds: TabularDataset, seed: int) -> TabularDataset:
    """Fresh seeded 80/20 split; standardization is refit on the new train rows."""
    train, val = split_indices(ds.n, seed)
    X, schema = _standardize(ds.raw, ds.schema, train)
    return TabularDataset(X, ds.y, schema, train, val, ds.raw, ds.dropped)


def from_encoded(raw: np.ndarray, y: np.ndarray, schema: FeatureSchema, seed: int = 0,
                 dropped: int = 0) -> TabularDataset:
    ds = TabularDataset(raw, np.asarray(y, dtype=np.int64), schema, np.arange(0), np.arange(0),
                        np.asarray(raw, dtype=np.float64), dropped)
    return split(ds, seed)


def load_csv(path, schema_spec, seed: int = 0) -> TabularDataset:
    """Load, drop rows with missing cells, encode and split a CSV file.

    ``schema_spec`` maps column name to ``numeric``, ``categorical`` or
    ``label`` (a dict or a path to a JSON file). Files ending in ``.gz`` are
    decompressed transparently.
    """
    spec = _parse_schema_spec(schema_spec)
    header, rows, dropped = read_rows(path, spec)
    if dropped:
        log.info("%s: dropped %d row(s) with missing values", path, dropped)
    raw, y, schema = encode(header, rows, spec, str(path))
    return from_encoded(raw, y, schema, seed, dropped)


def from_arrays(numeric: np.ndarray, y: np.ndarray, categorical: np.ndarray | None = None,
                n_levels: list[int] | None = None, seed: int = 0) -> TabularDataset:
    """Dataset from numeric columns ``x0..`` and integer-coded categoricals ``c0..``."""
    numeric = np.atleast_2d(np.asarray(numeric, dtype=np.float64))
    n = numeric.shape[0]
    categorical = np.zeros((n, 0), dtype=np.int64) if categorical is None else np.asarray(categorical)
    n_levels = n_levels or [int(categorical[:, j].max()) + 1 for j in range(categorical.shape[1])]
    cols = [f"x{j}" for j in range(numeric.shape[1])] + [f"c{j}" for j in range(categorical.shape[1])]
    roles = {c: ("numeric" if c.startswith("x") else "categorical") for c in cols}
    roles["y"] = "label"
    cats = {f"c{j}": tuple(f"v{k}" for k in range(n_levels[j])) for j in range(categorical.shape[1])}
    y = np.asarray(y, dtype=np.int64)
    schema = FeatureSchema(tuple(cols + ["y"]), roles, cats,
                           tuple(str(v) for v in range(int(y.max()) + 1)))
    blocks = [numeric]
    for j, k in enumerate(n_levels):
        oh = np.zeros((n, k))
        oh[np.arange(n), categorical[:, j]] = 1.0
        blocks.append(oh)
    return from_encoded(np.hstack(blocks), y, schema, seed)


def write_csv(ds: TabularDataset, path, schema_path=None) -> None:
    """Write the raw (unstandardized) rows back out as CSV plus an optional schema spec."""
    schema = ds.schema
    numeric_pos = dict(zip(schema.numeric, schema.numeric_positions))
    group_of = dict(zip(schema.categorical, schema.groups))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(schema.columns)
        for i in range(ds.n):
            row = []
            for c in schema.columns:
                role = schema.roles[c]
                if role == "numeric":
                    row.append(repr(float(ds.raw[i, numeric_pos[c]])))
                elif role == "categorical":
                    g = group_of[c]
                    row.append(schema.categories[c][int(np.argmax(ds.raw[i, g]))])
                else:
                    row.append(schema.label_values[ds.y[i]])
            w.writerow(row)
    if schema_path is not None:
        Path(schema_path).write_text(json.dumps(schema.roles, indent=2) + "\n")


# ---------------------------------------------------------------------------
# synthetic benchmarks


def gaussian_benchmark(n: int, d: int = 2, seed: int = 0, split_seed: int | None = None) -> TabularDataset:
    """Standard normal features; label is the sign of the first coordinate."""
    rng = make_rng(seed)
    x = rng.standard_normal((n, d))
    return from_arrays(x, (x[:, 0] > 0).astype(np.int64), seed=seed if split_seed is None else split_seed)


def two_gaussians(n: int, seed: int = 0, separation: float = 2.0) -> TabularDataset:
    """Two isotropic 2-d Gaussian classes centred at +-separation/2 on the first axis."""
    rng = make_rng(seed)
    y = rng.integers(0, 2, size=n)
    x = rng.standard_normal((n, 2))
    x[:, 0] += np.where(y == 1, separation / 2, -separation / 2)
    return from_arrays(x, y, seed=seed)


def mixed_benchmark(n: int, seed: int = 0) -> TabularDataset:
    """Two numeric and two 3-level categorical columns with a label depending on both."""
    rng = make_rng(seed)
    c = np.stack([rng.integers(0, 3, size=n), rng.integers(0, 3, size=n)], axis=1)
    x = rng.standard_normal((n, 2)) + 0.8 * (c - 1.0)
    score = x[:, 0] + 0.5 * x[:, 1] + 0.7 * (c[:, 0] == 2) - 0.7 * (c[:, 1] == 0)
    y = (score + 0.3 * rng.standard_normal(n) > 0).astype(np.int64)
    return from_arrays(x, y, c, [3, 3], seed=seed)


def ring_benchmark(n: int, seed: int = 0, radius: float = 1.1) -> TabularDataset:
    """Standard normal 2-d points labelled by whether they fall outside a circle.

    The positive class lives in the low-density tails, so any release rule
    that favours dense regions visibly starves the server of it.
    """
    rng = make_rng(seed)
    x = rng.standard_normal((n, 2))
    return from_arrays(x, (np.hypot(x[:, 0], x[:, 1]) > radius).astype(np.int64), seed=seed)
