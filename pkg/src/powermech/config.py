"""Run configuration: a flat JSON document with validated ranges and a stable hash."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


DATA_DIR = Path(__file__).resolve().parent / "data"
BUILTIN_DATASETS = {
    "synthetic2d": (DATA_DIR / "synthetic2d.csv", DATA_DIR / "synthetic2d.schema.json"),
    "adult": (DATA_DIR / "adult.csv.gz", DATA_DIR / "adult.schema.json"),
}


@dataclass
class RunConfig:
    seed: int = 7
    dataset: str = "synthetic2d"
    schema: str | None = None
    variant: str = "linear-power"
    p: int = 1
    priv_hidden: list[int] | None = None
    util_hidden: list[int] = field(default_factory=lambda: [16])
    lam: float = 1.0
    optimizer: str = "adam"
    lr: float = 3e-3
    batch: int = 128
    steps: int = 300
    clip: float | None = 1.0
    bandwidth: str | float = "scott"
    alpha: float = 0.05
    eps_target: float = 1.0
    eps_grid: list[float] = field(default_factory=lambda: [0.5, 1.0, 2.0])
    lambda_adj: float = 1.0
    server_kind: str = "mlp"
    server_kinds: list[str] = field(default_factory=lambda: ["mlp", "forest", "gbt"])
    server_hidden: list[int] = field(default_factory=lambda: [64, 32])
    server_epochs: int = 100
    server_lr: float = 3e-3
    server_batch: int = 128
    n_trees: int = 50
    max_depth: int = 8
    gbt_rounds: int = 100
    gbt_depth: int = 4
    shrinkage: float = 0.1
    attack_hidden: list[int] = field(default_factory=lambda: [64, 64])
    attack_epochs: int = 60
    attack_lr: float = 3e-3
    timeout: float = 30.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        def sizes(v, name):
            need(isinstance(v, list) and all(isinstance(k, int) and k >= 1 for k in v),
                 f"{name} must be a list of positive integers")

        need(isinstance(self.seed, int) and self.seed >= 0, "seed must be a non-negative integer")
        need(isinstance(self.dataset, str) and self.dataset, "dataset must be a name or a path")
        need(self.variant in ("linear-power", "two-layer-tanh"), f"unknown variant {self.variant!r}")
        need(isinstance(self.p, int) and 1 <= self.p <= 16, "p must be an integer in [1, 16]")
        if self.priv_hidden is not None:
            sizes(self.priv_hidden, "priv_hidden")
        for name in ("util_hidden", "server_hidden", "attack_hidden"):
            sizes(getattr(self, name), name)
        need(self.lam >= 0 and math.isfinite(self.lam), "lam must be finite and >= 0")
        need(self.optimizer in ("sgd", "adam"), f"unknown optimizer {self.optimizer!r}")
        for name in ("lr", "server_lr", "attack_lr", "shrinkage", "timeout", "lambda_adj"):
            v = getattr(self, name)
            need(isinstance(v, (int, float)) and v > 0 and math.isfinite(v), f"{name} must be > 0")
        need(self.shrinkage <= 1, "shrinkage must be <= 1")
        for name in ("batch", "server_batch", "server_epochs", "n_trees", "max_depth", "gbt_rounds",
                     "gbt_depth", "attack_epochs"):
            v = getattr(self, name)
            need(isinstance(v, int) and v >= 1, f"{name} must be a positive integer")
        need(self.clip is None or (isinstance(self.clip, (int, float)) and self.clip > 0),
             "clip must be a positive number or null")
        need(isinstance(self.steps, int) and self.steps >= 0, "steps must be a non-negative integer")
        need(self.bandwidth == "scott" or (isinstance(self.bandwidth, (int, float)) and self.bandwidth > 0),
             "bandwidth must be 'scott' or a positive number")
        need(0 < self.alpha < 1, "alpha must lie in (0, 1)")
        need(self.eps_target >= 0 and math.isfinite(self.eps_target), "eps_target must be >= 0")
        need(isinstance(self.eps_grid, list) and self.eps_grid
             and all(isinstance(e, (int, float)) and e >= 0 for e in self.eps_grid),
             "eps_grid must be a non-empty list of non-negative numbers")
        kinds = ("mlp", "forest", "gbt")
        need(self.server_kind in kinds, f"unknown server_kind {self.server_kind!r}")
        need(isinstance(self.server_kinds, list) and self.server_kinds
             and all(k in kinds for k in self.server_kinds), f"server_kinds must be drawn from {kinds}")

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"no such config file: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from None
        return cls.from_dict(d)

    def replace(self, **kw) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), **kw})

    def dataset_paths(self) -> tuple[Path, Path]:
        if self.dataset in BUILTIN_DATASETS:
            return BUILTIN_DATASETS[self.dataset]
        data = Path(self.dataset)
        if self.schema is None:
            raise ConfigError("a dataset path needs a schema path")
        return data, Path(self.schema)
