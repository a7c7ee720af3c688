"""CSV artifacts and matplotlib figures for a finished run."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .calibrator import BIN_EDGES, histogram  # noqa: E402

# PNG metadata would otherwise carry the matplotlib version string
_PNG_META = {"Software": None}


def read_hash(path) -> str | None:
    """Config hash from a ``# config_hash=`` first line (CSV) or a JSON field."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        return json.loads(text).get("config_hash")
    first = text.split("\n", 1)[0]
    if first.startswith("# config_hash="):
        return first.split("=", 1)[1].strip()
    return None


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _write(path, header, rows, config_hash):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _edge(v: float) -> str:
    return "inf" if math.isinf(v) else repr(v)


def write_eps_histogram(path, eps_final, released, config_hash) -> list[int]:
    eps_final = np.asarray(eps_final, dtype=np.float64)
    released = np.asarray(released, dtype=bool)
    all_counts = histogram(eps_final)
    rel_counts = histogram(eps_final[released])
    rows = [[_edge(BIN_EDGES[i]), _edge(BIN_EDGES[i + 1]), all_counts[i], rel_counts[i]]
            for i in range(len(BIN_EDGES) - 1)]
    _write(path, ["bin_lo", "bin_hi", "count", "released"], rows, config_hash)
    return all_counts


def write_loss_curve(path, history_rows: list[dict], config_hash) -> None:
    rows = [[r["step"], r["lp"], r["lu"], r["joint"], r["gradnorm"]] for r in history_rows]
    _write(path, ["step", "lp", "lu", "joint", "gradnorm"], rows, config_hash)


def write_accuracy(path, sweep: list[dict], config_hash) -> None:
    rows = [[repr(r["eps_target"]), r["kind"], r["released"], repr(r["accuracy"])] for r in sweep]
    _write(path, ["eps_target", "kind", "released", "accuracy"], rows, config_hash)


def _save(fig, path):
    fig.savefig(path, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_eps_histogram(path, eps_final, released, eps_target: float | None = None) -> None:
    eps_final = np.asarray(eps_final, dtype=np.float64)
    finite = np.isfinite(eps_final)
    edges = np.asarray(BIN_EDGES[:-1] + (BIN_EDGES[-2] + 0.25,))
    clipped = np.minimum(eps_final[finite], edges[-1] - 1e-9)
    rel = np.asarray(released, dtype=bool)[finite]
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.hist(clipped, bins=edges, color="0.75", label="all samples")
    ax.hist(clipped[rel], bins=edges, color="C0", label="released")
    if eps_target is not None:
        ax.axvline(eps_target, color="C3", lw=1.2, ls="--", label=f"target {eps_target:g}")
    ax.set_xlabel("per-sample epsilon (last bin collects >= 5)")
    ax.set_ylabel("count")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_loss_curve(path, history_rows: list[dict]) -> None:
    step = np.array([int(r["step"]) for r in history_rows])
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    for key, label in (("lp", "privacy loss"), ("lu", "utility loss"), ("joint", "joint")):
        ax.plot(step, [float(r[key]) for r in history_rows], lw=1.0, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("batch mean")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_accuracy(path, sweep: list[dict]) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    for kind in dict.fromkeys(r["kind"] for r in sweep):
        pts = [(r["eps_target"], r["accuracy"]) for r in sweep if r["kind"] == kind]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", lw=1.0, label=kind)
    ax.set_xlabel("epsilon target")
    ax.set_ylabel("server test accuracy")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    _save(fig, path)
