"""Command-line entry point.

Every subcommand reads and writes artifacts in one run directory (``--out``).
Each artifact records the hash of the effective configuration, and inputs
whose hash differs from the current configuration are refused.

Exit codes: 0 success, 2 configuration, 3 data, 4 training divergence,
5 protocol.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, blob, dataio
from . import calibrator as C
from . import density as dens
from . import pipeline as PL
from . import privatizer as P
from . import protocol as proto
from . import report as R
from . import serverside as S
from .config import ConfigError, RunConfig
from .numkit import MlpParams
from .trainer import StepRecord, TrainHistory, TrainingDivergence, train_client

log = logging.getLogger("powermech")

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_PROTOCOL = 2, 3, 4, 5


class ArtifactError(dataio.DataError):
    pass


class Run:
    """Paths and hash bookkeeping for one run directory."""

    def __init__(self, cfg: RunConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.hash = cfg.hash()
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.out / name

    def need(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise ArtifactError(f"missing artifact {p}; run the producing subcommand first")
        return p

    def check(self, name: str, found: str | None) -> None:
        if found != self.hash:
            raise ConfigError(f"{name} was produced under config hash {found}, current config is {self.hash}")

    def write_json(self, name: str, payload: dict) -> Path:
        p = self.path(name)
        p.write_text(json.dumps({**payload, "config_hash": self.hash}, indent=2, sort_keys=True) + "\n")
        return p

    def read_json(self, name: str) -> dict:
        d = json.loads(self.need(name).read_text())
        self.check(name, d.get("config_hash"))
        return d

    def read_blob(self, name: str, kind: str):
        header, arrays = blob.load(self.need(name), kind)
        self.check(name, header["meta"].get("config_hash"))
        return header["meta"], arrays

    def read_csv(self, name: str) -> list[dict]:
        p = self.need(name)
        self.check(name, R.read_hash(p))
        return R.read_csv(p)


def emit(key: str, value) -> None:
    """One tab-delimited result line on stdout."""
    if isinstance(value, float):
        value = repr(value)
    print(f"{key}\t{value}")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# artifact (de)serialisation


def save_dataset(run: Run, ds: dataio.TabularDataset) -> None:
    blob.save(run.path("dataset.pwb"), "dataset",
              {"X": ds.X, "y": ds.y, "raw": ds.raw, "train": ds.train, "validation": ds.validation},
              {"schema": ds.schema.to_dict(), "dropped": ds.dropped, "config_hash": run.hash})


def load_dataset(run: Run) -> dataio.TabularDataset:
    meta, a = run.read_blob("dataset.pwb", "dataset")
    return dataio.TabularDataset(a["X"], a["y"], dataio.FeatureSchema.from_dict(meta["schema"]),
                                 a["train"], a["validation"], a["raw"], meta["dropped"])


def save_mlp(path: Path, net: MlpParams, kind: str, run: Run) -> None:
    arrays = {}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        arrays[f"w{i}"], arrays[f"b{i}"] = w, b
    blob.save(path, kind, arrays, {"activations": list(net.activations), "config_hash": run.hash})


def load_privatizer(run: Run) -> P.PrivatizerParams:
    params, meta = P.from_bytes(run.need("privatizer.pwb").read_bytes())
    run.check("privatizer.pwb", meta.get("config_hash"))
    return params


def load_history(run: Run) -> TrainHistory:
    rows = run.read_csv("loss_history.csv")
    return TrainHistory([StepRecord(int(r["step"]), float(r["lp"]), float(r["lu"]), float(r["joint"]),
                                    float(r["gradnorm"])) for r in rows])


def load_table(run: Run, ds: dataio.TabularDataset) -> C.CalibrationTable:
    """Rebuild the calibration columns needed for filtering from ``calibration.csv``."""
    rows = run.read_csv("calibration.csv")
    idx = np.array([int(r["index"]) for r in rows], dtype=np.int64)
    if not np.array_equal(idx, ds.train):
        raise ArtifactError("calibration.csv rows do not match the training split")
    eps_final = np.array([float(r["eps_final"]) for r in rows])
    eps_prime = np.array([float(r["eps_prime"]) for r in rows])
    fhat = np.array([float(r["fhat"]) for r in rows])
    hw = np.array([float(r["halfwidth"]) for r in rows])
    with np.errstate(divide="ignore", invalid="ignore"):
        log_f = np.log(fhat)
        rel = np.where(fhat > 0, hw / fhat, np.nan)
    ok = np.isfinite(eps_final)
    t = C.CalibrationTable(idx, eps_prime, eps_prime, eps_prime, eps_final, log_f, rel, ok,
                           np.zeros(len(idx), dtype=bool), run.cfg.alpha)
    t.released = np.array([r["released"] == "1" for r in rows])
    return t


def client_run(run: Run, with_table: bool = True) -> PL.ClientRun:
    ds = load_dataset(run)
    priv = load_privatizer(run)
    density = PL.fit_density(ds, run.cfg)
    table = load_table(run, ds) if with_table else None
    hist = load_history(run) if run.path("loss_history.csv").exists() else TrainHistory()
    return PL.ClientRun(ds, density, priv, None, hist, table)


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(run: Run, args) -> None:
    ds = PL.load_dataset(run.cfg)
    save_dataset(run, ds)
    run.write_json("ingest.json", {"rows": ds.n, "dim": ds.d, "dropped": ds.dropped,
                                   "train": int(ds.train.size), "validation": int(ds.validation.size),
                                   "schema_hash": ds.schema.hash()})
    emit("rows", ds.n)
    emit("dim", ds.d)
    emit("dropped", ds.dropped)


def cmd_train_client(run: Run, args) -> None:
    ds = load_dataset(run)
    density = PL.fit_density(ds, run.cfg)
    priv, util, hist = train_client(ds, PL.train_config(run.cfg), density)
    run.path("privatizer.pwb").write_bytes(P.to_bytes(priv, {"config_hash": run.hash}))
    save_mlp(run.path("utility.pwb"), util, "utility", run)
    hist.to_csv(run.path("loss_history.csv"), run.hash)
    last = hist.records[-1] if len(hist) else None
    emit("steps", len(hist))
    if last:
        emit("lp_first", hist.records[0].lp)
        emit("lp_last", last.lp)
        emit("joint_last", last.joint)


def cmd_calibrate(run: Run, args) -> None:
    ds = load_dataset(run)
    priv = load_privatizer(run)
    density = PL.fit_density(ds, run.cfg)
    table = C.calibrate(priv, density, ds.X_train, index=ds.train)
    _, rep = C.filter_release(table, run.cfg.eps_target, run.cfg.lambda_adj)
    table.to_csv(run.path("calibration.csv"), run.hash)
    d = json.loads(rep.to_json())
    run.write_json("privacy_report.json", d)
    emit("calibrated", len(table))
    emit("released", rep.released_count)
    emit("clamped", rep.clamp_count)
    emit("dataset_eps", rep.dataset_eps if rep.dataset_eps is not None else "none")


def cmd_release(run: Run, args) -> None:
    cr = client_run(run)
    bundle, chosen, rep = PL.make_bundle(cr, run.cfg.eps_target, run.cfg.lambda_adj)
    proto.write_bundle(run.path("release.plb"), bundle)
    proto.write_bundle(run.path("eval.plb"), PL.eval_bundle(cr))
    run.write_json("release.json", {"n": bundle.n, "dim": bundle.dim, "eps_target": run.cfg.eps_target,
                                    "delta": bundle.delta, "lambda_adj": bundle.lambda_adj,
                                    "schema_hash": bundle.schema_hash,
                                    "sha256": _sha256(run.path("release.plb")),
                                    "eval_sha256": _sha256(run.path("eval.plb")),
                                    "released_rows": [int(i) for i in cr.ds.train[chosen]],
                                    "warning": rep.warning})
    if rep.warning:
        print(f"warning: {rep.warning}", file=sys.stderr)
    emit("released", bundle.n)
    emit("bundle", run.path("release.plb"))


_MANIFESTS = {"release.plb": ("release.json", "sha256"), "eval.plb": ("release.json", "eval_sha256"),
              "received.plb": ("received.json", "sha256")}


def _verified_bundle(run: Run, name: str) -> proto.ReleaseBundle:
    """Read a bundle after checking it against the digest in its manifest."""
    manifest, key = _MANIFESTS[name]
    expected = run.read_json(manifest).get(key)
    p = run.need(name)
    if expected != _sha256(p):
        raise ArtifactError(f"{name} does not match the digest recorded in {manifest}")
    return proto.read_bundle(p)


def cmd_send(run: Run, args) -> None:
    if not args.connect:
        raise ConfigError("send needs --connect host:port")
    bundle = _verified_bundle(run, "release.plb")
    t0 = time.perf_counter()
    proto.send_bundle(args.connect, bundle, run.cfg.timeout)
    log.info("sent %d rows in %.3f s", bundle.n, time.perf_counter() - t0)
    emit("sent", bundle.n)
    emit("ack", "yes")


def cmd_serve(run: Run, args) -> None:
    if not args.listen:
        raise ConfigError("serve needs --listen host:port")
    with proto.BundleServer(args.listen, run.cfg.timeout) as srv:
        log.info("listening on %s:%d", *srv.address)
        bundle = srv.serve_once()
        raw = srv.last_bytes
    run.path("received.plb").write_bytes(raw)
    run.write_json("received.json", {"n": bundle.n, "dim": bundle.dim,
                                     "sha256": _sha256(run.path("received.plb"))})
    emit("received", bundle.n)


def cmd_train_server(run: Run, args) -> None:
    name = "received.plb" if run.path("received.plb").exists() else "release.plb"
    bundle = _verified_bundle(run, name)
    test = _verified_bundle(run, "eval.plb")
    kind = run.cfg.server_kind
    if bundle.n == 0:
        run.write_json(f"eval_{kind}.json", {"accuracy": None, "n_train": 0, "n_test": test.n,
                                             "warning": "empty release; no server model trained"})
        emit("accuracy", "none")
        return
    model = S.train_server(bundle, kind, PL.server_config(run.cfg), run.cfg.seed)
    S.save(run.path(f"server_{kind}.pwb"), model, {"config_hash": run.hash})
    ev = S.evaluate(model, test.embeddings, test.labels, bundle.n)
    run.write_json(f"eval_{kind}.json", {**json.loads(ev.to_json()), "holdout_accuracy": model.holdout_accuracy,
                                         "bundle": name})
    emit("kind", kind)
    emit("accuracy", ev.accuracy)


def cmd_attack(run: Run, args) -> None:
    cr = client_run(run)
    chosen = np.flatnonzero(cr.table.released)
    if chosen.size == 0:
        run.write_json("attack.json", {"power": None, "nonprivate": None,
                                       "warning": "nothing released; nothing to attack"})
        emit("attacked", 0)
        return
    rep = PL.attack_run(cr, chosen, run.cfg)
    base = PL.attack_run(cr, chosen, run.cfg, mechanism=P.identity(cr.ds.d))
    run.write_json("attack.json", {"power": json.loads(rep.to_json()), "nonprivate": json.loads(base.to_json())})
    emit("attacked", rep.n)
    emit("power_mse", rep.mse)
    emit("nonprivate_mse", base.mse)
    emit("power_accuracy", "none" if rep.accuracy is None else rep.accuracy)
    emit("nonprivate_accuracy", "none" if base.accuracy is None else base.accuracy)


def cmd_report(run: Run, args) -> None:
    inputs = ["loss_history.csv", "calibration.csv", "privatizer.pwb", "dataset.pwb"]
    hashes = {}
    for name in inputs:
        p = run.need(name)
        if p.suffix == ".pwb":
            hashes[name] = blob.load(p)[0]["meta"].get("config_hash")
        else:
            hashes[name] = R.read_hash(p)
    if len(set(hashes.values())) != 1:
        raise ConfigError("refusing to report over mixed config hashes: "
                          + ", ".join(f"{k}={v}" for k, v in sorted(hashes.items())))
    run.check("inputs", next(iter(hashes.values())))
    cr = client_run(run)
    hist_rows = R.read_csv(run.path("loss_history.csv"))
    R.write_loss_curve(run.path("loss_curve.csv"), hist_rows, run.hash)
    R.write_eps_histogram(run.path("eps_histogram.csv"), cr.table.eps_final, cr.table.released, run.hash)
    sweep = PL.accuracy_sweep(cr, run.cfg)
    R.write_accuracy(run.path("accuracy_vs_eps.csv"), sweep, run.hash)
    R.plot_loss_curve(run.path("loss_curve.png"), hist_rows)
    R.plot_eps_histogram(run.path("eps_histogram.png"), cr.table.eps_final, cr.table.released,
                         run.cfg.eps_target)
    R.plot_accuracy(run.path("accuracy_vs_eps.png"), sweep)
    for r in sweep:
        emit(f"accuracy[{r['kind']},{r['eps_target']:g}]", r["accuracy"])
    for name in ("loss_curve", "eps_histogram", "accuracy_vs_eps"):
        emit("artifact", run.path(f"{name}.csv"))
        emit("figure", run.path(f"{name}.png"))


def cmd_bench(run: Run, args) -> None:
    ds = PL.load_dataset(run.cfg)
    density = PL.fit_density(ds, run.cfg)
    x = ds.X_train[: min(512, ds.X_train.shape[0])]
    t0 = time.perf_counter()
    dens.evaluate(density, x)
    kde_rate = x.shape[0] / (time.perf_counter() - t0)
    steps = min(run.cfg.steps, 50)
    cfg = PL.train_config(run.cfg.replace(steps=steps))
    t0 = time.perf_counter()
    train_client(ds, cfg, density)
    step_rate = steps / (time.perf_counter() - t0)
    emit("kde_points_per_s", round(kde_rate, 1))
    emit("train_steps_per_s", round(step_rate, 2))
    emit("train_rows", density.n)
    (run.out / "bench.json").write_text(json.dumps(
        {"kde_points_per_s": kde_rate, "train_steps_per_s": step_rate, "train_rows": density.n,
         "dim": density.d, "note": "timings vary between runs"}, indent=2, sort_keys=True) + "\n")


def cmd_pipeline(run: Run, args) -> None:
    for fn in (cmd_ingest, cmd_train_client, cmd_calibrate, cmd_release, cmd_train_server, cmd_attack,
               cmd_report):
        log.info("== %s", fn.__name__[4:].replace("_", "-"))
        fn(run, args)


COMMANDS = {
    "ingest": (cmd_ingest, "load and split the dataset"),
    "train-client": (cmd_train_client, "jointly train privatizer and utility network"),
    "calibrate": (cmd_calibrate, "per-sample epsilon calibration and privacy report"),
    "release": (cmd_release, "write the release bundle (.plb)"),
    "send": (cmd_send, "send the release bundle to a listening server"),
    "serve": (cmd_serve, "receive one bundle and store it"),
    "train-server": (cmd_train_server, "train and evaluate a server model on the bundle"),
    "attack": (cmd_attack, "reconstruction attack on released embeddings"),
    "report": (cmd_report, "CSV tables and PNG figures for the run"),
    "bench": (cmd_bench, "time density evaluation and training steps"),
    "pipeline": (cmd_pipeline, "ingest through report, offline"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="powermech", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default="run", help="run directory (default: ./run)")
    common.add_argument("--threads", type=int, help="cap on numeric worker threads")
    common.add_argument("--eps-target", type=float, dest="eps_target")
    common.add_argument("--alpha", type=float)
    common.add_argument("--listen", help="host:port for serve")
    common.add_argument("--connect", help="host:port for send")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, help_) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_)
    return parser


def effective_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    over = {k: getattr(args, k) for k in ("seed", "eps_target", "alpha") if getattr(args, k) is not None}
    return cfg.replace(**over) if over else cfg


def _setup_logging() -> None:
    level = os.environ.get("POWERMECH_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"POWERMECH_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
                        force=True)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        cfg = effective_config(args)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        run = Run(cfg, Path(args.out))
        run.path("config.json").write_text(
            json.dumps({**cfg.to_dict(), "config_hash": run.hash}, indent=2, sort_keys=True) + "\n")
        fn = COMMANDS[args.command][0]
        if args.threads is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                fn(run, args)
        else:
            fn(run, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (dataio.DataError, blob.BlobError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergence, P.Unprivatizable) as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (proto.ProtocolError, proto.BundleError) as e:
        print(f"protocol failure: {e}", file=sys.stderr)
        return EXIT_PROTOCOL
    return 0


if __name__ == "__main__":
    sys.exit(main())
