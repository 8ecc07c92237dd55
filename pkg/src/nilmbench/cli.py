"""Command-line entry point: ``nilmbench <subcommand> ...``.

Every subcommand writes a JSON run manifest next to its outputs, also when
it fails (with an ``error`` field). Exit status is 0 only on full success.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import signal
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import baseline as bl
from . import config as cfg
from . import dataio as dio
from . import metrics as mt
from . import model as mdl
from . import pipeline as pl
from . import sim

log = logging.getLogger("nilmbench")


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    subcommand: str
    argv: list
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    config_digest: str | None = None
    seed: int | None = None
    tool_version: str = __version__
    started_at: float = field(default_factory=time.time)
    wall_time_s: float | None = None
    error: str | None = None

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(vars(self), indent=2, default=str) + "\n")
        return path


# ------------------------------------------------------------------ helpers


def _existing(path, what="input"):
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} file not found: {p}")
    return p


def _write(path, text):
    Path(path).write_text(text if text.endswith("\n") else text + "\n")
    return str(path)


def default_max_power(meta: dio.DatasetMeta):
    rated = [p for p in meta.rated_powers if math.isfinite(p) and p > 0]
    return 5.0 * sum(rated) if rated else math.inf


def prepare(ds: dio.Dataset, grid_interval, max_power=None):
    """Clean (interpolating bad rows) and align onto the model grid."""
    mp = max_power or default_max_power(ds.meta)
    ds, rep = dio.clean(ds, mp)
    if rep.spurious_total:
        log.warning("repaired %d spurious rows", rep.spurious_total)
    return dio.align_to_grid(ds, grid_interval), rep


def _names(ds, n):
    names = list(ds.meta.channel_names)
    return names if len(names) == n else [f"M{k + 1}" for k in range(n)]


def write_report_set(report_dir: Path, stem: str, rep: mt.MetricReport, outputs: dict):
    outputs[f"{stem}_text"] = _write(report_dir / f"{stem}.txt", rep.to_text())
    outputs[f"{stem}_csv"] = _write(report_dir / f"{stem}.csv", rep.to_csv())
    outputs[f"{stem}_json"] = str(rep.save(report_dir / f"{stem}.json"))


def write_breakdowns(report_dir: Path, actual, predicted, names, thr, m, outputs, count_channels=None):
    from . import charts

    by_k = mt.breakdown_by_active_count(actual, predicted, thr, m, names, count_channels)
    by_state = mt.breakdown_by_state(actual, predicted, thr, m, names)
    lines = ["k,n_samples," + ",".join(f"mae_{n}" for n in names) + ",mae_avg,low_confidence"]
    for row in mt.active_count_table(by_k, "mae"):
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    outputs["active_count_csv"] = _write(report_dir / "breakdown_active_count.csv", "\n".join(lines))
    lines = ["appliance,state,n_samples,mae,sae,sae_pct,nde,accuracy,low_confidence"]
    for name, buckets in by_state.items():
        for lab, b in buckets.items():
            lines.append(",".join([name, lab, str(b.n_samples), repr(b.mae), repr(b.sae), repr(b.sae_pct),
                                   repr(b.nde), repr(b.accuracy), str(b.low_confidence)]))
    outputs["state_csv"] = _write(report_dir / "breakdown_state.csv", "\n".join(lines))
    outputs["breakdown_json"] = _write(
        report_dir / "breakdown.json", json.dumps(mt.breakdown_to_json(by_k, by_state), indent=2)
    )
    outputs["active_count_svg"] = str(charts.active_count_chart(by_k, names, report_dir / "active_count_mae.svg"))
    outputs["state_svg"] = str(charts.state_chart(by_state, report_dir / "state_mae.svg"))
    return by_k, by_state


# -------------------------------------------------------------- subcommands


def cmd_simulate(args, man: RunManifest):
    conf, schedule = sim.load_sim_config(_existing(args.config, "config"), args.seed)
    man.inputs["config"] = args.config
    man.config_digest, man.seed = conf.digest(), conf.seed
    ds = sim.simulate(conf, schedule)
    n = dio.write_csv(ds, args.out)
    man.outputs.update(dataset=args.out, meta=str(dio.meta_path(args.out)))
    print(f"wrote {n} samples to {args.out}")


def cmd_validate(args, man: RunManifest):
    man.inputs["dataset"] = args.input
    ds, rr = dio.read_csv_with_report(_existing(args.input))
    mp = args.max_power or default_max_power(ds.meta)
    _, rep = dio.clean(ds, mp, interpolate=True)
    text = (f"rows read: {rr.rows_read}\nrows rejected: {rr.rows_rejected}\n"
            f"max_power: {mp}\n" + rep.to_text())
    if args.report_dir:
        d = Path(args.report_dir)
        d.mkdir(parents=True, exist_ok=True)
        man.outputs["clean_text"] = _write(d / "clean_report.txt", text)
        man.outputs["clean_json"] = _write(
            d / "clean_report.json", json.dumps({"read": vars(rr), "clean": rep.to_json(), "max_power": mp})
        )
    print(text)


def load_split_spec(path, ds: dio.Dataset) -> dio.SplitSpec:
    """JSON with explicit ``train/val/test`` interval lists or ``fractions``."""
    try:
        obj = json.loads(Path(path).read_text())
    except ValueError as exc:
        raise cfg.ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if "fractions" in obj:
        return dio.boundaries_for_fractions(ds.timestamp, obj["fractions"])
    return dio.SplitSpec.from_json(obj)


def cmd_split(args, man: RunManifest):
    man.inputs.update(dataset=args.input, spec=args.spec)
    ds = dio.read_csv(_existing(args.input))
    spec = load_split_spec(_existing(args.spec, "split spec"), ds)
    man.config_digest = cfg.digest(spec.to_json())
    parts = dio.split_by_time(ds, spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in dio.SPLIT_NAMES:
        path = out / f"{name}.csv"
        dio.write_csv(getattr(parts, name), path)
        man.outputs[name] = str(path)
    man.outputs["report_text"] = _write(out / "split_report.txt", parts.report.to_text(spec))
    man.outputs["report_json"] = _write(
        out / "split_report.json",
        json.dumps(parts.report.to_json() | {"spec": spec.to_json(),
                                             "durations_hours": parts.report.durations_hours(spec)}, indent=2),
    )
    print(parts.report.to_text(spec))


def cmd_train(args, man: RunManifest):
    man.inputs.update(train=args.train, val=args.val, config=args.config)
    conf = mdl.load_train_config(_existing(args.config, "config"))
    if args.epochs is not None:
        conf = mdl.TrainConfig.from_json(conf.to_json() | {"epochs": args.epochs})
    man.config_digest, man.seed = conf.digest(), conf.seed
    tr, _ = prepare(dio.read_csv(_existing(args.train)), conf.grid_interval)
    va, _ = prepare(dio.read_csv(_existing(args.val)), conf.grid_interval)

    def progress(rec):
        print(f"epoch {rec.epoch}: loss {rec.train_loss:.5f} val MAE {rec.val_mae_mean:.3f} W", flush=True)

    params, history = mdl.train(tr, va, conf, progress)
    digest = mdl.save_model(params, args.out)
    hist = Path(args.out).with_suffix(".history.csv")
    _write(hist, mdl.history_csv(history, _names(tr, conf.n_appliances)))
    man.outputs.update(model=args.out, history=str(hist), model_digest=digest)
    print(f"saved model {digest[:16]} to {args.out}")


def _score(args, man, actual, predicted, names):
    d = Path(args.report_dir)
    d.mkdir(parents=True, exist_ok=True)
    rep = mt.report(actual, predicted, min(args.subhorizon, actual.shape[1]), args.on_threshold, names)
    write_report_set(d, "report", rep, man.outputs)
    write_breakdowns(d, actual, predicted, names, args.on_threshold, args.subhorizon, man.outputs,
                     args.count_channels)
    print(rep.to_text())
    return rep


def cmd_eval(args, man: RunManifest):
    man.inputs["test"] = args.test
    test = dio.read_csv(_existing(args.test))
    if args.store:
        man.inputs["store"] = args.store
        truth, _ = prepare(test, args.grid_interval)
        recs = pl.read_records(_existing(args.store, "store"))
        names = _names(truth, truth.n_channels)
        rep, join = pl.evaluate_live(recs, truth, args.subhorizon, args.on_threshold, names)
        index = {t: i for i, t in enumerate(truth.timestamp.tolist())}
        pairs = [(index[r.timestamp], r.power_w) for r in recs if r.timestamp in index]
        actual = truth.line_p[[i for i, _ in pairs]].T
        predicted = np.asarray([p for _, p in pairs]).T
        man.outputs["join"] = vars(join) | {"coverage": join.coverage}
        print(f"joined {join.matched}/{join.records} records ({100 * join.coverage:.1f}%)")
    else:
        man.inputs["model"] = args.model
        params = mdl.load_model(_existing(args.model, "model"))
        man.config_digest, man.seed = params.config.digest(), params.config.seed
        truth, _ = prepare(test, params.config.grid_interval)
        if truth.n_channels != params.config.n_appliances:
            raise cfg.ConfigError(
                f"model predicts {params.config.n_appliances} appliances, test set has {truth.n_channels} channels"
            )
        predicted, _ = mdl.predict_tiles(params, truth.features())
        actual = truth.line_p.T
        names = _names(truth, params.config.n_appliances)
    _score(args, man, actual, predicted, names)


def cmd_baseline(args, man: RunManifest):
    man.inputs.update(test=args.test, library=args.lib)
    lib = bl.load_library(_existing(args.lib, "library"))
    man.config_digest = cfg.digest(vars(lib))
    truth, _ = prepare(dio.read_csv(_existing(args.test)), args.grid_interval)
    if truth.n_channels != lib.n_channels:
        raise cfg.ConfigError(f"library has {lib.n_channels} channels, dataset has {truth.n_channels}")
    predicted = bl.disaggregate(truth.main_p, lib)
    _score(args, man, truth.line_p.T, predicted, list(lib.names))


def cmd_serve(args, man: RunManifest):
    man.inputs.update(model=args.model, source=args.source)
    params = mdl.load_model(_existing(args.model, "model"))
    man.config_digest, man.seed = params.config.digest(), params.config.seed
    extra = {"port": args.port, "max_power": args.max_power or 0.0}
    store = pl.StoreConfig(args.store, args.format) if args.store else None
    src_path = _existing(args.source, "source")
    if src_path.suffix == ".csv":
        source = pl.SourceConfig("replay", path=str(src_path), pace=args.pace, interval=args.interval)
    else:
        source, file_store, file_extra = pl.load_serve_config(src_path)
        if source is None:
            raise cfg.ConfigError(f"{src_path}: missing [source] section")
        store = store or file_store
        extra = {k: (extra[k] if extra[k] not in (None, 0.0) else v) for k, v in file_extra.items()}
    store, port = pl.apply_env_overrides(store, extra["port"] if extra["port"] is not None else 8000)
    if store is None:
        raise UsageError("no store path: pass --store, a [store] section or NILMBENCH_STORE")
    man.outputs["store"] = store.path
    names = None
    if source.mode == "replay":
        meta = dio.read_csv(source.path).meta
        if len(meta.channel_names) == params.config.n_appliances:
            names = meta.channel_names
    session = pl.Session(source, params, store, port, host=args.host, max_power=extra["max_power"] or None,
                         names=names, linger=args.linger).start()
    print(f"serving on http://{args.host}:{session.port} (store {store.path})", flush=True)
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: session.stop())
    while not session.done.wait(0.2):
        pass
    session.close()
    summary = session.summary.to_json()
    man.outputs["summary"] = summary
    print(json.dumps(summary, indent=2))
    if session.summary.error:
        raise RuntimeError(session.summary.error)


def cmd_compare(args, man: RunManifest):
    from . import charts

    man.inputs.update(before=args.before, after=args.after)
    before = mt.MetricReport.load(_existing(args.before, "report"))
    after = mt.MetricReport.load(_existing(args.after, "report"))
    table = mt.compare_reports(before, after)
    if args.out_dir:
        d = Path(args.out_dir)
        d.mkdir(parents=True, exist_ok=True)
        man.outputs["drift_csv"] = _write(d / "drift.csv", table.to_csv())
        man.outputs["drift_text"] = _write(d / "drift.txt", table.to_text())
        man.outputs["drift_svg"] = str(charts.drift_chart(table, d / "drift.svg"))
    print(table.to_text())


# -------------------------------------------------------------------- parser


def _manifest_path(args):
    if args.manifest:
        return Path(args.manifest)
    cmd = args.command
    if cmd in ("simulate", "train"):
        return Path(args.out + ".manifest.json")
    if cmd == "split":
        return Path(args.out_dir) / "manifest.json"
    if cmd in ("eval", "baseline"):
        return Path(args.report_dir) / "manifest.json"
    if cmd == "validate":
        return Path(args.report_dir) / "manifest.json" if args.report_dir else Path(args.input + ".validate.manifest.json")
    if cmd == "serve":
        return Path((args.store or "serve") + ".manifest.json")
    if cmd == "compare":
        return Path(args.out_dir) / "manifest.json" if args.out_dir else Path(args.after).with_suffix(".compare.manifest.json")
    raise AssertionError(cmd)


def _add_scoring(p):
    p.add_argument("--report-dir", required=True)
    p.add_argument("--on-threshold", type=float, default=mt.ON_THRESHOLD)
    p.add_argument("--subhorizon", type=int, default=mt.DEFAULT_SUBHORIZON, help="SAE sub-horizon in samples")
    p.add_argument("--grid-interval", type=float, default=5.0)
    p.add_argument("--count-channels", type=lambda s: [int(x) for x in s.split(",")],
                   help="comma-separated channel indices counted for the active-count breakdown")


def build_parser():
    ap = argparse.ArgumentParser(prog="nilmbench", description="Load disaggregation workbench")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--manifest", help="manifest path (default: beside the outputs)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("validate", help="check a dataset and report spurious rows")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--max-power", type=float)
    p.add_argument("--report-dir")

    p = sub.add_parser("split", help="split a dataset by time ranges")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("train", help="train the sequence model")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, help="override the configured epoch count")

    p = sub.add_parser("eval", help="score a model (or stored live predictions) on a test set")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--store", help="prediction store from 'serve' instead of a model")
    p.add_argument("--test", required=True)
    _add_scoring(p)

    p = sub.add_parser("baseline", help="score the combinatorial baseline on a test set")
    p.add_argument("--test", required=True)
    p.add_argument("--lib", required=True)
    _add_scoring(p)

    p = sub.add_parser("serve", help="stream samples through a model and serve results over HTTP")
    p.add_argument("--model", required=True)
    p.add_argument("--source", required=True, help="CSV to replay, or a config file with [source]/[store]")
    p.add_argument("--store")
    p.add_argument("--format", choices=("jsonl", "csv"), default="jsonl")
    p.add_argument("--port", type=int)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--pace", choices=("realtime", "fixed", "max_speed"), default="max_speed")
    p.add_argument("--interval", type=float, default=5.0, help="seconds between samples for --pace fixed")
    p.add_argument("--max-power", type=float)
    p.add_argument("--linger", action="store_true", help="keep serving after a replay ends")

    p = sub.add_parser("compare", help="drift table between two metric reports")
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    p.add_argument("--out-dir")
    return ap


COMMANDS = {
    "simulate": cmd_simulate, "validate": cmd_validate, "split": cmd_split, "train": cmd_train,
    "eval": cmd_eval, "baseline": cmd_baseline, "serve": cmd_serve, "compare": cmd_compare,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    man = RunManifest(args.command, argv)
    t0 = time.perf_counter()
    status = 0
    try:
        COMMANDS[args.command](args, man)
    except (OSError, ValueError, RuntimeError, KeyError, UsageError) as exc:
        man.error = f"{type(exc).__name__}: {exc}"
        print(f"nilmbench {args.command}: error: {exc}", file=sys.stderr)
        status = 1
    man.wall_time_s = time.perf_counter() - t0
    try:
        man.write(_manifest_path(args))
    except OSError as exc:
        print(f"nilmbench: cannot write manifest: {exc}", file=sys.stderr)
        status = status or 1
    return status


if __name__ == "__main__":
    sys.exit(main())
