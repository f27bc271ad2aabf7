"""Command-line entry point: ``mote synth | run | sweep | report``."""
import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .dataset import (
    EmbeddingFormatError,
    SyntheticSpec,
    generate_synthetic,
    load_manifest,
    tasks_from_manifest,
    write_embeddings,
)
from .expert import ExpertError, TrainConfig
from .harness import PRESETS, MetricError, aggregate, preset_tasks, run_protocol
from .inference import InferenceConfig, InferenceError
from .prototypes import PoolError

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_INTERNAL = 0, 2, 3, 4
SWEEP_DIMENSIONS = ("ablation", "gamma", "limit")

# flag name -> TrainConfig field
TRAIN_FLAGS = {
    "lr": "lr0",
    "weight_decay": "weight_decay",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "momentum": "momentum",
    "rank": "rank",
    "mode": "mode",
}


class CliError(Exception):
    def __init__(self, message, exit_code=EXIT_VALIDATION, code="validation"):
        super().__init__(message)
        self.exit_code = exit_code
        self.code = code


def _fail(exc):
    if isinstance(exc, CliError):
        code, kind = exc.exit_code, exc.code
    elif isinstance(exc, (PoolError, MetricError, InferenceError, ExpertError, AssertionError)):
        code, kind = EXIT_INTERNAL, "internal"
    elif isinstance(exc, EmbeddingFormatError):
        code, kind = EXIT_IO, exc.code
    elif isinstance(exc, json.JSONDecodeError):
        code, kind = EXIT_IO, "bad_json"
    elif isinstance(exc, OSError):
        code, kind = EXIT_IO, "io"
    elif isinstance(exc, (ValueError, KeyError)):
        code, kind = EXIT_VALIDATION, "validation"
    else:
        code, kind = EXIT_INTERNAL, "internal"
    err = {"error": kind, "type": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


def _warn(message, **extra):
    print(json.dumps({"warning": message, **extra}, sort_keys=True), file=sys.stderr)


# --------------------------------------------------------------------------
# value parsing


def _parse_gamma(text):
    if text is None or str(text).lower() == "adaptive":
        return None
    try:
        g = float(text)
    except ValueError:
        raise CliError(f"gamma must be a number or 'adaptive', got {text!r}") from None
    if not np.isfinite(g):
        raise CliError("gamma must be finite")
    return g


def _parse_limit(text):
    if text is None or str(text).lower() in ("unlimited", "none"):
        return None
    try:
        m = int(text)
    except ValueError:
        raise CliError(f"limit must be a positive integer or 'unlimited', got {text!r}") from None
    if m < 1:
        raise CliError("limit must be >= 1")
    return m


def _parse_ablation(text):
    try:
        tag = int(text)
    except ValueError:
        raise CliError(f"ablation must be an integer tag, got {text!r}") from None
    if tag not in range(1, 6):
        raise CliError("ablation must be one of 1..5")
    return tag


def _threads():
    raw = os.environ.get("MOTE_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"MOTE_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise CliError("MOTE_THREADS must be >= 0")
    return n


# --------------------------------------------------------------------------
# run specification


def resolve_run_spec(args):
    """Merge flags over the manifest over built-in defaults into a plain dict."""
    manifest = None
    if args.manifest:
        manifest = load_manifest(args.manifest)
    settings = dict(manifest.get("run", {})) if manifest else {}

    train = asdict(TrainConfig())
    for key, value in settings.get("train", {}).items():
        if key not in train:
            raise CliError(f"unknown train setting {key!r} in manifest")
        train[key] = value
    for flag, name in TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            train[name] = value
    TrainConfig(**train)  # validates

    ablation = args.ablation if args.ablation is not None else settings.get("ablation", 5)
    gamma = args.gamma if args.gamma is not None else settings.get("gamma", "adaptive")
    limit = args.limit if args.limit is not None else settings.get("limit", "unlimited")
    seeds = args.seeds if args.seeds else settings.get("seeds", [1993])
    if not seeds:
        raise CliError("seeds must be non-empty")
    merge = args.merge if args.merge is not None else settings.get("merge", "normalized")

    spec = {
        "source": {"manifest": str(Path(args.manifest).resolve())} if manifest else {"preset": args.preset},
        "train": train,
        "ablation": _parse_ablation(ablation),
        "gamma": _parse_gamma(gamma),
        "limit": _parse_limit(limit),
        "merge": merge,
        "seeds": [int(s) for s in seeds],
    }
    if manifest:
        spec["manifest"] = {k: manifest[k] for k in ("name", "base", "increment", "seed", "shuffle", "datasets")}
    return spec


def _load_tasks(spec, seed):
    if "manifest" in spec:
        # class order is fixed by the manifest; the run seed drives training only
        return tasks_from_manifest(spec["manifest"])
    name = spec["source"]["preset"]
    if name not in PRESETS:
        raise CliError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return preset_tasks(name, seed)


def execute_seed(spec, seed, timing_samples=0):
    tasks = _load_tasks(spec, seed)
    dim = tasks[0].train.features.shape[1] if tasks else 0
    if not 1 <= spec["train"]["rank"] < dim:
        raise CliError(f"rank {spec['train']['rank']} must be below the feature dimension {dim}")
    result = run_protocol(
        tasks,
        TrainConfig(**{**spec["train"], "seed": seed}),
        InferenceConfig.ablation(spec["ablation"], spec["gamma"]),
        adapter_limit=spec["limit"],
        seed=seed,
        merge=spec["merge"],
        timing_samples=timing_samples,
    )
    metrics = result.metrics
    metrics.config["run_spec"] = {k: v for k, v in spec.items() if k != "seeds"}
    metrics.config["memory"] = result.memory.as_dict()
    return metrics, result.pool.to_bytes()


def _execute_seed_job(job):
    spec, seed, timing = job
    metrics, pool_bytes = execute_seed(spec, seed, timing)
    return metrics, pool_bytes


def run_seeds(spec, timing_samples=0):
    jobs = [(spec, s, timing_samples) for s in spec["seeds"]]
    workers = min(_threads(), len(jobs))
    if workers <= 1:
        return [_execute_seed_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_execute_seed_job, jobs))


def _summary(metrics):
    d = metrics.as_dict(include_timing=False)
    return {k: d[k] for k in ("final_avg", "af", "last", "last_task", "avg_incremental")} | {"tia": metrics.tia}


def _write_csv(path, rows, header):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(row)


def _aggregate(summaries):
    out = {}
    for key in summaries[0]:
        vals = [s[key] for s in summaries if s[key] is not None]
        out[key] = aggregate(vals) if vals else None
    return out


# --------------------------------------------------------------------------
# commands


def cmd_synth(args):
    spec = SyntheticSpec(
        n_classes=args.classes,
        dim=args.dim,
        samples_per_class=args.per_class,
        rho=args.rho,
        sigma=args.sigma,
        task_drift=args.drift,
        drift_block=args.drift_block,
        seed=args.seed,
        name=Path(args.output).stem,
    )
    ds = generate_synthetic(spec)
    write_embeddings(ds, args.output)
    print(json.dumps({"output": str(args.output), "samples": int(ds.labels.shape[0]), "dim": ds.dim,
                      "spec": asdict(spec)}, sort_keys=True))
    return EXIT_OK


def cmd_run(args):
    spec = resolve_run_spec(args)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    results = run_seeds(spec, args.timing)
    summaries = []
    for seed, (metrics, pool_bytes) in zip(spec["seeds"], results):
        (out / f"metrics_seed{seed}.json").write_text(metrics.to_json(include_timing=args.timing > 0) + "\n")
        snap = json.dumps(metrics.config, sort_keys=True)
        rows = [{**r, "seed": seed, "config": snap} for r in metrics.csv_rows()]
        _write_csv(out / f"stages_seed{seed}.csv", rows, ["seed", "stage", "avg", "af", "tia", "last", "config"])
        if args.save_pool:
            (out / f"pool_seed{seed}.motp").write_bytes(pool_bytes)
        summaries.append(_summary(metrics))
    agg = {"schema_version": 1, "config": spec, "seeds": spec["seeds"],
           "per_seed": summaries, "aggregate": _aggregate(summaries)}
    (out / "aggregate.json").write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
    print(json.dumps({"output": str(out), "aggregate": agg["aggregate"]}, sort_keys=True))
    return EXIT_OK


def _sweep_spec(spec, dimension, value):
    if dimension == "ablation":
        return {**spec, "ablation": _parse_ablation(value)}
    if dimension == "gamma":
        return {**spec, "gamma": _parse_gamma(value)}
    return {**spec, "limit": _parse_limit(value)}


def cmd_sweep(args):
    if args.dimension not in SWEEP_DIMENSIONS:
        raise CliError(f"unknown sweep dimension {args.dimension!r}; choose from {list(SWEEP_DIMENSIONS)}")
    if not args.values:
        raise CliError("sweep needs at least one value")
    base = resolve_run_spec(args)
    variants = [(v, _sweep_spec(base, args.dimension, v)) for v in args.values]
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    rows, table = [], []
    for value, spec in variants:
        results = run_seeds(spec)
        summaries = [_summary(m) for m, _ in results]
        snap = json.dumps(spec, sort_keys=True)
        for seed, s in zip(spec["seeds"], summaries):
            rows.append({"dimension": args.dimension, "value": value, "seed": seed, **s, "config": snap})
        agg = _aggregate(summaries)
        rows.append({"dimension": args.dimension, "value": value, "seed": "mean",
                     **{k: (None if a is None else a["mean"]) for k, a in agg.items()}, "config": snap})
        table.append({"value": value, "aggregate": agg, "config": spec})
    header = ["dimension", "value", "seed", "final_avg", "af", "tia", "last", "last_task",
              "avg_incremental", "config"]
    _write_csv(out / f"sweep_{args.dimension}.csv", rows, header)
    (out / f"sweep_{args.dimension}.json").write_text(
        json.dumps({"schema_version": 1, "dimension": args.dimension, "rows": table}, indent=2, sort_keys=True)
        + "\n")
    print(json.dumps({"output": str(out), "values": list(args.values)}, sort_keys=True))
    return EXIT_OK


def _fmt(stats):
    if stats is None:
        return "-"
    return f"{100 * stats['mean']:.2f}±{100 * stats['std']:.2f}"


def _load_metrics_dir(path):
    found = []
    for f in sorted(Path(path).glob("*.json")):
        try:
            d = json.loads(f.read_text())
        except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
            _warn("skipping unreadable metrics file", file=str(f), reason=str(exc))
            continue
        if not isinstance(d, dict) or "matrix" not in d:
            continue  # aggregate files and other outputs
        try:
            found.append((f.name, {
                "final_avg": float(d["final_avg"]),
                "af": None if d["af"] is None else float(d["af"]),
                "tia": float(d["tia_curve"][-1]),
                "last": float(d["last_union"]),
                "avg_curve": [float(v) for v in d["avg_curve"]],
                "tia_curve": [float(v) for v in d["tia_curve"]],
                "seed": d.get("seed"),
            }))
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            _warn("skipping malformed metrics file", file=str(f), reason=str(exc))
    return found


def cmd_report(args):
    if not Path(args.metrics_dir).is_dir():
        raise CliError(f"{args.metrics_dir} is not a directory", EXIT_IO, "io")
    runs = _load_metrics_dir(args.metrics_dir)
    if not runs:
        raise CliError(f"no metrics found in {args.metrics_dir}", EXIT_IO, "no_metrics")
    cols = ("final_avg", "af", "tia", "last")
    names = {"final_avg": "Avg", "af": "AF", "tia": "TIA", "last": "Last"}
    lines = [f"{'run':<28}" + "".join(f"{names[c]:>14}" for c in cols)]
    for name, r in runs:
        cells = ["-" if r[c] is None else f"{100 * r[c]:.2f}" for c in cols]
        lines.append(f"{name:<28}" + "".join(f"{v:>14}" for v in cells))
    if len(runs) > 1:
        stats = {c: (aggregate([r[c] for _, r in runs if r[c] is not None])
                     if any(r[c] is not None for _, r in runs) else None) for c in cols}
        lines.append(f"{'mean±std':<28}" + "".join(f"{_fmt(stats[c]):>14}" for c in cols))
    print("\n".join(lines))
    rows = []
    for name, r in runs:
        for t, (a, ti) in enumerate(zip(r["avg_curve"], r["tia_curve"])):
            rows.append({"run": name, "seed": r["seed"], "stage": t + 1, "avg": a, "tia": ti})
    out = Path(args.output) if args.output else Path(args.metrics_dir) / "stage_curves.csv"
    _write_csv(out, rows, ["run", "seed", "stage", "avg", "tia"])
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _add_run_flags(p):
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest", help="protocol manifest JSON")
    src.add_argument("--preset", choices=sorted(PRESETS), help="built-in synthetic protocol")
    p.add_argument("--ablation", help="inference variant 1..5 (default 5)")
    p.add_argument("--gamma", help="number or 'adaptive' (default)")
    p.add_argument("--limit", help="max adapters M, or 'unlimited' (default)")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--merge", choices=("normalized", "softmax", "raw"))
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--momentum", type=float)
    p.add_argument("--rank", type=int)
    p.add_argument("--mode", choices=("seq", "par"))
    p.add_argument("-o", "--output", required=True, help="output directory")


def build_parser():
    parser = _Parser(prog="mote", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic embedding file")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--rho", type=float, default=10.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--drift", type=float, default=0.0)
    p.add_argument("--drift-block", type=int, default=0)
    p.add_argument("--seed", type=int, default=1993)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="train and evaluate a protocol for one or more seeds")
    _add_run_flags(p)
    p.add_argument("--save-pool", action="store_true", help="also write the final prototype pool")
    p.add_argument("--timing", type=int, default=0, metavar="N", help="time N single-sample predictions")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="compare values of one inference or capacity setting")
    p.add_argument("dimension", help="ablation | gamma | limit")
    p.add_argument("--values", nargs="*", default=[])
    _add_run_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="summarize a directory of metrics files")
    p.add_argument("metrics_dir")
    p.add_argument("-o", "--output", help="stage-curve CSV path")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
