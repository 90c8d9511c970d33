"""Command line: calibrate, compile, train, eval, report, bench.

Every command writes plain JSON or TSV documents; ``report`` also renders PNG
figures next to them.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .calibration import CalibrationConfig, collect_stats
from .datasets import MORTALITY_ROWS, DatasetError, load_dataset
from .graph_ir import GraphError, ModelSpec, build_training_graph, serialize
from .trainer import (
    TrainConfig,
    TrainingError,
    compile_model,
    epoch_latency_s,
    evaluate,
    prepare,
    train,
)
from .tfhe_sim import CostModel, SimulationError, default_threads, estimate_cost, wgc_rate

# throughput figures quoted for other encrypted-training systems and for the
# reported one-hidden-layer breast-cancer run
BASELINES = [
    {"system": "BGV+TFHE scheme switching", "params": 2720, "batch": 60, "latency_s": 144.0, "threads": 48},
    {"system": "TFHE quantized (reported)", "params": 930, "batch": 8, "latency_s": 149.0, "threads": 16},
    {"system": "BGV", "wgc_s_t": 0.4},
]
REPORTED_BATCH_S = {
    ("breast-cancer", "logistic"): 11.8,
    ("breast-cancer", "mlp"): 149.0,
    ("mortality", "logistic"): 15.8,
    ("mortality", "mlp"): 45.0,
}


class CliError(Exception):
    pass


def _lr_exp(lr: float) -> int:
    if lr <= 0:
        raise CliError("--lr must be positive")
    e = math.log2(lr)
    if abs(e - round(e)) > 1e-12:
        raise CliError(f"--lr must be a power of two, got {lr}")
    return int(round(e))


def _hidden(text: Optional[str]) -> List[int]:
    if not text:
        return []
    try:
        return [int(h) for h in text.split(",")]
    except ValueError:
        raise CliError(f"--hidden takes comma-separated integers, got {text!r}") from None


def _model_args(p: argparse.ArgumentParser, d_required: bool = True) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--model", choices=("logistic", "mlp"), default="logistic")
    g.add_argument("--d", type=int, required=d_required, default=None, help="feature count")
    g.add_argument("--hidden", default=None, help="hidden layer sizes, e.g. 30")
    g.add_argument("--activation", choices=("sigmoid", "relu"), default=None)
    g.add_argument("--batch", type=int, default=8)
    g.add_argument("--lr", type=float, default=1.0, help="learning rate, a power of two")
    g.add_argument("--bits", type=int, default=4)
    g.add_argument("--rounding", choices=("truncate", "nearest"), default="truncate")
    g.add_argument("--calib-batches", type=int, default=64)
    g.add_argument("--calib-seed", type=int, default=0)


def _spec(args, d: Optional[int] = None) -> ModelSpec:
    hidden = _hidden(args.hidden)
    if args.model == "logistic" and hidden:
        raise CliError("--hidden requires --model mlp")
    if args.model == "logistic" and args.activation not in (None, "sigmoid"):
        raise CliError("--activation applies to MLP hidden layers only")
    if args.model == "mlp" and not hidden:
        raise CliError("--model mlp needs --hidden")
    if args.d is not None and d is not None and args.d != d:
        raise CliError(f"--d {args.d} contradicts the dataset's {d} features")
    if not 2 <= args.bits <= 8:
        raise CliError("--bits must be between 2 and 8")
    act = args.activation or ("relu" if args.model == "mlp" else "sigmoid")
    return ModelSpec(args.model, args.d if args.d is not None else d, hidden, act, args.batch, _lr_exp(args.lr))


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _emit(doc) -> None:
    print(json.dumps(doc, indent=1))


# commands ---------------------------------------------------------------------------


def cmd_calibrate(args) -> int:
    spec = _spec(args)
    g = build_training_graph(spec)
    stats = collect_stats(g, CalibrationConfig(args.calib_batches, args.calib_seed))
    text = stats.to_json()
    if args.out:
        _write(Path(args.out), text + "\n")
        _emit({"stats": args.out, "edges": len(stats.edges)})
    else:
        print(text)
    return 0


def cmd_compile(args) -> int:
    spec = _spec(args)
    m = compile_model(spec, args.bits, args.rounding, CalibrationConfig(args.calib_batches, args.calib_seed))
    model = CostModel(threads=args.threads)
    cost = estimate_cost(m.circuit, model, refresh_params=spec.n_params if args.refresh_weights else 0, refresh_bits=args.bits)
    out = Path(args.out_dir)
    paths = {
        "circuit": _write(out / "circuit.json", m.circuit.dump() + "\n"),
        "cost": _write(out / "cost.json", cost.to_json(wgc_s_t=cost.wgc(spec.n_weights, spec.batch)) + "\n"),
        "graph": _write(out / "graph.json", serialize(m.int_graph) + "\n"),
        "tables": _write(out / "tables.json", json.dumps({k: t.to_dict() for k, t in m.circuit.tables.items()}) + "\n"),
    }
    _emit(
        {
            "spec": spec.to_dict(),
            "partitions": len(m.circuit.partitions),
            "pbs_counts": {str(k): v for k, v in m.circuit.pbs_counts().items()},
            "total_pbs": m.circuit.total_pbs(),
            "rounding_pbs": m.circuit.rounding_pbs(),
            "max_w_acc": m.circuit.max_w_acc(),
            "param_sets": len(m.circuit.param_sets),
            "latency_s": cost.total_latency_s,
            "artifacts": {k: str(v) for k, v in paths.items()},
        }
    )
    return 0


def _manifest(args, spec, cfg, ds, out: Path, artifacts) -> dict:
    return {
        "tool": "fhetrain",
        "version": __version__,
        "command": "train",
        "spec": spec.to_dict(),
        "config": cfg.to_dict(),
        "seeds": {"split_init_shuffle": cfg.seed, "calibration": cfg.calib_seed},
        "dataset": {
            "name": args.dataset,
            "label_column": args.label_column,
            "positive": args.positive,
            "subsample": args.subsample,
            "rows": ds.n,
            "features": ds.d,
            "sha256": ds.digest(),
            "provenance": ds.provenance,
        },
        "threads": args.threads,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
    }


def _load(name, label_column, positive, subsample, seed):
    ds = load_dataset(name, label_column, positive, seed)
    if subsample:
        ds = ds.stratified_subsample(subsample, seed)
    return ds


def cmd_train(args) -> int:
    if args.replay:
        man = json.loads(Path(args.replay).read_text())
        given = [f for f in ("dataset", "epochs", "seed", "hidden", "d") if getattr(args, f) is not None]
        if given:
            raise CliError(f"--replay takes everything from the manifest; drop --{', --'.join(given)}")
        dm = man["dataset"]
        ds = _load(dm["name"], dm["label_column"], dm["positive"], dm["subsample"], man["config"]["seed"])
        if ds.digest() != dm["sha256"]:
            raise CliError("dataset contents differ from the manifest's hash")
        spec = ModelSpec.from_dict(man["spec"])
        cfg = TrainConfig.from_dict(man["config"])
        args.dataset, args.label_column, args.positive, args.subsample = dm["name"], dm["label_column"], dm["positive"], dm["subsample"]
        args.threads = man.get("threads", args.threads)
    else:
        if args.dataset is None:
            raise CliError("train needs --dataset (or --replay)")
        seed = 0 if args.seed is None else args.seed
        ds = _load(args.dataset, args.label_column, args.positive, args.subsample, seed)
        spec = _spec(args, ds.d)
        patience = None if args.patience == 0 else args.patience
        cfg = TrainConfig(
            epochs=10 if args.epochs is None else args.epochs,
            batch=spec.batch,
            lr_exp=spec.lr_exp,
            bits=args.bits,
            seed=seed,
            patience=patience,
            shuffle=not args.no_shuffle,
            rounding=args.rounding,
            backend=args.backend,
            calib_batches=args.calib_batches,
            calib_seed=args.calib_seed,
            scaling=args.scaling,
            refresh_weights=args.refresh_weights,
        )
    report = train(ds, spec, cfg, cost_model=CostModel(threads=args.threads))
    out = Path(args.out_dir)
    artifacts = {"report": out / "report.json", "curves": out / "curves.tsv", "manifest": out / "manifest.json"}
    _write(artifacts["report"], report.to_json() + "\n")
    _write(artifacts["curves"], report.to_tsv())
    _write(artifacts["manifest"], json.dumps(_manifest(args, spec, cfg, ds, out, artifacts), indent=1) + "\n")
    summary = {
        "dataset": ds.provenance,
        "batches": report.batches,
        "quantized_accuracy": report.quantized.final_accuracy,
        "fp32_accuracy": report.reference.final_accuracy,
        "batch_latency_s": report.batch_cost.total_latency_s,
        "epoch_latency_h": epoch_latency_s(report.batch_cost, ds.n, spec.batch) / 3600,
        "overflows": report.overflows,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
    }
    _emit(summary)
    return 0


def cmd_eval(args) -> int:
    doc = json.loads(Path(args.report).read_text())
    spec = ModelSpec.from_dict(doc["spec"])
    cfg = TrainConfig.from_dict(doc["config"])
    ds = _load(args.dataset, args.label_column, args.positive, args.subsample, cfg.seed)
    if ds.d != spec.d:
        raise CliError(f"dataset has {ds.d} features, report's model expects {spec.d}")
    split = prepare(ds, cfg)
    X, y = (split.X_test, split.y_test) if args.split == "test" else (split.X_train, split.y_train)
    out = {"split": args.split, "examples": int(len(y))}
    for key in ("quantized", "reference"):
        if key in doc:
            w = {k: np.asarray(v) for k, v in doc[key]["weights"].items()}
            out[key] = evaluate(w, X, y, spec)
    _emit(out)
    return 0


def cmd_report(args) -> int:
    from .plotting import plot_curves, plot_pbs_counts

    doc = json.loads(Path(args.report).read_text())
    out = Path(args.out_dir)
    rows = ["metric\tquantized\tfp32"]
    q, r = doc.get("quantized", {}), doc.get("reference", {})
    for m in ("initial_accuracy", "final_accuracy", "last_accuracy", "best_batch", "batches"):
        rows.append(f"{m}\t{q.get(m, '')}\t{r.get(m, '')}")
    files = {"summary": _write(out / "summary.tsv", "\n".join(rows) + "\n")}
    tsv = ["batch\tquantized_accuracy\tfp32_accuracy"]
    qc = [q.get("initial_accuracy")] + q.get("curve", []) if q else []
    rc = [r.get("initial_accuracy")] + r.get("curve", []) if r else []
    for i in range(max(len(qc), len(rc))):
        tsv.append(f"{i}\t{qc[i] if i < len(qc) else ''}\t{rc[i] if i < len(rc) else ''}")
    files["curves"] = _write(out / "curves.tsv", "\n".join(tsv) + "\n")
    files["curves_png"] = plot_curves(doc, out / "curves.png")
    if "batch_cost" in doc:
        cost_rows = ["width\ttable_pbs\trounding_pbs"]
        bc = doc["batch_cost"]
        widths = sorted({int(k) for k in bc["pbs_by_width"]} | {int(k) for k in bc["rounding_pbs_by_width"]})
        for w in widths:
            cost_rows.append(f"{w}\t{bc['pbs_by_width'].get(str(w), 0)}\t{bc['rounding_pbs_by_width'].get(str(w), 0)}")
        files["cost"] = _write(out / "pbs_by_width.tsv", "\n".join(cost_rows) + "\n")
        files["cost_png"] = plot_pbs_counts(bc, out / "pbs_by_width.png")
    _emit({k: str(v) for k, v in files.items()})
    return 0


BENCH_MODELS = [
    ("breast-cancer", ModelSpec("logistic", 30, (), "sigmoid", 8, 0), 569),
    ("breast-cancer", ModelSpec("mlp", 30, (30,), "relu", 8, 0), 569),
    ("mortality", ModelSpec("logistic", 10, (), "sigmoid", 8, 0), MORTALITY_ROWS),
    ("mortality", ModelSpec("mlp", 10, (15,), "relu", 8, 0), MORTALITY_ROWS),
]


def cmd_bench(args) -> int:
    model = CostModel(threads=args.threads)
    lines = ["system\tdataset\tmodel\tparams\tbatch\tthreads\tbatch_latency_s\treported_batch_latency_s\tepoch_latency_h\twgc_s_t"]
    for b in BASELINES:
        if "wgc_s_t" in b:
            rate = b["wgc_s_t"]
            lines.append(f"{b['system']}\t\t\t\t\t\t\t\t\t{rate:.2f}")
        else:
            rate = wgc_rate(b["params"], b["batch"], b["latency_s"], b["threads"])
            lines.append(f"{b['system']}\t\t\t{b['params']}\t{b['batch']}\t{b['threads']}\t{b['latency_s']}\t\t\t{rate:.2f}")
    for name, spec, rows in BENCH_MODELS:
        m = compile_model(spec, args.bits, args.rounding)
        cost = estimate_cost(m.circuit, model)
        rate = cost.wgc(spec.n_weights, spec.batch)
        reported = REPORTED_BATCH_S.get((name, spec.kind), "")
        epoch_h = epoch_latency_s(cost, rows, spec.batch) / 3600
        label = spec.kind if not spec.hidden else f"mlp({spec.hidden[0]},{spec.activation})"
        lines.append(
            f"simulated cost model\t{name}\t{label}\t{spec.n_weights}\t{spec.batch}\t{model.threads}\t"
            f"{cost.total_latency_s:.2f}\t{reported}\t{epoch_h:.2f}\t{rate:.2f}"
        )
    text = "\n".join(lines) + "\n"
    if args.out:
        _write(Path(args.out), text)
    print(text, end="")
    return 0


# parser -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fhetrain", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", help="record per-edge ranges of the float training graph")
    _model_args(c)
    c.add_argument("--out", help="stats document path (stdout if omitted)")
    c.set_defaults(func=cmd_calibrate)

    c = sub.add_parser("compile", help="compile a training graph to a circuit and estimate its cost")
    _model_args(c)
    c.add_argument("--out-dir", default="build")
    c.add_argument("--threads", type=int, default=None)
    c.add_argument("--refresh-weights", action="store_true", help="cost weight bootstrapping instead of re-encryption")
    c.set_defaults(func=cmd_compile)

    c = sub.add_parser("train", help="train through the simulated circuit with a float reference")
    _model_args(c, d_required=False)
    c.add_argument("--dataset", help="breast-cancer, mortality-synthetic, synthetic:<kind>:<n>:<d> or a CSV path")
    c.add_argument("--label-column", default=None)
    c.add_argument("--positive", default=None, help="label value mapped to class 1")
    c.add_argument("--subsample", type=int, default=None, help="stratified subsample size")
    c.add_argument("--epochs", type=int, default=None)
    c.add_argument("--seed", type=int, default=None)
    c.add_argument("--patience", type=int, default=200, help="early-stop patience in batches; 0 disables")
    c.add_argument("--no-shuffle", action="store_true")
    c.add_argument("--backend", choices=("circuit", "graph"), default="circuit")
    c.add_argument("--scaling", choices=("percentile", "minmax"), default="percentile")
    c.add_argument("--threads", type=int, default=None)
    c.add_argument("--refresh-weights", action="store_true")
    c.add_argument("--replay", help="rerun from a manifest written by a previous train")
    c.add_argument("--out-dir", default="run")
    c.set_defaults(func=cmd_train)

    c = sub.add_parser("eval", help="accuracy of a report's weights on a dataset split")
    c.add_argument("--report", required=True)
    c.add_argument("--dataset", required=True)
    c.add_argument("--label-column", default=None)
    c.add_argument("--positive", default=None)
    c.add_argument("--subsample", type=int, default=None)
    c.add_argument("--split", choices=("test", "train"), default="test")
    c.set_defaults(func=cmd_eval)

    c = sub.add_parser("report", help="TSV tables and PNG figures from a training report")
    c.add_argument("--report", required=True)
    c.add_argument("--out-dir", default="report")
    c.set_defaults(func=cmd_report)

    c = sub.add_parser("bench", help="WGC/s/T and latency table against published figures")
    c.add_argument("--bits", type=int, default=4)
    c.add_argument("--rounding", choices=("truncate", "nearest"), default="truncate")
    c.add_argument("--threads", type=int, default=None)
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_bench)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", 0) is None:
        args.threads = default_threads()
    try:
        return args.func(args)
    except (CliError, DatasetError, GraphError, TrainingError, SimulationError, ValueError, OSError) as exc:
        print(f"fhetrain {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
