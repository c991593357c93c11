"""Command line interface: inspection, pipeline stages, and benchmarks."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .bench import ExperimentConfig, emit_leaderboard, run_experiment
from .cost import model_cost
from .criteria import CRITERIA, compute_group_scores
from .engine import (
    TrainConfig,
    evaluate,
    forward,
    iter_batches,
    load_dataset,
)
from .errors import ConfigError, PruneKitError
from .groups import build_groups, groups_to_json
from .model import load_model, save_model
from .regularizers import REGULARIZERS, RegConfig, get_preset, sparsify
from .scheduler import SCHEMES, PruneConfig, prune_to_target


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)


def cmd_cost(args) -> int:
    report = model_cost(load_model(args.model))
    width = max(len(nid) for nid in report.per_layer)
    print(f"{'layer':<{width}}  {'params':>10}  {'flops':>12}")
    for nid, lc in report.per_layer.items():
        print(f"{nid:<{width}}  {lc.params:>10,}  {lc.flops:>12,}")
    print(f"{'total':<{width}}  {report.total_params:>10,}  "
          f"{report.total_flops:>12,}")
    print(json.dumps(report.to_json()))
    return 0


def cmd_groups_dump(args) -> int:
    print(groups_to_json(build_groups(load_model(args.model))))
    return 0


def cmd_score(args) -> int:
    m = load_model(args.model)
    data = load_dataset(args.calib) if args.calib else None
    scores = compute_group_scores(m, build_groups(m), args.criterion,
                                  data=data, seed=args.seed,
                                  normalize=args.normalize)
    print(json.dumps({str(gid): [float(v) for v in vec]
                      for gid, vec in scores.items()}, indent=2))
    return 0


def cmd_sparsify(args) -> int:
    m = load_model(args.model)
    data = load_dataset(args.data)
    if args.preset:
        try:
            model_name, dataset_name = args.preset.split("/")
        except ValueError:
            raise ConfigError(
                f"--preset wants MODEL/DATASET, got {args.preset!r}")
        cfg = get_preset(args.reg, model_name, dataset_name)
    else:
        cfg = RegConfig(args.reg)
    if args.lam is not None:
        cfg.lam = args.lam
    if args.eta is not None:
        cfg.eta = args.eta
    if args.delta is not None:
        cfg.delta = args.delta

    result = sparsify(m, data, cfg, TrainConfig(epochs=args.epochs,
                                                seed=args.seed))
    out = Path(args.out)
    save_model(result.model, out / "model")
    _write_json(out / "history.json", result.history)
    print(json.dumps({"regularizer": result.regularizer,
                      "reg_time": result.reg_time,
                      "epochs": args.epochs}))
    return 0


def cmd_prune(args) -> int:
    m = load_model(args.model)
    data = load_dataset(args.calib) if args.calib else None
    cfg = PruneConfig(speedup=args.speedup, steps=args.steps,
                      scheme=args.scheme, protection=args.protect,
                      criterion=args.criterion, seed=args.seed)
    result = prune_to_target(m, cfg, data=data)
    out = Path(args.out)
    save_model(result.model, out / "model")
    _write_json(out / "telemetry.json",
                {"summary": result.summary(), "steps": result.telemetry})
    print(json.dumps(result.summary()))
    return 0


def cmd_forward(args) -> int:
    m = load_model(args.model)
    data = load_dataset(args.data)
    logits = []
    for x, _ in iter_batches(data, args.batch):
        rec = forward(m, x)
        logits.append(np.asarray(rec.activations[rec.logits_node],
                                 dtype=np.float32))
    if args.logits_out:
        Path(args.logits_out).parent.mkdir(parents=True, exist_ok=True)
        np.concatenate(logits).astype("<f4").tofile(args.logits_out)
    result = evaluate(m, data, batch_size=args.batch)
    print(json.dumps({"accuracy": result.accuracy, "loss": result.loss,
                      "count": result.count}))
    return 0


def _parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        key, _, value = pair.partition("=")
        if not _:
            raise ConfigError(f"--override wants KEY=VALUE, got {pair!r}")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def cmd_bench_run(args) -> int:
    cfg = ExperimentConfig.from_json(args.config,
                                     _parse_overrides(args.override))
    result = run_experiment(cfg)
    for fmt, name in (("md", "leaderboard.md"), ("csv", "leaderboard.csv"),
                      ("json", "leaderboard.json")):
        emit_leaderboard(result.rows, fmt, result.out_dir / name)
    print(emit_leaderboard(result.rows, "md"))
    return 1 if result.failed else 0


def cmd_bench_report(args) -> int:
    run_dir = Path(args.run_dir)
    with open(run_dir / "rows.json", encoding="utf-8") as fh:
        rows = json.load(fh)
    ext = {"md": "md", "csv": "csv", "json": "json"}[args.format]
    text = emit_leaderboard(rows, args.format, run_dir / f"leaderboard.{ext}")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prunekit",
        description="Structural pruning engine and benchmark harness.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cost", help="print parameter and FLOPs breakdown")
    p.add_argument("model")
    p.set_defaults(fn=cmd_cost)

    p = sub.add_parser("groups", help="dependency group inspection")
    gsub = p.add_subparsers(dest="action", required=True)
    g = gsub.add_parser("dump", help="emit groups as JSON")
    g.add_argument("model")
    g.set_defaults(fn=cmd_groups_dump)

    p = sub.add_parser("score", help="dump per-group importance scores")
    p.add_argument("model")
    p.add_argument("--criterion", required=True, choices=sorted(CRITERIA))
    p.add_argument("--calib", help="calibration dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--normalize", default="max",
                   choices=["none", "max", "mean", "gaussian"])
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("sparsify", help="sparse-learning stage")
    p.add_argument("model")
    p.add_argument("data", help="training dataset directory")
    p.add_argument("out", help="output directory")
    p.add_argument("--reg", required=True, choices=REGULARIZERS)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--preset", help="MODEL/DATASET tuned hyperparameters")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_sparsify)

    p = sub.add_parser("prune", help="iterative pruning to a FLOPs target")
    p.add_argument("model")
    p.add_argument("out", help="output directory")
    p.add_argument("--speedup", type=float, required=True)
    p.add_argument("--steps", type=int, default=400)
    p.add_argument("--scheme", default="global", choices=SCHEMES)
    p.add_argument("--criterion", default="magnitude_l2",
                   choices=sorted(CRITERIA))
    p.add_argument("--calib", help="calibration dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--protect", type=float, default=0.10)
    p.set_defaults(fn=cmd_prune)

    p = sub.add_parser("forward", help="run eval forward over a dataset")
    p.add_argument("model")
    p.add_argument("data")
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--logits-out", help="write raw float32 logits here")
    p.set_defaults(fn=cmd_forward)

    p = sub.add_parser("bench", help="experiment matrices and leaderboards")
    bsub = p.add_subparsers(dest="action", required=True)
    b = bsub.add_parser("run", help="run an experiment config")
    b.add_argument("config")
    b.add_argument("--override", action="append", metavar="KEY=VALUE",
                   help="override a config field (value parsed as JSON)")
    b.set_defaults(fn=cmd_bench_run)
    b = bsub.add_parser("report", help="re-emit a leaderboard from artifacts")
    b.add_argument("run_dir")
    b.add_argument("--format", default="md", choices=["md", "csv", "json"])
    b.set_defaults(fn=cmd_bench_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except PruneKitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
