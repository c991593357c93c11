"""Benchmark harness: run (criterion x regularizer x speedup) matrices
through sparsify, group, prune, and finetune, then emit ranked leaderboards.

Every number in a leaderboard traces back to a per-seed artifact file under
the run directory; the run manifest records the config hash, seeds, and
input checksums so a deterministic cell can be reproduced bit-for-bit
(timing fields excepted).
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cost import model_cost
from .criteria import CRITERIA
from .engine import TrainConfig, evaluate, load_dataset, train
from .errors import ConfigError, PruneKitError
from .model import ModelGraph, load_model
from .regularizers import REGULARIZERS, RegConfig, sparsify
from .scheduler import PruneConfig, prune_to_target

# criterion used when ranking a sparsifying-stage regularizer
REG_CRITERION = {
    "group_lasso": "magnitude_l2",
    "group_norm": "magnitude_l2",
    "bnscale": "bnscale",
    "growing_reg": "magnitude_l2",
}

COLUMNS = ("Importance", "Regularizer", "Rank", "Base", "Pruned", "ΔAcc",
           "Parameters", "Step Time", "Reg Time")


@dataclass
class ExperimentConfig:
    """One experiment matrix: inputs, methods, targets, and overrides."""

    model: str
    train_data: str
    val_data: str
    output: str
    calib_data: str | None = None
    criteria: list[str] = field(default_factory=lambda: ["magnitude_l2"])
    regularizers: list[str] = field(default_factory=list)
    speedups: list[float] = field(default_factory=lambda: [2.0])
    repeats: int = 3
    seed: int = 0
    prune: dict = field(default_factory=dict)  # PruneConfig overrides
    train: dict = field(default_factory=dict)  # finetune TrainConfig overrides
    reg: dict = field(default_factory=dict)    # RegConfig overrides (+ epochs)

    def __post_init__(self):
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats}")
        if not self.criteria:
            raise ConfigError("at least one criterion is required")
        for c in self.criteria:
            if c not in CRITERIA:
                raise ConfigError(f"unknown criterion {c!r}")
        for r in self.regularizers:
            if r not in REGULARIZERS:
                raise ConfigError(f"unknown regularizer {r!r}")
        for s in self.speedups:
            if s < 1:
                raise ConfigError(f"speedups must be >= 1, got {s}")

    @classmethod
    def from_json(cls, path: str | Path, overrides: dict | None = None):
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        raw.update(overrides or {})
        return cls(**raw)


def _train_config(overrides: dict, seed: int, epochs: int | None = None):
    kw = dict(overrides)
    if epochs is not None:
        kw["epochs"] = epochs
    if "milestones" in kw:
        kw["milestones"] = tuple(kw["milestones"])
    return TrainConfig(seed=seed, **kw)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dir_checksums(path: str) -> dict:
    return {p.name: _sha256(p) for p in sorted(Path(path).iterdir())
            if p.is_file()}


def _cell_id(importance: str, regularizer: str | None) -> str:
    return importance if regularizer is None else f"{regularizer}+{importance}"


def run_cell(model: ModelGraph, datasets: dict, cfg: ExperimentConfig,
             importance: str, regularizer: str | None, speedup: float,
             base_acc: float, out_dir: Path | None = None) -> dict:
    """One leaderboard cell, averaged over seeds when stochastic."""
    stochastic = CRITERIA[importance].stochastic
    repeats = cfg.repeats if stochastic else 1
    seeds = [cfg.seed + i for i in range(repeats)]
    original = model_cost(model)

    per_seed = []
    failure = None
    for seed in seeds:
        try:
            current = model
            reg_time = None
            if regularizer is not None:
                reg_kw = dict(cfg.reg)
                sparse_epochs = reg_kw.pop("epochs", None)
                reg_cfg = RegConfig(regularizer, **reg_kw)
                sp = sparsify(current, datasets["train"], reg_cfg,
                              _train_config(cfg.train, seed, sparse_epochs))
                current, reg_time = sp.model, sp.reg_time
            prune_cfg = PruneConfig(speedup=speedup, criterion=importance,
                                    seed=seed, **cfg.prune)
            pruned = prune_to_target(current, prune_cfg,
                                     data=datasets.get("calib"))
            finetune_cfg = _train_config(cfg.train, seed)
            if finetune_cfg.epochs > 0:
                final = train(pruned.model, datasets["train"],
                              finetune_cfg).model
            else:
                final = pruned.model
            summary = pruned.summary()
            per_seed.append({
                "seed": seed,
                "pruned_acc": 100.0 * evaluate(final, datasets["val"]).accuracy,
                "params": summary["achieved_params"],
                "params_pct": summary["params_pct"],
                "flops_pct": summary["flops_pct"],
                "step_time": summary["mean_step_time"],
                "reg_time": reg_time,
                "telemetry": pruned.telemetry,
            })
        except (PruneKitError, ValueError) as exc:
            failure = f"{type(exc).__name__}: {exc}"
            break

    row = {
        "importance": importance,
        "regularizer": regularizer,
        "speedup": speedup,
        "stochastic": stochastic,
        "seeds": seeds[:len(per_seed)] if failure is None else seeds,
        "base_acc": base_acc,
        "failed": failure,
    }
    if failure is None:
        def mean(key):
            vals = [s[key] for s in per_seed]
            return None if any(v is None for v in vals) else float(np.mean(vals))
        row.update({
            "pruned_acc": mean("pruned_acc"),
            "delta_acc": round(mean("pruned_acc") - base_acc, 2),
            "params": mean("params"),
            "params_pct": mean("params_pct"),
            "flops_pct": mean("flops_pct"),
            "step_time": mean("step_time"),
            "reg_time": mean("reg_time"),
        })
    if out_dir is not None:
        cell_dir = out_dir / "cells" / f"sp{speedup:g}x" / _cell_id(
            importance, regularizer)
        cell_dir.mkdir(parents=True, exist_ok=True)
        for entry in per_seed:
            with open(cell_dir / f"seed{entry['seed']}.json", "w",
                      encoding="utf-8") as fh:
                json.dump(entry, fh, indent=2)
    return row


@dataclass
class ExperimentResult:
    rows: list[dict]
    manifest: dict
    out_dir: Path

    @property
    def failed(self) -> bool:
        return any(r["failed"] for r in self.rows)


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    model = load_model(cfg.model)
    datasets = {"train": load_dataset(cfg.train_data),
                "val": load_dataset(cfg.val_data)}
    if cfg.calib_data:
        datasets["calib"] = load_dataset(cfg.calib_data)

    out_dir = Path(cfg.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    base_acc = 100.0 * evaluate(model, datasets["val"]).accuracy

    rows = []
    for speedup in cfg.speedups:
        for crit in cfg.criteria:
            rows.append(run_cell(model, datasets, cfg, crit, None, speedup,
                                 base_acc, out_dir))
        for reg in cfg.regularizers:
            rows.append(run_cell(model, datasets, cfg, REG_CRITERION[reg],
                                 reg, speedup, base_acc, out_dir))

    config_json = json.dumps(asdict(cfg), sort_keys=True)
    manifest = {
        "config": asdict(cfg),
        "config_sha256": hashlib.sha256(config_json.encode()).hexdigest(),
        "base_acc": base_acc,
        "seeds": sorted({s for r in rows for s in r["seeds"]}),
        "checksums": {
            "model": _dir_checksums(cfg.model),
            "train_data": _dir_checksums(cfg.train_data),
            "val_data": _dir_checksums(cfg.val_data),
            **({"calib_data": _dir_checksums(cfg.calib_data)}
               if cfg.calib_data else {}),
        },
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    with open(out_dir / "rows.json", "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2)
    return ExperimentResult(rows, manifest, out_dir)


# ---------------------------------------------------------------------------
# leaderboard emission
# ---------------------------------------------------------------------------

def _fmt_acc(v) -> str:
    return "failed" if v is None else f"{v:.2f}"


def _fmt_row(row: dict, rank) -> dict:
    name = row["importance"] + ("*" if row["stochastic"] else "")
    if row["failed"]:
        pruned = delta = params = step = "failed"
        reg_time = "failed" if row["regularizer"] else "N/A"
    else:
        pruned = _fmt_acc(row["pruned_acc"])
        delta = f"{row['delta_acc']:+.2f}"
        params = f"{round(row['params']):,} ({row['params_pct']:.1f}%)"
        step = f"{row['step_time'] * 1000:.2f}ms"
        reg_time = (f"{row['reg_time']:.2f}s" if row["reg_time"] is not None
                    else "N/A")
    return {
        "Importance": name,
        "Regularizer": row["regularizer"] or "N/A",
        "Rank": str(rank),
        "Base": _fmt_acc(row["base_acc"]),
        "Pruned": pruned,
        "ΔAcc": delta,
        "Parameters": params,
        "Step Time": step,
        "Reg Time": reg_time,
    }


def _rank_section(rows: list[dict]) -> list[dict]:
    ok = [r for r in rows if not r["failed"]]
    bad = [r for r in rows if r["failed"]]
    ok.sort(key=lambda r: (-r["delta_acc"], r["params"],
                           _cell_id(r["importance"], r["regularizer"])))
    out = [_fmt_row(r, i + 1) for i, r in enumerate(ok)]
    out.extend(_fmt_row(r, "-") for r in bad)
    return out


def _sections(rows: list[dict]):
    for speedup in sorted({r["speedup"] for r in rows}):
        at = [r for r in rows if r["speedup"] == speedup]
        crit = _rank_section([r for r in at if r["regularizer"] is None])
        regs = _rank_section([r for r in at if r["regularizer"] is not None])
        yield speedup, crit, regs


def emit_leaderboard(rows: list[dict], fmt: str = "md",
                     path: str | Path | None = None) -> str:
    """Render ranked leaderboard sections as markdown, csv, or json."""
    if fmt not in ("md", "csv", "json"):
        raise ConfigError(f"unknown leaderboard format {fmt!r}")

    if fmt == "json":
        doc = [{"speedup": sp, "criteria": crit,
                **({"regularizers": regs} if regs else {})}
               for sp, crit, regs in _sections(rows)]
        text = json.dumps(doc, ensure_ascii=False, indent=2) + "\n"
    elif fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for _, crit, regs in _sections(rows):
            writer.writerows([row[c] for c in COLUMNS]
                             for row in crit + regs)
        text = buf.getvalue()
    else:
        chunks = []
        for sp, crit, regs in _sections(rows):
            chunks.append(f"## Speedup {sp:g}x\n")
            named = [("Importance criteria", crit)]
            if regs:
                named.append(("Sparsity regularizers", regs))
            for title, section in named:
                chunks.append(f"### {title}\n")
                chunks.append("| " + " | ".join(COLUMNS) + " |")
                chunks.append("|" + "|".join("---" for _ in COLUMNS) + "|")
                chunks.extend("| " + " | ".join(row[c] for c in COLUMNS) + " |"
                              for row in section)
                chunks.append("")
        text = "\n".join(chunks)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text
