"""Iterative FLOPs-controlled pruning scheduler.

The model is pruned over many small steps. Each step rescoring happens on
the current graph, a fixed quantum of channel indices is selected by the
active scheme, and the selected indices are physically removed from every
member of their coupled groups. The loop stops at the first step whose
achieved FLOPs is at or under the budget implied by the speedup target.
"""

from __future__ import annotations

import math
import time
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .cost import CostReport, flops_budget, model_cost
from .criteria import CRITERIA, compute_group_scores
from .errors import ConfigError, GraphValidationError, InfeasibleTargetError
from .groups import build_groups, group_prunable_mask
from .model import ModelGraph, slice_param

SCHEMES = ("local", "global", "protected_global")


@dataclass
class PruneConfig:
    """Target, granularity, and selection scheme for one pruning run.

    normalize controls how group score vectors are aligned before the
    global threshold: "max" divides each group by its own peak, "none"
    compares raw values. Local selection is unaffected by it.
    """

    speedup: float = 1.0
    steps: int = 400
    scheme: str = "global"
    protection: float = 0.10
    criterion: str = "magnitude_l2"
    seed: int = 0
    normalize: str = "max"

    def __post_init__(self):
        if self.speedup < 1:
            raise ConfigError(f"speedup must be >= 1, got {self.speedup}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.scheme not in SCHEMES:
            raise ConfigError(
                f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if not 0 <= self.protection < 1:
            raise ConfigError(
                f"protection must be in [0, 1), got {self.protection}")
        if self.criterion not in CRITERIA:
            raise ConfigError(f"unknown criterion {self.criterion!r}")
        if self.normalize not in ("max", "none"):
            raise ConfigError(
                f"normalize must be 'max' or 'none', got {self.normalize!r}")


@dataclass
class PrunePlan:
    """One step's removals: ordered (group id, index) actions."""

    actions: tuple[tuple[int, int], ...]
    flops: int  # per-sample flops of the model after applying the plan


def _quantum(cfg: PruneConfig, original_widths: dict[int, int]) -> int:
    return max(1, math.ceil(sum(original_widths.values()) / cfg.steps))


def _floor_of(cfg: PruneConfig, original_width: int) -> int:
    if cfg.scheme == "protected_global":
        return max(1, math.ceil(cfg.protection * original_width))
    return 1


def plan_step(m: ModelGraph, groups, scores: dict[int, np.ndarray],
              cfg: PruneConfig, achieved_flops: float,
              original_widths: dict[int, int] | None = None) -> PrunePlan:
    """Select one quantum of indices to remove from the current graph.

    `original_widths` maps prunable group id to its width before the first
    step; protection floors and the quantum are anchored there so they do
    not drift as the model shrinks. Omitted, current widths are used.
    """
    work = sorted((g for g in groups if not g.unprunable), key=lambda g: g.id)
    if original_widths is None:
        original_widths = {g.id: g.width for g in work}
    quantum = _quantum(cfg, original_widths)
    headroom = {g.id: g.width - _floor_of(cfg, original_widths[g.id])
                for g in work}

    selected: list[tuple[int, int]] = []
    if cfg.scheme == "local":
        total = sum(g.width for g in work)
        for g in work:
            take = math.ceil(quantum * g.width / total)
            take = min(take, headroom[g.id])
            if take <= 0:
                continue
            order = np.argsort(scores[g.id], kind="stable")
            selected.extend((g.id, int(i)) for i in order[:take])
    else:
        candidates = []
        for g in work:
            vec = np.asarray(scores[g.id], dtype=np.float64)
            if cfg.normalize == "max" and vec.max() > 0:
                vec = vec / vec.max()
            candidates.extend((float(vec[i]), g.id, i) for i in range(g.width))
        candidates.sort()  # ties resolve to lowest (group id, index)
        for _, gid, idx in candidates:
            if len(selected) == quantum:
                break
            if headroom[gid] <= 0:
                continue
            headroom[gid] -= 1
            selected.append((gid, idx))

    if not selected:
        binding = tuple(g.id for g in work if headroom[g.id] <= 0)
        raise InfeasibleTargetError(
            f"no removable indices left for speedup {cfg.speedup} "
            f"(achieved flops {achieved_flops:.0f}); groups at floor: {binding}",
            binding_groups=binding)

    pruned = apply_plan(m, groups, PrunePlan(tuple(selected), flops=0))
    return PrunePlan(tuple(selected), flops=model_cost(pruned).total_flops)


def apply_plan(m: ModelGraph, groups, plan: PrunePlan) -> ModelGraph:
    """Physically remove the planned indices from every group member."""
    if not plan.actions:
        return m
    by_id = {g.id: g for g in groups}
    removed = defaultdict(set)
    for gid, idx in plan.actions:
        if gid not in by_id:
            raise GraphValidationError(f"plan names unknown group {gid}")
        if by_id[gid].unprunable:
            raise GraphValidationError(f"plan touches unprunable group {gid}")
        removed[gid].add(idx)

    new_nodes = {}
    for gid in sorted(removed):
        masks = group_prunable_mask(by_id[gid], removed[gid])
        for (layer, role), keep in masks.items():
            node = new_nodes.get(layer, m.nodes[layer])
            new_nodes[layer] = slice_param(node, role, keep)
    return m.with_nodes(new_nodes).validate()


@dataclass
class PruneResult:
    model: ModelGraph
    telemetry: list[dict] = field(default_factory=list)
    original: CostReport | None = None
    achieved: CostReport | None = None

    def summary(self) -> dict:
        return {
            "steps": len(self.telemetry),
            "original_flops": self.original.total_flops,
            "achieved_flops": self.achieved.total_flops,
            "flops_pct": self.achieved.flops_pct_of(self.original),
            "original_params": self.original.total_params,
            "achieved_params": self.achieved.total_params,
            "params_pct": self.achieved.params_pct_of(self.original),
            "mean_step_time": (
                float(np.mean([t["step_time"] for t in self.telemetry]))
                if self.telemetry else 0.0),
        }


def prune_to_target(m: ModelGraph, cfg: PruneConfig,
                    data=None) -> PruneResult:
    """Loop plan/apply until achieved FLOPs is within the speedup budget."""
    original = model_cost(m)
    budget = flops_budget(original, cfg.speedup)
    base_groups = [g for g in build_groups(m) if not g.unprunable]
    original_widths = {g.id: g.width for g in base_groups}

    current = m
    achieved = original
    telemetry: list[dict] = []
    while achieved.total_flops > budget:
        start = time.perf_counter()
        groups = build_groups(current)
        scores = compute_group_scores(current, groups, cfg.criterion,
                                      data=data, seed=cfg.seed)
        plan = plan_step(current, groups, scores, cfg, achieved.total_flops,
                         original_widths=original_widths)
        current = apply_plan(current, groups, plan)
        achieved = model_cost(current)
        telemetry.append({
            "step": len(telemetry),
            "removed": len(plan.actions),
            "flops": achieved.total_flops,
            "params": achieved.total_params,
            "step_time": time.perf_counter() - start,
        })
    return PruneResult(current, telemetry, original, achieved)
