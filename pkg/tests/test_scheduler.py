"""Scheduler tests: hand-derived selection for all three schemes, physical
removal against the cost oracle, and full prune-to-target runs checking
budget satisfaction, monotonicity, floors, and determinism."""

import math

import numpy as np
import pytest

from prunekit.cost import flops_budget, model_cost
from prunekit.engine import Dataset
from prunekit.errors import (
    ConfigError,
    GraphValidationError,
    InfeasibleTargetError,
)
from prunekit.groups import build_groups
from prunekit.model import ParamRole, graphs_equal
from prunekit.scheduler import (
    PruneConfig,
    PrunePlan,
    apply_plan,
    plan_step,
    prune_to_target,
)
from prunekit.zoo import (
    _Builder,
    make_bottleneck_net,
    make_chain_cnn,
    make_resnet_tiny,
    make_synthetic_dataset,
    make_vgg_tiny,
)

from test_groups import find_group

CO, CI = ParamRole.CONV_OUT, ParamRole.CONV_IN


def two_group_net(width=4):
    b = _Builder("sched", (2, 8, 8), 3, seed=0)
    b.conv("c1", width)
    b.relu("r1")
    b.conv("c2", width)
    b.relu("r2")
    b.gap("gap")
    b.linear("fc", 3)
    return b.build()


def prunable_pair(m):
    """(first, second) prunable groups of the two-conv chain."""
    groups = build_groups(m)
    return groups, find_group(groups, "c1", CO), find_group(groups, "c2", CO)


class TestPlanStep:
    def test_global_raw_threshold(self):
        m = two_group_net()
        groups, ga, gb = prunable_pair(m)
        scores = {ga.id: np.array([1.0, 2.0, 3.0, 4.0]),
                  gb.id: np.array([5.0, 6.0, 7.0, 8.0])}
        cfg = PruneConfig(speedup=4, steps=4, scheme="global", normalize="none")
        plan = plan_step(m, groups, scores, cfg, achieved_flops=1.0)
        assert plan.actions == ((ga.id, 0), (ga.id, 1))

    def test_local_per_group_fraction(self):
        m = two_group_net()
        groups, ga, gb = prunable_pair(m)
        scores = {ga.id: np.array([1.0, 2.0, 3.0, 4.0]),
                  gb.id: np.array([5.0, 6.0, 7.0, 8.0])}
        cfg = PruneConfig(speedup=4, steps=4, scheme="local")
        plan = plan_step(m, groups, scores, cfg, achieved_flops=1.0)
        assert set(plan.actions) == {(ga.id, 0), (gb.id, 0)}

    def test_protected_floor_skips_fourth_removal(self):
        m = two_group_net()
        groups, ga, gb = prunable_pair(m)
        scores = {ga.id: np.array([1.0, 2.0, 3.0, 4.0]),
                  gb.id: np.array([10.0, 20.0, 30.0, 40.0])}
        # quantum 4; floor ceil(0.10 * 4) = 1 stops the fourth removal in ga
        cfg = PruneConfig(speedup=8, steps=2, scheme="protected_global",
                          normalize="none")
        plan = plan_step(m, groups, scores, cfg, achieved_flops=1.0)
        assert plan.actions == ((ga.id, 0), (ga.id, 1), (ga.id, 2), (gb.id, 0))

    def test_max_normalization_aligns_groups(self):
        m = two_group_net()
        groups, ga, gb = prunable_pair(m)
        scores = {ga.id: np.array([1.0, 2.0, 3.0, 4.0]),
                  gb.id: np.array([10.0, 20.0, 30.0, 40.0])}
        cfg = PruneConfig(speedup=4, steps=4, scheme="global", normalize="max")
        plan = plan_step(m, groups, scores, cfg, achieved_flops=1.0)
        # both groups normalize to [0.25, 0.5, 0.75, 1.0]; ties break by id
        assert plan.actions == ((ga.id, 0), (gb.id, 0))

    def test_ties_resolve_lexicographically(self):
        m = two_group_net()
        groups, ga, gb = prunable_pair(m)
        scores = {ga.id: np.ones(4), gb.id: np.ones(4)}
        cfg = PruneConfig(speedup=4, steps=3, scheme="global", normalize="none")
        plan = plan_step(m, groups, scores, cfg, achieved_flops=1.0)
        assert plan.actions == ((ga.id, 0), (ga.id, 1), (ga.id, 2))

    def test_all_groups_at_floor_is_infeasible(self):
        m = two_group_net(width=1)
        groups, ga, gb = prunable_pair(m)
        scores = {ga.id: np.ones(1), gb.id: np.ones(1)}
        cfg = PruneConfig(speedup=8, steps=1, scheme="global")
        with pytest.raises(InfeasibleTargetError) as exc:
            plan_step(m, groups, scores, cfg, achieved_flops=1.0)
        assert set(exc.value.binding_groups) == {ga.id, gb.id}

    def test_plan_reports_resulting_flops(self):
        m = two_group_net()
        groups, ga, gb = prunable_pair(m)
        scores = {ga.id: np.array([1.0, 2.0, 3.0, 4.0]),
                  gb.id: np.array([5.0, 6.0, 7.0, 8.0])}
        cfg = PruneConfig(speedup=4, steps=4, scheme="global", normalize="none")
        plan = plan_step(m, groups, scores, cfg, achieved_flops=1.0)
        assert plan.flops == model_cost(apply_plan(m, groups, plan)).total_flops
        assert plan.flops < model_cost(m).total_flops


class TestApplyPlan:
    def test_empty_plan_is_identity(self):
        m = two_group_net()
        groups = build_groups(m)
        assert apply_plan(m, groups, PrunePlan((), 0)) is m

    def test_one_of_four_channels_cuts_conv_flops_quarter(self):
        m = two_group_net()
        groups, ga, _ = prunable_pair(m)
        before = model_cost(m).per_layer["c1"].flops
        out = apply_plan(m, groups, PrunePlan(((ga.id, 2),), 0))
        after = model_cost(out).per_layer["c1"].flops
        assert after * 4 == before * 3
        assert out.nodes["c1"].attrs["out_channels"] == 3
        assert out.nodes["c2"].attrs["in_channels"] == 3

    def test_residual_group_shrinks_every_member(self):
        m = make_resnet_tiny(seed=0)
        groups = build_groups(m)
        tail = find_group(groups, "convd", CO)
        out = apply_plan(m, groups, PrunePlan(((tail.id, 0), (tail.id, 5)), 0))
        want = tail.width - 2
        for member in tail.members:
            assert out.nodes[member.layer].role_extent(member.role) == want

    def test_rejects_unprunable_group(self):
        m = two_group_net()
        groups = build_groups(m)
        bad = next(g for g in groups if g.unprunable)
        with pytest.raises(GraphValidationError, match="unprunable"):
            apply_plan(m, groups, PrunePlan(((bad.id, 0),), 0))

    def test_rejects_unknown_group(self):
        m = two_group_net()
        groups = build_groups(m)
        with pytest.raises(GraphValidationError, match="unknown group"):
            apply_plan(m, groups, PrunePlan(((999, 0),), 0))


class TestPruneToTarget:
    def test_speedup_one_is_identity(self):
        m = make_chain_cnn(seed=0)
        result = prune_to_target(m, PruneConfig(speedup=1.0))
        assert result.model is m
        assert result.telemetry == []
        assert result.achieved.total_flops == result.original.total_flops

    def test_budget_met_without_premature_stop(self):
        m = make_vgg_tiny(seed=1)
        cfg = PruneConfig(speedup=2.0, steps=25, criterion="magnitude_l1")
        result = prune_to_target(m, cfg)
        budget = flops_budget(result.original, cfg.speedup)
        flops = [t["flops"] for t in result.telemetry]
        assert flops[-1] <= budget
        assert all(a > b for a, b in zip(flops, flops[1:]))
        if len(flops) > 1:
            assert flops[-2] > budget
        assert result.achieved.total_flops == flops[-1]

    def test_deterministic_given_seed(self):
        m = make_chain_cnn(seed=2)
        cfg = PruneConfig(speedup=2.0, steps=12, criterion="random", seed=7)
        a = prune_to_target(m, cfg)
        b = prune_to_target(m, cfg)
        assert graphs_equal(a.model, b.model, bitwise=True)
        stripped = [{k: v for k, v in t.items() if k != "step_time"}
                    for t in a.telemetry]
        assert stripped == [{k: v for k, v in t.items() if k != "step_time"}
                            for t in b.telemetry]

    def test_protected_floors_hold(self):
        m = make_bottleneck_net(seed=3)
        base = {g.id: g.width for g in build_groups(m) if not g.unprunable}
        cfg = PruneConfig(speedup=4.0, steps=40, scheme="protected_global")
        result = prune_to_target(m, cfg)
        for g in build_groups(result.model):
            if not g.unprunable:
                assert g.width >= math.ceil(0.10 * base[g.id])

    def test_data_driven_criterion_rescored_each_step(self):
        m = make_chain_cnn(seed=4)
        x, y = make_synthetic_dataset(32, seed=5)
        cfg = PruneConfig(speedup=1.5, steps=10, criterion="taylor")
        result = prune_to_target(m, cfg, data=Dataset(x, y, 10))
        assert result.achieved.total_flops <= flops_budget(result.original, 1.5)

    def test_infeasible_target_propagates(self):
        m = make_chain_cnn(seed=6)
        with pytest.raises(InfeasibleTargetError):
            prune_to_target(m, PruneConfig(speedup=1e6, steps=10))

    def test_summary_fields(self):
        m = make_chain_cnn(seed=8)
        result = prune_to_target(m, PruneConfig(speedup=2.0, steps=10))
        s = result.summary()
        assert s["steps"] == len(result.telemetry)
        assert 0 < s["flops_pct"] <= 50.0
        assert 0 < s["params_pct"] < 100.0
        assert s["mean_step_time"] > 0


class TestConfig:
    def test_validation(self):
        with pytest.raises(ConfigError, match="speedup"):
            PruneConfig(speedup=0.5)
        with pytest.raises(ConfigError, match="steps"):
            PruneConfig(steps=0)
        with pytest.raises(ConfigError, match="scheme"):
            PruneConfig(scheme="greedy")
        with pytest.raises(ConfigError, match="protection"):
            PruneConfig(protection=1.0)
        with pytest.raises(ConfigError, match="criterion"):
            PruneConfig(criterion="snip")
        with pytest.raises(ConfigError, match="normalize"):
            PruneConfig(normalize="mean")

    def test_defaults(self):
        cfg = PruneConfig()
        assert (cfg.steps, cfg.scheme, cfg.protection) == (400, "global", 0.10)
        assert cfg.criterion == "magnitude_l2"
        assert cfg.normalize == "max"
