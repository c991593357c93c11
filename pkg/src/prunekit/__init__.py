"""Structural pruning engine and benchmark harness for small CNNs."""

from .model import (
    LayerNode,
    ModelGraph,
    ParamRole,
    graphs_equal,
    load_model,
    save_model,
    slice_param,
)
from .groups import PruneGroup, GroupMember, build_groups, group_prunable_mask
from .cost import CostReport, flops_budget, layer_cost, model_cost
from .engine import (
    Dataset,
    EvalResult,
    TrainConfig,
    TrainResult,
    evaluate,
    forward,
    load_dataset,
    predict,
    save_dataset,
    train,
)
from .criteria import CRITERIA, CriterionSpec, aggregate_group, compute_group_scores
from .regularizers import (
    REGULARIZERS,
    RegConfig,
    SparsifyResult,
    get_preset,
    make_grad_hook,
    sparsify,
)
from .scheduler import (
    SCHEMES,
    PruneConfig,
    PrunePlan,
    PruneResult,
    apply_plan,
    plan_step,
    prune_to_target,
)
from .bench import (
    ExperimentConfig,
    ExperimentResult,
    emit_leaderboard,
    run_experiment,
)

__all__ = [
    "LayerNode", "ModelGraph", "ParamRole", "graphs_equal", "load_model",
    "save_model", "slice_param", "PruneGroup", "GroupMember", "build_groups",
    "group_prunable_mask", "CostReport", "flops_budget", "layer_cost",
    "model_cost", "Dataset", "EvalResult", "TrainConfig", "TrainResult",
    "evaluate", "forward", "load_dataset", "predict", "save_dataset", "train",
    "CRITERIA", "CriterionSpec", "aggregate_group", "compute_group_scores",
    "REGULARIZERS", "RegConfig", "SparsifyResult", "get_preset",
    "make_grad_hook", "sparsify", "SCHEMES", "PruneConfig", "PrunePlan",
    "PruneResult", "apply_plan", "plan_step", "prune_to_target",
    "ExperimentConfig", "ExperimentResult", "emit_leaderboard",
    "run_experiment",
]

__version__ = "0.1.0"
