"""Sparsity regularizers as gradient hooks.

No penalty term is added to the loss. Instead each regularizer edits the
gradients between backward and the optimizer step, per the trainer's
grad_hook contract: hook(state, grads, epoch) -> grads. A zero-strength
config returns the gradients untouched, so training is bit-identical to
the unregularized run.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .engine import Dataset, TrainConfig, TrainResult, train
from .errors import ConfigError
from .groups import build_groups
from .model import ModelGraph, ParamRole

REGULARIZERS = ("group_lasso", "group_norm", "bnscale", "growing_reg")

# which (param, axis) a member's shrinkage applies to
_ROLE_WEIGHT = {
    ParamRole.CONV_OUT: ("weight", 0),
    ParamRole.CONV_IN: ("weight", 1),
    ParamRole.LINEAR_OUT: ("weight", 0),
    ParamRole.LINEAR_IN: ("weight", 1),
    ParamRole.NORM_SCALE_SHIFT: ("gamma", 0),
}


@dataclass
class RegConfig:
    """One sparsity regularizer: coefficient, schedule, and guards.

    eta is the sparse-learning rate; None keeps the finetune rate.
    delta/interval/fraction only matter for growing_reg: the coefficient
    is lam + delta * (epoch // interval) on the bottom-`fraction` of each
    group's indices, re-selected at every interval boundary.
    """

    name: str
    lam: float = 0.0
    eta: float | None = None
    delta: float = 0.0
    interval: int = 1
    epsilon: float = 1e-8
    fraction: float = 0.5

    def __post_init__(self):
        if self.name not in REGULARIZERS:
            raise ConfigError(
                f"unknown regularizer {self.name!r}; expected one of {REGULARIZERS}")
        if self.lam < 0 or self.delta < 0:
            raise ConfigError("regularizer coefficients must be nonnegative")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if not 0 < self.fraction <= 1:
            raise ConfigError("fraction must be in (0, 1]")
        if self.interval < 1:
            raise ConfigError("interval must be a positive epoch count")


def _member_matrix(arr, axis, width):
    m = np.moveaxis(np.asarray(arr, dtype=np.float64), axis, 0)
    return m.reshape(width, -1)


def _per_index(scale_per_k, expand):
    return np.repeat(scale_per_k, expand)


def _bshape(vec, axis, ndim):
    shape = [1] * ndim
    shape[axis] = len(vec)
    return vec.reshape(shape)


def _add_scaled(grads, state, nid, pname, axis, scale_vec):
    w = state[nid][pname].astype(np.float64)
    grads[nid][pname] = grads[nid][pname] + w * _bshape(scale_vec, axis, w.ndim)


def _member_sites(group):
    for member in group.members:
        pname, axis = _ROLE_WEIGHT[member.role]
        yield member.layer, pname, axis, member.expand


def make_grad_hook(cfg: RegConfig, groups):
    """Build the gradient transform for `cfg` over the prunable groups."""
    work = [g for g in groups if not g.unprunable]

    if cfg.name == "bnscale":
        bn_sites = [m.layer for g in work for m in g.members
                    if m.role is ParamRole.NORM_SCALE_SHIFT]
        if not bn_sites:
            raise ConfigError("bnscale regularizer needs batchnorm layers "
                              "inside prunable groups")

    if cfg.lam == 0 and (cfg.name != "growing_reg" or cfg.delta == 0):
        return lambda state, grads, epoch: grads

    if cfg.name == "group_lasso":
        def hook(state, grads, epoch):
            for g in work:
                for nid, pname, axis, expand in _member_sites(g):
                    mat = _member_matrix(state[nid][pname], axis, g.width)
                    norms = np.linalg.norm(mat, axis=1)
                    scale = _per_index(cfg.lam / (norms + cfg.epsilon), expand)
                    _add_scaled(grads, state, nid, pname, axis, scale)
            return grads
        return hook

    if cfg.name == "group_norm":
        def hook(state, grads, epoch):
            for g in work:
                sq = np.zeros(g.width)
                for nid, pname, axis, expand in _member_sites(g):
                    mat = _member_matrix(state[nid][pname], axis, g.width)
                    sq += (mat ** 2).sum(axis=1)
                shared = cfg.lam / (np.sqrt(sq) + cfg.epsilon)
                for nid, pname, axis, expand in _member_sites(g):
                    _add_scaled(grads, state, nid, pname, axis,
                                _per_index(shared, expand))
            return grads
        return hook

    if cfg.name == "bnscale":
        def hook(state, grads, epoch):
            for nid in bn_sites:
                gamma = state[nid]["gamma"].astype(np.float64)
                grads[nid]["gamma"] = grads[nid]["gamma"] + cfg.lam * np.sign(gamma)
            return grads
        return hook

    # growing_reg: bottom-fraction selection cached per growth interval
    cache = {"interval": -1, "selection": {}}

    def group_l2_scores(state, g):
        vecs = []
        for nid, pname, axis, expand in _member_sites(g):
            mat = _member_matrix(state[nid][pname], axis, g.width)
            v = np.linalg.norm(mat, axis=1)
            peak = v.max()
            vecs.append(v / peak if peak > 0 else v)
        return np.mean(vecs, axis=0)

    def hook(state, grads, epoch):
        cur = epoch // cfg.interval
        if cur != cache["interval"]:
            cache["interval"] = cur
            cache["selection"] = {}
            for g in work:
                scores = group_l2_scores(state, g)
                n_sel = int(np.ceil(cfg.fraction * g.width))
                order = np.argsort(scores, kind="stable")
                mask = np.zeros(g.width, dtype=bool)
                mask[order[:n_sel]] = True
                cache["selection"][g.id] = mask
        lam_t = cfg.lam + cfg.delta * cur
        for g in work:
            mask = cache["selection"][g.id]
            for nid, pname, axis, expand in _member_sites(g):
                scale = _per_index(np.where(mask, lam_t, 0.0), expand)
                _add_scaled(grads, state, nid, pname, axis, scale)
        return grads
    return hook


@dataclass
class SparsifyResult:
    model: ModelGraph
    history: list[dict]
    reg_time: float  # mean wall seconds per sparse epoch
    regularizer: str


def sparsify(m: ModelGraph, data: Dataset, cfg: RegConfig,
             train_cfg: TrainConfig) -> SparsifyResult:
    """Sparse-learning stage: train with the regularizer hook installed."""
    if train_cfg.grad_hook is not None:
        raise ConfigError("train config already carries a grad hook; "
                          "sparsify installs its own")
    hook = make_grad_hook(cfg, build_groups(m))
    tc = replace(train_cfg, grad_hook=hook,
                 lr=train_cfg.lr if cfg.eta is None else cfg.eta)
    start = time.perf_counter()
    result: TrainResult = train(m, data, tc)
    elapsed = time.perf_counter() - start
    return SparsifyResult(result.model, result.history,
                          elapsed / max(1, tc.epochs), cfg.name)


# ---------------------------------------------------------------------------
# tuned presets per (regularizer, model, dataset), optionally split by the
# criterion the sparse run feeds; eta None means "reuse the finetune rate"
# ---------------------------------------------------------------------------

_PRESETS: dict[tuple, tuple] = {
    # (regularizer, criterion, model, dataset): (lam, eta, delta)
    ("group_lasso", "magnitude_l2", "vgg19", "cifar100"): (1e-5, 1e-3, 0.0),
    ("group_lasso", "magnitude_l2", "resnet18", "cifar100"): (5e-4, 5e-3, 0.0),
    ("group_lasso", "magnitude_l2", "resnet50", "cifar100"): (1e-4, 5e-3, 0.0),
    ("group_lasso", "magnitude_l2", "resnet18", "imagenet"): (5e-6, 5e-3, 0.0),
    ("group_lasso", "magnitude_l2", "resnet50", "imagenet"): (5e-4, 1e-2, 0.0),
    ("group_lasso", "magnitude_l2", "vit_small", "imagenet"): (1e-4, None, 0.0),
    ("group_lasso", "magnitude_l2", "yolov8", "coco"): (1e-4, 1e-3, 0.0),
    ("group_lasso", "bnscale", "vgg19", "cifar100"): (5e-4, 5e-3, 0.0),
    ("group_lasso", "bnscale", "resnet18", "cifar100"): (5e-6, 1e-2, 0.0),
    ("group_lasso", "bnscale", "resnet50", "cifar100"): (5e-6, 1e-2, 0.0),
    ("group_lasso", "bnscale", "resnet18", "imagenet"): (5e-4, 5e-3, 0.0),
    ("group_lasso", "bnscale", "resnet50", "imagenet"): (5e-4, 1e-2, 0.0),
    ("group_lasso", "bnscale", "vit_small", "imagenet"): (1e-4, None, 0.0),
    ("group_lasso", "bnscale", "yolov8", "coco"): (5e-4, 1e-3, 0.0),
    ("group_norm", "magnitude_l2", "vgg19", "cifar100"): (1e-5, 5e-3, 0.0),
    ("group_norm", "magnitude_l2", "resnet18", "cifar100"): (1e-4, 5e-3, 0.0),
    ("group_norm", "magnitude_l2", "resnet50", "cifar100"): (1e-4, 5e-3, 0.0),
    ("group_norm", "magnitude_l2", "resnet18", "imagenet"): (5e-6, 1e-2, 0.0),
    ("group_norm", "magnitude_l2", "resnet50", "imagenet"): (5e-4, 5e-3, 0.0),
    ("group_norm", "magnitude_l2", "vit_small", "imagenet"): (5e-4, None, 0.0),
    ("group_norm", "magnitude_l2", "yolov8", "coco"): (1e-4, 1e-2, 0.0),
    ("bnscale", "bnscale", "vgg19", "cifar100"): (5e-4, 5e-3, 0.0),
    ("bnscale", "bnscale", "resnet18", "cifar100"): (1e-4, 1e-2, 0.0),
    ("bnscale", "bnscale", "resnet50", "cifar100"): (1e-5, 1e-2, 0.0),
    ("bnscale", "bnscale", "resnet18", "imagenet"): (1e-4, 1e-2, 0.0),
    ("bnscale", "bnscale", "resnet50", "imagenet"): (5e-6, 1e-2, 0.0),
    ("bnscale", "bnscale", "yolov8", "coco"): (1e-5, 5e-3, 0.0),
    ("growing_reg", "magnitude_l2", "vgg19", "cifar100"): (1e-4, 1e-3, 1e-5),
    ("growing_reg", "magnitude_l2", "resnet18", "cifar100"): (5e-4, 1e-2, 1e-4),
    ("growing_reg", "magnitude_l2", "resnet50", "cifar100"): (1e-4, 1e-3, 1e-5),
    ("growing_reg", "magnitude_l2", "resnet18", "imagenet"): (1e-4, 5e-3, 5e-5),
    ("growing_reg", "magnitude_l2", "resnet50", "imagenet"): (5e-5, 1e-2, 1e-5),
    ("growing_reg", "magnitude_l2", "vit_small", "imagenet"): (5e-4, None, 1e-4),
    ("growing_reg", "magnitude_l2", "yolov8", "coco"): (1e-4, 5e-3, 5e-5),
}


def get_preset(regularizer: str, model: str, dataset: str,
               criterion: str | None = None) -> RegConfig:
    """Tuned RegConfig for a (regularizer, model, dataset) task.

    Some regularizers were tuned separately per downstream criterion;
    omit `criterion` to take the magnitude_l2 tuning when both exist.
    """
    candidates = ([criterion] if criterion is not None
                  else ["magnitude_l2", "bnscale"])
    for crit in candidates:
        key = (regularizer, crit, model, dataset)
        if key in _PRESETS:
            lam, eta, delta = _PRESETS[key]
            return RegConfig(regularizer, lam=lam, eta=eta, delta=delta)
    have = sorted({(r, m, d) for r, _, m, d in _PRESETS if r == regularizer})
    raise ConfigError(
        f"no preset for {(regularizer, model, dataset)}; tuned tasks: {have}")
