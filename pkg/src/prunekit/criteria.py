"""Importance criteria: per-group channel scores.

Every criterion produces, for each prunable group, one score per channel
index (higher = keep). Scores come from per-member vectors over the
group's shared index space; members are normalized and averaged by
``aggregate_group``. Members annotated with an index expansion S (a
flatten between producer and consumer) contribute at channel granularity:
block k covers flat indices [k*S, (k+1)*S).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Dataset, forward, loss_and_grads, per_sample_grads
from .errors import ConfigError
from .groups import PruneGroup
from .model import ROLE_SLICES, TRAINABLE_PARAMS, ModelGraph, ParamRole

NORMALIZERS = ("none", "max", "mean", "gaussian")

# param carrying the member's weight content, by layer kind
_WEIGHT_OF = {"conv2d": "weight", "linear": "weight", "batchnorm2d": "gamma"}

_IN_ROLES = (ParamRole.CONV_IN, ParamRole.LINEAR_IN)


def _role_matrix(arr: np.ndarray, axis: int, width: int) -> np.ndarray:
    """[width, rest] view of `arr` grouped along the role axis.

    When the axis is wider than the group (flatten expansion), consecutive
    blocks of extent/width rows fold into one row per channel.
    """
    m = np.moveaxis(np.asarray(arr, dtype=np.float64), axis, 0)
    return m.reshape(width, -1)


def _member_weight(ctx, member, width) -> np.ndarray:
    node = ctx.model.nodes[member.layer]
    pname = _WEIGHT_OF[node.kind]
    _, axis, _ = ROLE_SLICES[member.role][0]
    return _role_matrix(node.params[pname], axis, width)


def _trainable_slices(node, role, width):
    """(param name, axis, [width, rest] param matrix) over every trainable
    tensor the role slices."""
    for pname, axis, _ in ROLE_SLICES[role]:
        if pname not in TRAINABLE_PARAMS or pname not in node.params:
            continue
        yield pname, axis, _role_matrix(node.params[pname], axis, width)


# ---------------------------------------------------------------------------
# criterion bodies: group -> list of per-member score vectors
# ---------------------------------------------------------------------------

def _magnitude(p):
    def fn(ctx, g: PruneGroup):
        out = []
        for member in g.members:
            m = _member_weight(ctx, member, g.width)
            out.append(np.sum(np.abs(m) ** p, axis=1) ** (1.0 / p))
        return out
    return fn


def _lamp(ctx, g: PruneGroup):
    out = []
    for member in g.members:
        u = np.sum(_member_weight(ctx, member, g.width) ** 2, axis=1)
        order = np.argsort(u, kind="stable")
        u_sorted = u[order]
        suffix = np.cumsum(u_sorted[::-1])[::-1]
        scores = np.divide(u_sorted, suffix, out=np.zeros_like(u_sorted),
                           where=suffix > 0)
        member_scores = np.empty_like(scores)
        member_scores[order] = scores
        out.append(member_scores)
    return out


def _fpgm(ctx, g: PruneGroup):
    out = []
    for member in g.members:
        m = _member_weight(ctx, member, g.width)
        d2 = np.sum((m[:, None, :] - m[None, :, :]) ** 2, axis=2)
        out.append(np.sqrt(np.maximum(d2, 0.0)).sum(axis=1))
    return out


def _bnscale(ctx, g: PruneGroup):
    out = []
    for member in g.members:
        node = ctx.model.nodes[member.layer]
        if node.kind != "batchnorm2d":
            continue
        out.append(np.abs(node.params["gamma"].astype(np.float64)))
    if not out:
        raise ConfigError(
            f"group {g.id}: bnscale requires a batchnorm member "
            f"({', '.join(sorted({m.layer for m in g.members}))})")
    return out


def _random(ctx, g: PruneGroup):
    rng = np.random.default_rng([ctx.seed, g.id])
    return [rng.random(g.width)]


def _taylor(ctx, g: PruneGroup):
    grads = ctx.batch_grads
    out = []
    for member in g.members:
        node = ctx.model.nodes[member.layer]
        acc = np.zeros(g.width)
        for pname, axis, w in _trainable_slices(node, member.role, g.width):
            s = _role_matrix(grads[node.id][pname], axis, g.width)
            acc += (w * s).sum(axis=1)
        out.append(acc ** 2)
    return out


def _obd_hessian(ctx, g: PruneGroup):
    per = ctx.per_sample
    out = []
    for member in g.members:
        node = ctx.model.nodes[member.layer]
        acc = np.zeros(g.width)
        for pname, axis, w in _trainable_slices(node, member.role, g.width):
            h = _role_matrix(np.mean(per[node.id][pname] ** 2, axis=0), axis, g.width)
            acc += (0.5 * h * w ** 2).sum(axis=1)
        out.append(acc)
    return out


def _hrank(ctx, g: PruneGroup):
    acts = ctx.activations
    out = []
    for member in g.members:
        if member.role is not ParamRole.CONV_OUT:
            continue
        fm = acts[member.layer].astype(np.float64)
        b, c, h, w = fm.shape
        if h < 2 or w < 2:
            raise ConfigError(
                f"group {g.id}: feature maps of {member.layer!r} are {h}x{w}; "
                f"rank scoring needs spatial extent >= 2")
        sv = np.linalg.svd(fm.reshape(b * c, h, w), compute_uv=False)
        tau = 1e-6 * sv[:, :1]
        ranks = (sv > tau).sum(axis=1).reshape(b, c)
        out.append(ranks.mean(axis=0).astype(np.float64))
    if not out:
        raise ConfigError(f"group {g.id}: rank scoring needs a conv output member")
    return out


def _thinet(ctx, g: PruneGroup):
    acts = ctx.activations
    out = []
    for member in g.members:
        if member.role not in _IN_ROLES:
            continue
        node = ctx.model.nodes[member.layer]
        src = ctx.model.inputs_of(member.layer)[0]
        x = acts[src].astype(np.float64)
        wt = node.params["weight"].astype(np.float64)
        if member.role is ParamRole.CONV_IN:
            a = node.attrs
            p = a["padding"]
            xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
            win = _sliding(xp, a["kernel"], a["stride"])
            contrib = np.einsum("bcyxuv,ocuv->bocyx", win, wt)
            scores = (contrib ** 2).sum(axis=(0, 1, 3, 4))
        else:
            scores = (x ** 2).sum(axis=0) * (wt ** 2).sum(axis=0)
        out.append(scores.reshape(g.width, -1).sum(axis=1))
    if not out:
        raise ConfigError(f"group {g.id}: reconstruction scoring needs a consumer member")
    return out


def _sliding(xp, k, stride):
    b, c, h, w = xp.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    s0, s1, s2, s3 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (b, c, oh, ow, k, k), (s0, s1, s2 * stride, s3 * stride, s2, s3))


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CriterionSpec:
    """Name, data needs, and scoring body of one importance criterion."""

    name: str
    data_driven: bool
    fn: object

    @property
    def stochastic(self) -> bool:
        """True when repeated runs legitimately differ (fresh seeds)."""
        return self.data_driven or self.name == "random"


CRITERIA: dict[str, CriterionSpec] = {
    spec.name: spec for spec in (
        CriterionSpec("magnitude_l1", False, _magnitude(1)),
        CriterionSpec("magnitude_l2", False, _magnitude(2)),
        CriterionSpec("lamp", False, _lamp),
        CriterionSpec("fpgm", False, _fpgm),
        CriterionSpec("bnscale", False, _bnscale),
        CriterionSpec("random", False, _random),
        CriterionSpec("taylor", True, _taylor),
        CriterionSpec("obd_hessian", True, _obd_hessian),
        CriterionSpec("hrank", True, _hrank),
        CriterionSpec("thinet", True, _thinet),
    )
}


def aggregate_group(member_scores, normalize: str = "max") -> np.ndarray:
    """Normalize each member vector, then average them elementwise.

    gaussian standardizes then shifts the minimum to zero so every
    normalizer yields nonnegative scores.
    """
    if normalize not in NORMALIZERS:
        raise ConfigError(
            f"unknown normalization {normalize!r}; expected one of {NORMALIZERS}")
    if not member_scores:
        raise ConfigError("cannot aggregate an empty member score list")
    normed = []
    for v in member_scores:
        v = np.asarray(v, dtype=np.float64)
        if normalize == "max":
            peak = np.max(v)
            v = v / peak if peak > 0 else v
        elif normalize == "mean":
            center = np.mean(v)
            v = v / center if center > 0 else v
        elif normalize == "gaussian":
            sd = np.std(v)
            v = (v - np.mean(v)) / sd if sd > 0 else np.zeros_like(v)
            v = v - np.min(v)
        normed.append(v)
    return np.mean(normed, axis=0)


class _ScoreContext:
    """Shared, lazily computed inputs for one scoring call."""

    def __init__(self, model: ModelGraph, data, seed: int):
        self.model = model
        self.seed = seed
        if isinstance(data, Dataset):
            self._x, self._y = data.inputs, data.labels
        elif data is not None:
            self._x, self._y = data
        else:
            self._x = self._y = None
        self._rec = None
        self._grads = None
        self._per = None

    @property
    def activations(self):
        if self._rec is None:
            self._rec = forward(self.model, self._x, mode="eval", dtype=np.float64)
        return self._rec.activations

    @property
    def batch_grads(self):
        if self._grads is None:
            _, self._grads = loss_and_grads(
                self.model, self._x, self._y, mode="eval", dtype=np.float64)
        return self._grads

    @property
    def per_sample(self):
        if self._per is None:
            self._per = per_sample_grads(self.model, self._x, self._y,
                                         dtype=np.float64)
        return self._per


def compute_group_scores(model: ModelGraph, groups, criterion: str, *,
                         data=None, seed: int = 0,
                         normalize: str = "max") -> dict[int, np.ndarray]:
    """Score every prunable group; returns {group id: [width] float64}."""
    if criterion not in CRITERIA:
        raise ConfigError(
            f"unknown criterion {criterion!r}; expected one of {sorted(CRITERIA)}")
    spec = CRITERIA[criterion]
    if spec.data_driven and data is None:
        raise ConfigError(f"criterion {criterion!r} needs calibration data")
    ctx = _ScoreContext(model, data, seed)
    out = {}
    for g in groups:
        if g.unprunable:
            continue
        out[g.id] = aggregate_group(spec.fn(ctx, g), normalize)
    return out
