"""Neutral model representation: layer graph, parameter tensors, on-disk format.

A model lives on disk as a directory with two files:

* ``manifest.json`` -- graph topology, per-layer attributes, and for every
  parameter tensor its shape, byte offset into the blob, and CRC32.
* ``weights.bin``   -- all parameter tensors concatenated as row-major
  little-endian float32, in manifest order.

Graphs are treated as immutable once validated; every transform in the
package returns a new graph (or new layers) instead of mutating in place.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import GraphValidationError, ManifestError

FORMAT_TAG = "prunekit-model/1"

MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.bin"

# Closed set of supported ops. Unknown kinds are load errors.
KINDS = frozenset({
    "conv2d", "linear", "batchnorm2d", "relu", "maxpool2d", "avgpool2d",
    "globalavgpool", "flatten", "add", "softmax_ce_loss", "input", "output",
})

# Parameters updated by the trainer; running stats are carried, not trained.
TRAINABLE_PARAMS = frozenset({"weight", "bias", "gamma", "beta"})


class ParamRole(Enum):
    """Which (parameter, axis) pairs a structural removal slices.

    ConvOut / LinearOut also slice the bias when one is present; batchnorm
    scale/shift and running stats all share one axis.
    """

    CONV_OUT = "conv_out"
    CONV_IN = "conv_in"
    LINEAR_OUT = "linear_out"
    LINEAR_IN = "linear_in"
    NORM_SCALE_SHIFT = "norm_scale_shift"


# role -> list of (param name, axis, optional) pairs sliced together
ROLE_SLICES = {
    ParamRole.CONV_OUT: (("weight", 0, False), ("bias", 0, True)),
    ParamRole.CONV_IN: (("weight", 1, False),),
    ParamRole.LINEAR_OUT: (("weight", 0, False), ("bias", 0, True)),
    ParamRole.LINEAR_IN: (("weight", 1, False),),
    ParamRole.NORM_SCALE_SHIFT: (
        ("gamma", 0, False), ("beta", 0, False),
        ("running_mean", 0, False), ("running_var", 0, False),
    ),
}

# role -> (attr updated when the axis shrinks)
ROLE_ATTR = {
    ParamRole.CONV_OUT: "out_channels",
    ParamRole.CONV_IN: "in_channels",
    ParamRole.LINEAR_OUT: "out_features",
    ParamRole.LINEAR_IN: "in_features",
    ParamRole.NORM_SCALE_SHIFT: "num_features",
}


def roles_of(kind: str) -> tuple[ParamRole, ...]:
    """Prunable roles a layer kind exposes."""
    if kind == "conv2d":
        return (ParamRole.CONV_OUT, ParamRole.CONV_IN)
    if kind == "linear":
        return (ParamRole.LINEAR_OUT, ParamRole.LINEAR_IN)
    if kind == "batchnorm2d":
        return (ParamRole.NORM_SCALE_SHIFT,)
    return ()


@dataclass(frozen=True)
class LayerNode:
    """One op in the graph with its attributes and owned parameter tensors."""

    id: str
    kind: str
    attrs: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def role_extent(self, role: ParamRole) -> int:
        """Current extent of the prunable axis for `role`."""
        name, axis, _ = ROLE_SLICES[role][0]
        return int(self.params[name].shape[axis])


@dataclass
class ModelGraph:
    """Directed acyclic layer graph plus task metadata.

    edges are (src id, dst id, dst input slot); slots order multi-input
    nodes (``add`` takes slots 0 and 1).
    """

    name: str
    input_shape: tuple[int, int, int]
    num_classes: int
    nodes: dict[str, LayerNode]
    edges: list[tuple[str, str, int]]

    # -- topology helpers ---------------------------------------------------

    def inputs_of(self, node_id: str) -> list[str]:
        ins = sorted(
            ((slot, src) for src, dst, slot in self.edges if dst == node_id))
        return [src for _, src in ins]

    def outputs_of(self, node_id: str) -> list[str]:
        return [dst for src, dst, _ in self.edges if src == node_id]

    def topo_order(self) -> list[str]:
        """Kahn topological order, stable w.r.t. manifest node order."""
        order_hint = {nid: i for i, nid in enumerate(self.nodes)}
        indeg = {nid: 0 for nid in self.nodes}
        for src, dst, _ in self.edges:
            if src not in self.nodes or dst not in self.nodes:
                raise GraphValidationError(f"edge references unknown node: {src}->{dst}")
            indeg[dst] += 1
        ready = sorted((nid for nid, d in indeg.items() if d == 0),
                       key=order_hint.get)
        out = []
        while ready:
            nid = ready.pop(0)
            out.append(nid)
            changed = False
            for dst in self.outputs_of(nid):
                indeg[dst] -= 1
                if indeg[dst] == 0:
                    ready.append(dst)
                    changed = True
            if changed:
                ready.sort(key=order_hint.get)
        if len(out) != len(self.nodes):
            raise GraphValidationError("graph contains a cycle")
        return out

    # -- shape inference ----------------------------------------------------

    def output_shapes(self) -> dict[str, tuple[int, ...]]:
        """Per-sample output shape of every node; validates shape chaining."""
        shapes: dict[str, tuple[int, ...]] = {}
        for nid in self.topo_order():
            node = self.nodes[nid]
            ins = [shapes[s] for s in self.inputs_of(nid)]
            shapes[nid] = _infer_shape(node, ins, self)
        return shapes

    # -- validation ---------------------------------------------------------

    def validate(self) -> "ModelGraph":
        """Check every structural invariant; returns self for chaining."""
        input_ids = [n for n in self.nodes.values() if n.kind == "input"]
        output_ids = [n for n in self.nodes.values() if n.kind == "output"]
        if len(input_ids) != 1 or len(output_ids) != 1:
            raise GraphValidationError(
                f"expected exactly one input and one output node, got "
                f"{len(input_ids)} input(s), {len(output_ids)} output(s)")
        for node in self.nodes.values():
            if node.kind not in KINDS:
                raise GraphValidationError(
                    f"node {node.id!r}: unsupported kind {node.kind!r}")
            _check_params(node)
        seen = set()
        for src, dst, slot in self.edges:
            key = (dst, slot)
            if key in seen:
                raise GraphValidationError(
                    f"node {dst!r}: duplicate input slot {slot}")
            seen.add(key)
        self.output_shapes()  # raises on cycles / shape chaining breaks
        for node in self.nodes.values():
            for arr in node.params.values():
                if not np.all(np.isfinite(arr)):
                    raise GraphValidationError(
                        f"node {node.id!r}: non-finite parameter values")
                arr.flags.writeable = False
        return self

    def with_nodes(self, replacements: dict[str, LayerNode]) -> "ModelGraph":
        """New graph with some nodes swapped out; topology unchanged."""
        nodes = dict(self.nodes)
        nodes.update(replacements)
        return ModelGraph(self.name, self.input_shape, self.num_classes,
                          nodes, list(self.edges))


def _check_params(node: LayerNode) -> None:
    a, p = node.attrs, node.params
    for pname, arr in p.items():
        if arr.dtype != np.float32:
            raise GraphValidationError(
                f"node {node.id!r}: param {pname!r} is {arr.dtype}, expected float32")
    if node.kind == "conv2d":
        n_out, n_in, k = a["out_channels"], a["in_channels"], a["kernel"]
        want = (n_out, n_in, k, k)
        if p["weight"].shape != want:
            raise GraphValidationError(
                f"node {node.id!r}: conv weight shape {p['weight'].shape}, expected {want}")
        if "bias" in p and p["bias"].shape != (n_out,):
            raise GraphValidationError(
                f"node {node.id!r}: conv bias shape {p['bias'].shape}, expected {(n_out,)}")
    elif node.kind == "linear":
        want = (a["out_features"], a["in_features"])
        if p["weight"].shape != want:
            raise GraphValidationError(
                f"node {node.id!r}: linear weight shape {p['weight'].shape}, expected {want}")
        if "bias" in p and p["bias"].shape != (a["out_features"],):
            raise GraphValidationError(
                f"node {node.id!r}: linear bias shape mismatch")
    elif node.kind == "batchnorm2d":
        c = a["num_features"]
        for pname in ("gamma", "beta", "running_mean", "running_var"):
            if pname not in p or p[pname].shape != (c,):
                raise GraphValidationError(
                    f"node {node.id!r}: batchnorm param {pname!r} must have shape {(c,)}")
    elif p:
        raise GraphValidationError(
            f"node {node.id!r}: kind {node.kind!r} takes no parameters")


def conv_out_hw(h: int, w: int, kernel: int, stride: int, padding: int) -> tuple[int, int]:
    oh = (h + 2 * padding - kernel) // stride + 1
    ow = (w + 2 * padding - kernel) // stride + 1
    if oh <= 0 or ow <= 0:
        raise GraphValidationError(
            f"non-positive output extent from {h}x{w}, k={kernel}, s={stride}, p={padding}")
    return oh, ow


def _infer_shape(node: LayerNode, ins: list[tuple[int, ...]],
                 g: ModelGraph) -> tuple[int, ...]:
    def need(n):
        if len(ins) != n:
            raise GraphValidationError(
                f"node {node.id!r}: expected {n} input(s), got {len(ins)}")

    k = node.kind
    if k == "input":
        need(0)
        return tuple(g.input_shape)
    if k == "output":
        need(1)
        if ins[0] != (g.num_classes,):
            raise GraphValidationError(
                f"node {node.id!r}: output expects ({g.num_classes},) logits, got {ins[0]}")
        return ins[0]
    if k == "conv2d":
        need(1)
        if len(ins[0]) != 3 or ins[0][0] != node.attrs["in_channels"]:
            raise GraphValidationError(
                f"node {node.id!r}: input shape {ins[0]} does not match "
                f"in_channels={node.attrs['in_channels']}")
        oh, ow = conv_out_hw(ins[0][1], ins[0][2], node.attrs["kernel"],
                             node.attrs["stride"], node.attrs["padding"])
        return (node.attrs["out_channels"], oh, ow)
    if k == "linear":
        need(1)
        if ins[0] != (node.attrs["in_features"],):
            raise GraphValidationError(
                f"node {node.id!r}: input shape {ins[0]} does not match "
                f"in_features={node.attrs['in_features']}")
        return (node.attrs["out_features"],)
    if k == "batchnorm2d":
        need(1)
        if len(ins[0]) != 3 or ins[0][0] != node.attrs["num_features"]:
            raise GraphValidationError(
                f"node {node.id!r}: batchnorm over {node.attrs['num_features']} "
                f"channels fed {ins[0]}")
        return ins[0]
    if k in ("maxpool2d", "avgpool2d"):
        need(1)
        if len(ins[0]) != 3:
            raise GraphValidationError(f"node {node.id!r}: pooling needs CxHxW input")
        oh, ow = conv_out_hw(ins[0][1], ins[0][2], node.attrs["kernel"],
                             node.attrs["stride"], node.attrs.get("padding", 0))
        return (ins[0][0], oh, ow)
    if k == "globalavgpool":
        need(1)
        if len(ins[0]) != 3:
            raise GraphValidationError(f"node {node.id!r}: globalavgpool needs CxHxW input")
        return (ins[0][0],)
    if k == "flatten":
        need(1)
        if len(ins[0]) != 3:
            raise GraphValidationError(f"node {node.id!r}: flatten needs CxHxW input")
        c, h, w = ins[0]
        return (c * h * w,)
    if k == "relu":
        need(1)
        return ins[0]
    if k == "softmax_ce_loss":
        need(1)
        if len(ins[0]) != 1:
            raise GraphValidationError(f"node {node.id!r}: loss head needs a flat vector")
        return ins[0]
    if k == "add":
        need(2)
        if ins[0] != ins[1]:
            raise GraphValidationError(
                f"node {node.id!r}: add operands differ: {ins[0]} vs {ins[1]}")
        return ins[0]
    raise GraphValidationError(f"node {node.id!r}: unsupported kind {k!r}")


# ---------------------------------------------------------------------------
# structural removal
# ---------------------------------------------------------------------------

def slice_param(layer: LayerNode, role: ParamRole, keep: list[int]) -> LayerNode:
    """Return a copy of `layer` keeping only `keep` along the role's axis.

    `keep` must be strictly increasing and within range. An empty keep list
    is rejected here; protection floors upstream must prevent it.
    """
    if role not in roles_of(layer.kind):
        raise GraphValidationError(
            f"node {layer.id!r}: role {role.value} not valid for kind {layer.kind!r}")
    if len(keep) == 0:
        raise GraphValidationError(
            f"node {layer.id!r}: empty keep list would delete the layer")
    extent = layer.role_extent(role)
    prev = -1
    for idx in keep:
        if idx <= prev:
            raise GraphValidationError(
                f"node {layer.id!r}: keep indices must be strictly increasing")
        if not 0 <= idx < extent:
            raise GraphValidationError(
                f"node {layer.id!r}: keep index {idx} out of range [0, {extent})")
        prev = idx

    keep_arr = np.asarray(keep, dtype=np.intp)
    params = dict(layer.params)
    for pname, axis, optional in ROLE_SLICES[role]:
        if pname not in params:
            if optional:
                continue
            raise GraphValidationError(
                f"node {layer.id!r}: missing param {pname!r} for role {role.value}")
        params[pname] = np.ascontiguousarray(np.take(params[pname], keep_arr, axis=axis))
    attrs = dict(layer.attrs)
    attrs[ROLE_ATTR[role]] = len(keep)
    return replace(layer, attrs=attrs, params=params)


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

def save_model(m: ModelGraph, path: str | Path) -> None:
    """Write manifest.json + weights.bin; round-trips bit-exactly."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = bytearray()
    nodes_json = []
    for nid in m.nodes:
        node = m.nodes[nid]
        params_json = {}
        for pname in sorted(node.params):
            raw = np.ascontiguousarray(node.params[pname], dtype="<f4").tobytes()
            params_json[pname] = {
                "shape": list(node.params[pname].shape),
                "offset": len(blob),
                "crc32": zlib.crc32(raw) & 0xFFFFFFFF,
            }
            blob.extend(raw)
        nodes_json.append({
            "id": node.id,
            "kind": node.kind,
            "attrs": node.attrs,
            "params": params_json,
        })
    manifest = {
        "format": FORMAT_TAG,
        "name": m.name,
        "input_shape": list(m.input_shape),
        "num_classes": m.num_classes,
        "nodes": nodes_json,
        "edges": [[src, dst, slot] for src, dst, slot in m.edges],
    }
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))
    (path / WEIGHTS_NAME).write_bytes(bytes(blob))


def load_model(path: str | Path) -> ModelGraph:
    """Load and fully validate a model directory."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_NAME).read_text())
    except FileNotFoundError:
        raise ManifestError(f"no {MANIFEST_NAME} in {path}")
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path / MANIFEST_NAME}: invalid JSON: {e}")
    if manifest.get("format") != FORMAT_TAG:
        raise ManifestError(
            f"unsupported format tag {manifest.get('format')!r}, expected {FORMAT_TAG!r}")
    try:
        blob = (path / WEIGHTS_NAME).read_bytes()
    except FileNotFoundError:
        raise ManifestError(f"no {WEIGHTS_NAME} in {path}")

    nodes: dict[str, LayerNode] = {}
    for nj in manifest["nodes"]:
        nid = nj["id"]
        if nj["kind"] not in KINDS:
            raise ManifestError(f"node {nid!r}: unsupported kind {nj['kind']!r}")
        if nid in nodes:
            raise ManifestError(f"duplicate node id {nid!r}")
        params = {}
        for pname, pj in nj["params"].items():
            shape = tuple(int(s) for s in pj["shape"])
            if any(s <= 0 for s in shape):
                raise ManifestError(f"node {nid!r}: param {pname!r} has non-positive extent")
            count = int(np.prod(shape))
            start, end = pj["offset"], pj["offset"] + 4 * count
            if end > len(blob):
                raise ManifestError(
                    f"node {nid!r}: param {pname!r} extends past end of blob "
                    f"({end} > {len(blob)})")
            raw = blob[start:end]
            if (zlib.crc32(raw) & 0xFFFFFFFF) != pj["crc32"]:
                raise ManifestError(f"node {nid!r}: param {pname!r} CRC32 mismatch")
            params[pname] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        nodes[nid] = LayerNode(id=nid, kind=nj["kind"], attrs=dict(nj["attrs"]),
                               params=params)

    g = ModelGraph(
        name=manifest.get("name", path.name),
        input_shape=tuple(int(x) for x in manifest["input_shape"]),
        num_classes=int(manifest["num_classes"]),
        nodes=nodes,
        edges=[(e[0], e[1], int(e[2])) for e in manifest["edges"]],
    )
    try:
        return g.validate()
    except GraphValidationError as e:
        raise ManifestError(f"model at {path} failed validation: {e}")


def graphs_equal(a: ModelGraph, b: ModelGraph, bitwise: bool = True) -> bool:
    """Structural (and by default bit-exact parameter) equality."""
    if (a.name, a.input_shape, a.num_classes) != (b.name, b.input_shape, b.num_classes):
        return False
    if list(a.nodes) != list(b.nodes) or a.edges != b.edges:
        return False
    for nid, na in a.nodes.items():
        nb = b.nodes[nid]
        if (na.kind, na.attrs) != (nb.kind, nb.attrs) or set(na.params) != set(nb.params):
            return False
        for pname, arr in na.params.items():
            other = nb.params[pname]
            if arr.shape != other.shape:
                return False
            same = (arr.tobytes() == other.tobytes()) if bitwise else np.allclose(arr, other)
            if not same:
                return False
    return True
