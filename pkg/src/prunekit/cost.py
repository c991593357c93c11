"""Parameter and FLOPs accounting, and speedup -> FLOPs budget conversion.

Counting conventions:
* one multiply-accumulate = one FLOP (the constant cancels in speedup
  ratios either way);
* conv cost is N*N_out*H_out*W_out*K^2 MACs per sample, bias not counted;
* batchnorm costs 2 ops per output element; pools/relu/add/softmax count
  one op per output element; flatten and I/O nodes are free;
* speedup = FLOPs_original / FLOPs_pruned, so 4x keeps 25% of FLOPs.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import GraphValidationError
from .model import LayerNode, ModelGraph, conv_out_hw


@dataclass(frozen=True)
class LayerCost:
    params: int
    flops: int
    out_shape: tuple[int, ...]


@dataclass
class CostReport:
    """Per-layer and total cost of one model, per input sample."""

    model_name: str
    per_layer: dict[str, LayerCost]
    total_params: int
    total_flops: int

    def flops_pct_of(self, base: "CostReport") -> float:
        return 100.0 * self.total_flops / base.total_flops

    def params_pct_of(self, base: "CostReport") -> float:
        return 100.0 * self.total_params / base.total_params

    def to_json(self) -> dict:
        return {
            "model": self.model_name,
            "total_params": self.total_params,
            "total_flops": self.total_flops,
            "layers": {
                nid: {"params": lc.params, "flops": lc.flops,
                      "out_shape": list(lc.out_shape)}
                for nid, lc in self.per_layer.items()
            },
        }


def layer_cost(layer: LayerNode, in_shape: tuple[int, ...]) -> LayerCost:
    """Cost of one layer given its per-sample input shape."""
    k = layer.kind
    if k in ("input", "output", "flatten"):
        if k == "flatten":
            c, h, w = in_shape
            return LayerCost(0, 0, (c * h * w,))
        return LayerCost(0, 0, tuple(in_shape) if in_shape else ())
    if k == "conv2d":
        a = layer.attrs
        oh, ow = conv_out_hw(in_shape[1], in_shape[2], a["kernel"], a["stride"],
                             a["padding"])
        params = a["out_channels"] * a["in_channels"] * a["kernel"] ** 2
        if "bias" in layer.params:
            params += a["out_channels"]
        flops = a["in_channels"] * a["out_channels"] * oh * ow * a["kernel"] ** 2
        return LayerCost(params, flops, (a["out_channels"], oh, ow))
    if k == "linear":
        a = layer.attrs
        params = a["out_features"] * a["in_features"]
        if "bias" in layer.params:
            params += a["out_features"]
        return LayerCost(params, a["in_features"] * a["out_features"],
                         (a["out_features"],))
    if k == "batchnorm2d":
        c, h, w = in_shape
        return LayerCost(4 * layer.attrs["num_features"], 2 * c * h * w, in_shape)
    if k in ("maxpool2d", "avgpool2d"):
        c, h, w = in_shape
        oh, ow = conv_out_hw(h, w, layer.attrs["kernel"], layer.attrs["stride"],
                             layer.attrs.get("padding", 0))
        return LayerCost(0, c * oh * ow, (c, oh, ow))
    if k == "globalavgpool":
        c = in_shape[0]
        return LayerCost(0, c, (c,))
    if k in ("relu", "add", "softmax_ce_loss"):
        return LayerCost(0, int(_numel(in_shape)), tuple(in_shape))
    raise GraphValidationError(f"no cost rule for kind {k!r}")


def _numel(shape):
    n = 1
    for s in shape:
        n *= s
    return n


def model_cost(m: ModelGraph) -> CostReport:
    """Topological traversal accumulating layer costs with propagated shapes."""
    shapes = m.output_shapes()
    per_layer = {}
    total_params = 0
    total_flops = 0
    for nid in m.topo_order():
        node = m.nodes[nid]
        ins = m.inputs_of(nid)
        in_shape = shapes[ins[0]] if ins else ()
        lc = layer_cost(node, in_shape)
        per_layer[nid] = lc
        total_params += lc.params
        total_flops += lc.flops
    return CostReport(m.name, per_layer, total_params, total_flops)


def flops_budget(original: CostReport, speedup: float) -> float:
    """FLOPs allowance for a target speedup (original/speedup)."""
    if speedup < 1:
        raise ValueError(f"speedup must be >= 1, got {speedup}")
    return original.total_flops / speedup
