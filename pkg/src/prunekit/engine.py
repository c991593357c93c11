"""Forward, backward, SGD training, and evaluation on layer graphs.

All arithmetic runs in float64; results are stored back at the requested
activation dtype (float32 by default), so wider accumulators never leak
into storage. Graphs are immutable: the trainer keeps its own parameter
state and returns a fresh graph at the end.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GraphValidationError, ManifestError, NumericsError
from .model import TRAINABLE_PARAMS, LayerNode, ModelGraph

DATA_NAME = "data.bin"
LABELS_NAME = "labels.bin"
META_NAME = "meta.json"


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """In-memory labelled image set: float32 [N,C,H,W] plus uint32 labels."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint32)
        if self.inputs.ndim != 4:
            raise ManifestError(f"dataset inputs must be [N,C,H,W], got {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ManifestError("dataset labels must be one uint32 per sample")
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise ManifestError(
                f"label {int(self.labels.max())} out of range for {self.num_classes} classes")

    @property
    def count(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return tuple(self.inputs.shape[1:])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / DATA_NAME).write_bytes(
        np.ascontiguousarray(ds.inputs, dtype="<f4").tobytes())
    (path / LABELS_NAME).write_bytes(
        np.ascontiguousarray(ds.labels, dtype="<u4").tobytes())
    meta = {"shape": list(ds.sample_shape), "num_classes": ds.num_classes,
            "count": ds.count}
    (path / META_NAME).write_text(json.dumps(meta, indent=1))


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    try:
        meta = json.loads((path / META_NAME).read_text())
    except FileNotFoundError:
        raise ManifestError(f"no {META_NAME} in {path}")
    shape, count = tuple(meta["shape"]), int(meta["count"])
    raw = (path / DATA_NAME).read_bytes()
    want = 4 * count * int(np.prod(shape))
    if len(raw) != want:
        raise ManifestError(f"{DATA_NAME} holds {len(raw)} bytes, expected {want}")
    inputs = np.frombuffer(raw, dtype="<f4").reshape((count, *shape)).copy()
    raw = (path / LABELS_NAME).read_bytes()
    if len(raw) != 4 * count:
        raise ManifestError(f"{LABELS_NAME} holds {len(raw)} bytes, expected {4 * count}")
    labels = np.frombuffer(raw, dtype="<u4").copy()
    return Dataset(inputs, labels, int(meta["num_classes"]))


def iter_batches(ds: Dataset, batch_size: int, shuffle: bool = False, rng=None):
    order = np.arange(ds.count)
    if shuffle:
        order = (rng or np.random.default_rng()).permutation(ds.count)
    for start in range(0, ds.count, batch_size):
        idx = order[start:start + batch_size]
        yield ds.inputs[idx], ds.labels[idx]


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

@dataclass
class ExecutionRecord:
    """Everything one forward pass produced, kept for the backward pass."""

    activations: dict[str, np.ndarray]
    mode: str
    dtype: type
    logits_node: str
    probs: np.ndarray | None = None
    loss: float | None = None
    batch_stats: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def _loss_site(m: ModelGraph) -> tuple[str, str | None]:
    """(logits node, explicit softmax node or None)."""
    out_in = m.inputs_of(next(n.id for n in m.nodes.values() if n.kind == "output"))[0]
    if m.nodes[out_in].kind == "softmax_ce_loss":
        return m.inputs_of(out_in)[0], out_in
    return out_in, None


def _param(node: LayerNode, name: str, params) -> np.ndarray:
    if params is not None and node.id in params and name in params[node.id]:
        return np.asarray(params[node.id][name], dtype=np.float64)
    return node.params[name].astype(np.float64)


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Sliding [B,C,OH,OW,k,k] view over an already padded input."""
    b, c, h, w = xp.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    s0, s1, s2, s3 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (b, c, oh, ow, k, k), (s0, s1, s2 * stride, s3 * stride, s2, s3))


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """[B,C,H,W] -> [B, C*k*k, OH*OW] patch matrix."""
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = _windows(xp, k, stride)
    b, c, oh, ow = win.shape[:4]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * k * k, oh * ow)


def _col2im(dcols: np.ndarray, x_shape, k: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patches back onto the input."""
    b, c, h, w = x_shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    d6 = dcols.reshape(b, c, k, k, oh, ow)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += d6[:, :, i, j]
    return dxp[:, :, pad:pad + h, pad:pad + w]


def forward(m: ModelGraph, x: np.ndarray, labels=None, *, params=None,
            mode: str = "eval", dtype=np.float32) -> ExecutionRecord:
    """Run the graph on a batch; `params` optionally overrides node tensors.

    In "train" mode batchnorm normalizes with biased batch statistics and
    records them; in "eval" mode it uses the stored running statistics.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x)
    if x.ndim != 4:
        raise GraphValidationError(f"forward expects [B,C,H,W] input, got {x.shape}")
    logits_node, softmax_node = _loss_site(m)
    acts: dict[str, np.ndarray] = {}
    stats: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    for nid in m.topo_order():
        node = m.nodes[nid]
        ins = [acts[s].astype(np.float64) for s in m.inputs_of(nid)]
        k = node.kind
        if k == "input":
            y = x.astype(np.float64)
        elif k == "conv2d":
            a = node.attrs
            cols = _im2col(ins[0], a["kernel"], a["stride"], a["padding"])
            wm = _param(node, "weight", params).reshape(a["out_channels"], -1)
            y = np.matmul(wm, cols)
            if "bias" in node.params:
                y += _param(node, "bias", params)[:, None]
            _, oh, ow = _conv_shape(ins[0].shape, a)
            y = y.reshape(x.shape[0], a["out_channels"], oh, ow)
        elif k == "linear":
            y = ins[0] @ _param(node, "weight", params).T
            if "bias" in node.params:
                y += _param(node, "bias", params)
        elif k == "batchnorm2d":
            a = node.attrs
            gamma = _param(node, "gamma", params)
            beta = _param(node, "beta", params)
            if mode == "train":
                mean = ins[0].mean(axis=(0, 2, 3))
                var = ins[0].var(axis=(0, 2, 3))  # biased
                stats[nid] = (mean, var)
            else:
                mean = _param(node, "running_mean", params)
                var = _param(node, "running_var", params)
            invstd = 1.0 / np.sqrt(var + a["epsilon"])
            y = ((ins[0] - mean[:, None, None]) * invstd[:, None, None]
                 * gamma[:, None, None] + beta[:, None, None])
        elif k == "relu":
            y = np.maximum(ins[0], 0.0)
        elif k == "maxpool2d":
            kk, s = node.attrs["kernel"], node.attrs["stride"]
            p = node.attrs.get("padding", 0)
            xp = np.pad(ins[0], ((0, 0), (0, 0), (p, p), (p, p)),
                        constant_values=-np.inf)
            y = _windows(xp, kk, s).max(axis=(-2, -1))
        elif k == "avgpool2d":
            kk, s = node.attrs["kernel"], node.attrs["stride"]
            p = node.attrs.get("padding", 0)
            xp = np.pad(ins[0], ((0, 0), (0, 0), (p, p), (p, p)))
            y = _windows(xp, kk, s).mean(axis=(-2, -1))
        elif k == "globalavgpool":
            y = ins[0].mean(axis=(2, 3))
        elif k == "flatten":
            y = ins[0].reshape(x.shape[0], -1)
        elif k == "add":
            y = ins[0] + ins[1]
        elif k == "softmax_ce_loss":
            z = ins[0] - ins[0].max(axis=1, keepdims=True)
            e = np.exp(z)
            y = e / e.sum(axis=1, keepdims=True)
        elif k == "output":
            y = ins[0]
        else:
            raise GraphValidationError(f"node {nid!r}: unsupported kind {k!r}")
        acts[nid] = y.astype(dtype)

    rec = ExecutionRecord(acts, mode, dtype, logits_node, batch_stats=stats)
    if softmax_node is not None:
        rec.probs = acts[softmax_node]
    else:
        z = acts[logits_node].astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        rec.probs = (e / e.sum(axis=1, keepdims=True)).astype(dtype)
    if labels is not None:
        labels = np.asarray(labels)
        p = rec.probs.astype(np.float64)
        picked = p[np.arange(len(labels)), labels]
        with np.errstate(divide="ignore"):
            rec.loss = float(-np.mean(np.log(picked)))
    return rec


def _conv_shape(in_shape, attrs):
    _, _, h, w = in_shape
    oh = (h + 2 * attrs["padding"] - attrs["kernel"]) // attrs["stride"] + 1
    ow = (w + 2 * attrs["padding"] - attrs["kernel"]) // attrs["stride"] + 1
    return attrs["out_channels"], oh, ow


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(m: ModelGraph, rec: ExecutionRecord, labels, *,
             params=None) -> dict[str, dict[str, np.ndarray]]:
    """Gradients of the mean cross-entropy loss w.r.t. trainable parameters.

    Everything is recomputed from the activations stored in `rec`, so the
    gradients match the precision the forward pass actually ran at.
    Returns {node id: {param name: float64 array}}.
    """
    labels = np.asarray(labels)
    b = len(labels)
    p = rec.probs.astype(np.float64)
    dz = p.copy()
    dz[np.arange(b), labels] -= 1.0
    dz /= b

    grad_acts: dict[str, np.ndarray] = {rec.logits_node: dz}
    grads: dict[str, dict[str, np.ndarray]] = {}
    order = m.topo_order()
    for nid in reversed(order):
        if nid not in grad_acts:
            continue
        g = grad_acts.pop(nid)
        node = m.nodes[nid]
        srcs = m.inputs_of(nid)
        ins = [rec.activations[s].astype(np.float64) for s in srcs]
        k = node.kind
        dins: list[np.ndarray] = []

        if k == "input":
            continue
        elif k == "conv2d":
            a = node.attrs
            cols = _im2col(ins[0], a["kernel"], a["stride"], a["padding"])
            gf = g.reshape(g.shape[0], g.shape[1], -1)
            gw = np.tensordot(gf, cols, axes=([0, 2], [0, 2]))
            entry = grads.setdefault(nid, {})
            entry["weight"] = gw.reshape(node.params["weight"].shape)
            if "bias" in node.params:
                entry["bias"] = g.sum(axis=(0, 2, 3))
            wm = _param(node, "weight", params).reshape(a["out_channels"], -1)
            dcols = np.matmul(wm.T, gf)
            dins = [_col2im(dcols, ins[0].shape, a["kernel"], a["stride"], a["padding"])]
        elif k == "linear":
            entry = grads.setdefault(nid, {})
            entry["weight"] = g.T @ ins[0]
            if "bias" in node.params:
                entry["bias"] = g.sum(axis=0)
            dins = [g @ _param(node, "weight", params)]
        elif k == "batchnorm2d":
            a = node.attrs
            gamma = _param(node, "gamma", params)
            if rec.mode == "train":
                mean, var = rec.batch_stats[nid]
            else:
                mean = _param(node, "running_mean", params)
                var = _param(node, "running_var", params)
            invstd = 1.0 / np.sqrt(var + a["epsilon"])
            xhat = (ins[0] - mean[:, None, None]) * invstd[:, None, None]
            entry = grads.setdefault(nid, {})
            entry["gamma"] = (g * xhat).sum(axis=(0, 2, 3))
            entry["beta"] = g.sum(axis=(0, 2, 3))
            dxhat = g * gamma[:, None, None]
            if rec.mode == "train":
                n = g.shape[0] * g.shape[2] * g.shape[3]
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dins = [(invstd[:, None, None] / n) * (n * dxhat - s1 - xhat * s2)]
            else:
                dins = [dxhat * invstd[:, None, None]]
        elif k == "relu":
            dins = [g * (ins[0] > 0)]
        elif k == "maxpool2d":
            kk, s = node.attrs["kernel"], node.attrs["stride"]
            pd = node.attrs.get("padding", 0)
            xp = np.pad(ins[0], ((0, 0), (0, 0), (pd, pd), (pd, pd)),
                        constant_values=-np.inf)
            win = _windows(xp, kk, s)
            bb, c, oh, ow = win.shape[:4]
            idx = win.reshape(bb, c, oh, ow, kk * kk).argmax(axis=-1)
            scat = np.zeros((bb, c, oh, ow, kk * kk), dtype=np.float64)
            np.put_along_axis(scat, idx[..., None], g[..., None], axis=-1)
            d6 = scat.reshape(bb, c, oh, ow, kk, kk).transpose(0, 1, 4, 5, 2, 3)
            dins = [_pool_scatter(d6, ins[0].shape, kk, s, pd)]
        elif k == "avgpool2d":
            kk, s = node.attrs["kernel"], node.attrs["stride"]
            pd = node.attrs.get("padding", 0)
            bb, c, oh, ow = g.shape
            d6 = np.broadcast_to((g / (kk * kk))[:, :, None, None, :, :],
                                 (bb, c, kk, kk, oh, ow))
            dins = [_pool_scatter(d6, ins[0].shape, kk, s, pd)]
        elif k == "globalavgpool":
            _, _, h, w = ins[0].shape
            dins = [np.broadcast_to((g / (h * w))[:, :, None, None], ins[0].shape).copy()]
        elif k == "flatten":
            dins = [g.reshape(ins[0].shape)]
        elif k == "add":
            dins = [g, g]
        else:  # softmax_ce_loss / output sit past the seeding point
            continue

        for src, d in zip(srcs, dins):
            if src in grad_acts:
                grad_acts[src] = grad_acts[src] + d
            else:
                grad_acts[src] = d
    return grads


def _pool_scatter(d6: np.ndarray, x_shape, k: int, stride: int, pad: int) -> np.ndarray:
    b, c, h, w = x_shape
    oh, ow = d6.shape[-2:]
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += d6[:, :, i, j]
    return dxp[:, :, pad:pad + h, pad:pad + w]


def loss_and_grads(m: ModelGraph, x, labels, *, params=None, mode="eval",
                   dtype=np.float32):
    rec = forward(m, x, labels, params=params, mode=mode, dtype=dtype)
    return rec, backward(m, rec, labels, params=params)


def per_sample_grads(m: ModelGraph, x, labels, *, dtype=np.float32):
    """Per-example gradients, stacked on a leading axis.

    Runs each sample alone in eval mode; the mean over samples equals the
    whole-batch eval-mode gradient.
    """
    out: dict[str, dict[str, list]] = {}
    for i in range(len(labels)):
        _, g = loss_and_grads(m, x[i:i + 1], labels[i:i + 1], mode="eval", dtype=dtype)
        for nid, entry in g.items():
            slot = out.setdefault(nid, {})
            for pname, arr in entry.items():
                slot.setdefault(pname, []).append(arr)
    return {nid: {p: np.stack(v) for p, v in entry.items()}
            for nid, entry in out.items()}


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    loss: float
    count: int


def predict(m: ModelGraph, x, *, params=None, dtype=np.float32) -> np.ndarray:
    rec = forward(m, x, params=params, dtype=dtype)
    return np.argmax(rec.probs, axis=1).astype(np.uint32)


def evaluate(m: ModelGraph, data: Dataset, *, batch_size: int = 256,
             params=None, dtype=np.float32) -> EvalResult:
    correct = 0
    loss_sum = 0.0
    for xb, yb in iter_batches(data, batch_size):
        rec = forward(m, xb, yb, params=params, dtype=dtype)
        if not np.isfinite(rec.loss):
            raise NumericsError("evaluation produced a non-finite loss")
        preds = np.argmax(rec.probs, axis=1)
        correct += int((preds == yb).sum())
        loss_sum += rec.loss * len(yb)
    n = data.count
    return EvalResult(accuracy=correct / n, loss=loss_sum / n, count=n)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """SGD with momentum and step decay; grad_hook edits gradients in place
    between backward and the optimizer step."""

    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    milestones: tuple = ()
    lr_decay: float = 0.1
    seed: int = 0
    shuffle: bool = True
    dtype: type = np.float32
    grad_hook: object = None


@dataclass
class TrainResult:
    model: ModelGraph
    history: list[dict]


def train(m: ModelGraph, data: Dataset, cfg: TrainConfig,
          val: Dataset | None = None) -> TrainResult:
    rng = np.random.default_rng(cfg.seed)
    state = {nid: {p: np.array(arr, dtype=cfg.dtype)
                   for p, arr in node.params.items()}
             for nid, node in m.nodes.items() if node.params}
    velocity = {nid: {p: np.zeros_like(arr)
                      for p, arr in entry.items() if p in TRAINABLE_PARAMS}
                for nid, entry in state.items()}

    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.lr_decay ** sum(1 for ms in cfg.milestones if ms <= epoch)
        loss_sum, seen = 0.0, 0
        for xb, yb in iter_batches(data, cfg.batch_size, shuffle=cfg.shuffle, rng=rng):
            rec = forward(m, xb, yb, params=state, mode="train", dtype=cfg.dtype)
            if not np.isfinite(rec.loss):
                raise NumericsError(
                    f"non-finite training loss at epoch {epoch}; aborting")
            grads = backward(m, rec, yb, params=state)
            if cfg.grad_hook is not None:
                grads = cfg.grad_hook(state, grads, epoch)
            for nid, entry in velocity.items():
                for pname, v in entry.items():
                    if nid not in grads or pname not in grads[nid]:
                        continue
                    w = state[nid][pname].astype(np.float64)
                    g = np.asarray(grads[nid][pname], dtype=np.float64)
                    g = g + cfg.weight_decay * w
                    vn = cfg.momentum * v.astype(np.float64) + g
                    step = g + cfg.momentum * vn if cfg.nesterov else vn
                    state[nid][pname] = (w - lr * step).astype(cfg.dtype)
                    entry[pname] = vn.astype(cfg.dtype)
            for nid, (mean, var) in rec.batch_stats.items():
                mom = m.nodes[nid].attrs["momentum"]
                for pname, batch in (("running_mean", mean), ("running_var", var)):
                    old = state[nid][pname].astype(np.float64)
                    state[nid][pname] = ((1.0 - mom) * old + mom * batch).astype(cfg.dtype)
            loss_sum += rec.loss * len(yb)
            seen += len(yb)
        entry = {"epoch": epoch, "lr": lr, "train_loss": loss_sum / max(seen, 1)}
        if val is not None:
            res = evaluate(m, val, params=state, dtype=cfg.dtype)
            entry["val_accuracy"] = res.accuracy
            entry["val_loss"] = res.loss
        history.append(entry)

    replacements = {
        nid: LayerNode(nid, m.nodes[nid].kind, dict(m.nodes[nid].attrs),
                       {p: arr.astype(np.float32) for p, arr in entry.items()})
        for nid, entry in state.items()}
    return TrainResult(m.with_nodes(replacements).validate(), history)
