"""Hand-built test networks and synthetic datasets.

Everything here is deterministic under its seed so tests and benchmarks can
reproduce architectures and data exactly.
"""

from __future__ import annotations

import numpy as np

from .model import LayerNode, ModelGraph


def _he(rng, *shape):
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class _Builder:
    """Tiny helper for chaining layers; keeps explicit ids for tests."""

    def __init__(self, name, input_shape, num_classes, seed=0):
        self.rng = np.random.default_rng(seed)
        self.nodes = {"input": LayerNode("input", "input")}
        self.edges = []
        self.name = name
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.head = "input"
        self._shapes = {}

    def _add(self, node, srcs):
        self.nodes[node.id] = node
        for slot, src in enumerate(srcs):
            self.edges.append((src, node.id, slot))
        self.head = node.id
        return node.id

    def conv(self, nid, c_out, kernel=3, stride=1, padding=1, bias=True, src=None):
        src = src or self.head
        c_in = self._shape_of(src)[0]
        params = {"weight": _he(self.rng, c_out, c_in, kernel, kernel)}
        if bias:
            params["bias"] = np.zeros(c_out, dtype=np.float32)
        attrs = {"in_channels": c_in, "out_channels": c_out,
                 "kernel": kernel, "stride": stride, "padding": padding}
        nid = self._add(LayerNode(nid, "conv2d", attrs, params), [src])
        h, w = self._shape_of(src)[1:]
        oh = (h + 2 * padding - kernel) // stride + 1
        ow = (w + 2 * padding - kernel) // stride + 1
        self._shapes[nid] = (c_out, oh, ow)
        return nid

    def bn(self, nid, src=None):
        src = src or self.head
        c = self._shape_of(src)[0]
        params = {
            "gamma": np.ones(c, dtype=np.float32),
            "beta": np.zeros(c, dtype=np.float32),
            "running_mean": np.zeros(c, dtype=np.float32),
            "running_var": np.ones(c, dtype=np.float32),
        }
        attrs = {"num_features": c, "epsilon": 1e-5, "momentum": 0.1}
        nid = self._add(LayerNode(nid, "batchnorm2d", attrs, params), [src])
        self._shapes[nid] = self._shape_of(src)
        return nid

    def relu(self, nid, src=None):
        src = src or self.head
        nid = self._add(LayerNode(nid, "relu"), [src])
        self._shapes[nid] = self._shape_of(src)
        return nid

    def pool(self, nid, kind="maxpool2d", kernel=2, stride=2, src=None):
        src = src or self.head
        c, h, w = self._shape_of(src)
        nid = self._add(LayerNode(nid, kind, {"kernel": kernel, "stride": stride}), [src])
        self._shapes[nid] = (c, (h - kernel) // stride + 1, (w - kernel) // stride + 1)
        return nid

    def gap(self, nid, src=None):
        src = src or self.head
        nid = self._add(LayerNode(nid, "globalavgpool"), [src])
        self._shapes[nid] = (self._shape_of(src)[0],)
        return nid

    def flatten(self, nid, src=None):
        src = src or self.head
        c, h, w = self._shape_of(src)
        nid = self._add(LayerNode(nid, "flatten"), [src])
        self._shapes[nid] = (c * h * w,)
        return nid

    def linear(self, nid, n_out, bias=True, src=None):
        src = src or self.head
        n_in = self._shape_of(src)[0]
        params = {"weight": _he(self.rng, n_out, n_in)}
        if bias:
            params["bias"] = np.zeros(n_out, dtype=np.float32)
        attrs = {"in_features": n_in, "out_features": n_out}
        nid = self._add(LayerNode(nid, "linear", attrs, params), [src])
        self._shapes[nid] = (n_out,)
        return nid

    def add(self, nid, a, b):
        nid = self._add(LayerNode(nid, "add"), [a, b])
        self._shapes[nid] = self._shape_of(a)
        return nid

    def loss_head(self, nid="loss", src=None):
        src = src or self.head
        nid = self._add(LayerNode(nid, "softmax_ce_loss"), [src])
        self._shapes[nid] = self._shape_of(src)
        return nid

    def _shape_of(self, nid):
        if nid == "input":
            return self.input_shape
        return self._shapes[nid]

    def build(self, with_loss_head=True):
        if with_loss_head and self.nodes[self.head].kind != "softmax_ce_loss":
            self.loss_head()
        self._add(LayerNode("output", "output"), [self.head])
        g = ModelGraph(self.name, self.input_shape, self.num_classes,
                       self.nodes, self.edges)
        return g.validate()


def make_chain_cnn(seed=0):
    """conv-bn-relu x2 -> GAP -> linear; the plain sequential case."""
    b = _Builder("chain_cnn", (3, 16, 16), 10, seed)
    b.conv("conv1", 8)
    b.bn("bn1")
    b.relu("relu1")
    b.conv("conv2", 16)
    b.bn("bn2")
    b.relu("relu2")
    b.gap("gap")
    b.linear("fc", 10)
    return b.build()


def make_vgg_tiny(seed=0):
    """conv stack -> flatten -> linear head; exercises flatten index expansion."""
    b = _Builder("vgg_tiny", (3, 16, 16), 10, seed)
    b.conv("conv1", 8)
    b.bn("bn1")
    b.relu("relu1")
    b.pool("pool1")
    b.conv("conv2", 16)
    b.bn("bn2")
    b.relu("relu2")
    b.pool("pool2")          # 16 x 4 x 4
    b.flatten("flat")
    b.linear("fc1", 32)
    b.relu("relu3")
    b.linear("fc2", 10)
    return b.build()


def make_resnet_tiny(seed=0):
    """Two residual blocks, second with a strided 1x1 downsample path."""
    b = _Builder("resnet_tiny", (3, 16, 16), 10, seed)
    b.conv("conv0", 16)
    b.bn("bn0")
    trunk = b.relu("relu0")
    # block 1: identity skip
    b.conv("conv1a", 16, src=trunk)
    b.bn("bn1a")
    b.relu("relu1a")
    b.conv("conv1b", 16)
    main = b.bn("bn1b")
    b.add("add1", main, trunk)
    trunk = b.relu("relu1")
    # block 2: stride-2 with downsample
    b.conv("conv2a", 32, stride=2, src=trunk)
    b.bn("bn2a")
    b.relu("relu2a")
    b.conv("conv2b", 32)
    main = b.bn("bn2b")
    b.conv("convd", 32, kernel=1, stride=2, padding=0, src=trunk)
    skip = b.bn("bnd")
    b.add("add2", main, skip)
    b.relu("relu2")
    b.gap("gap")
    b.linear("fc", 10)
    return b.build()


def make_bottleneck_net(seed=0, skew_group=True):
    """Wide-narrow-wide net whose first group has one dominant filter.

    With `skew_group`, conv1 gets one large filter and 31 tiny ones, so a
    global score threshold concentrates removals there; this is the model
    used to demonstrate layer collapse vs the protection floor.
    """
    b = _Builder("bottleneck_net", (3, 16, 16), 10, seed)
    b.conv("conv1", 32)
    b.bn("bn1")
    b.relu("relu1")
    b.pool("pool1")
    b.conv("conv2", 8, kernel=1, padding=0)
    b.bn("bn2")
    b.relu("relu2")
    b.conv("conv3", 32)
    b.bn("bn3")
    b.relu("relu3")
    b.pool("pool2")
    b.gap("gap")
    b.linear("fc", 10)
    g = b.build()
    if skew_group:
        rng = np.random.default_rng(seed + 7)
        conv1 = g.nodes["conv1"]
        w = conv1.params["weight"].copy()
        w[:] = rng.uniform(1e-4, 1e-3, w.shape)   # tiny, nonzero
        w[0] = rng.uniform(0.5, 1.0, w[0].shape)  # one dominant filter
        params = dict(conv1.params)
        params["weight"] = w.astype(np.float32)
        # keep the other groups' scores comfortably away from zero
        for nid in ("conv2", "conv3"):
            node = g.nodes[nid]
            wN = np.abs(node.params["weight"]) + 0.2
            p2 = dict(node.params)
            p2["weight"] = wN.astype(np.float32)
            g = g.with_nodes({nid: LayerNode(nid, node.kind, node.attrs, p2)})
        g = g.with_nodes({"conv1": LayerNode("conv1", conv1.kind, conv1.attrs, params)})
        g = g.validate()
    return g


def make_desk_cnn(seed=0, width=20):
    """~100k-parameter CNN used by the desk benchmark."""
    w = width
    b = _Builder("desk_cnn", (3, 16, 16), 10, seed)
    b.conv("conv1", w)
    b.bn("bn1")
    b.relu("relu1")
    b.conv("conv2", 2 * w)
    b.bn("bn2")
    b.relu("relu2")
    b.pool("pool1")
    b.conv("conv3", 4 * w)
    b.bn("bn3")
    b.relu("relu3")
    b.pool("pool2")
    b.conv("conv4", 4 * w)
    b.bn("bn4")
    b.relu("relu4")
    b.gap("gap")
    b.linear("fc", 10)
    return b.build()


def make_mlp_tiny(seed=0, hidden=16):
    """Flatten -> linear -> relu -> linear; smallest trainable net."""
    b = _Builder("mlp_tiny", (1, 4, 4), 2, seed)
    b.flatten("flat")
    b.linear("fc1", hidden)
    b.relu("relu1")
    b.linear("fc2", 2)
    return b.build()


def make_synthetic_dataset(n, num_classes=10, shape=(3, 16, 16), seed=0,
                           noise=0.35, template_seed=None):
    """Class-template images plus Gaussian noise; cleanly separable.

    Returns (inputs [n,C,H,W] float32, labels [n] uint32). Templates are
    smooth random patterns so small CNNs reach high accuracy quickly.
    Pass the same `template_seed` with different `seed` values to draw
    train/val splits from one distribution.
    """
    rng = np.random.default_rng(seed)
    trng = np.random.default_rng(seed if template_seed is None else template_seed)
    c, h, w = shape
    templates = trng.standard_normal((num_classes, c, h, w)).astype(np.float32)
    # smooth each template a little so convolutions have local structure
    for _ in range(2):
        templates = (templates
                     + np.roll(templates, 1, axis=2) + np.roll(templates, -1, axis=2)
                     + np.roll(templates, 1, axis=3) + np.roll(templates, -1, axis=3)) / 5.0
    templates /= np.maximum(templates.std(axis=(1, 2, 3), keepdims=True), 1e-6)
    labels = rng.integers(0, num_classes, size=n, dtype=np.uint32)
    inputs = templates[labels] + noise * rng.standard_normal((n, c, h, w)).astype(np.float32)
    return inputs.astype(np.float32), labels
