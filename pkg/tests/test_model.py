import json
import zlib
from pathlib import Path

import numpy as np
import pytest

from prunekit import zoo
from prunekit.errors import GraphValidationError, ManifestError
from prunekit.model import (
    FORMAT_TAG,
    LayerNode,
    ModelGraph,
    ParamRole,
    graphs_equal,
    load_model,
    save_model,
    slice_param,
)


def minimal_conv_model():
    """input -> conv(1->2, K=3) -> flatten-free logits via gap -> output."""
    nodes = {
        "input": LayerNode("input", "input"),
        "conv": LayerNode(
            "conv", "conv2d",
            {"in_channels": 1, "out_channels": 2, "kernel": 3, "stride": 1, "padding": 1},
            {"weight": np.arange(18, dtype=np.float32).reshape(2, 1, 3, 3),
             "bias": np.zeros(2, dtype=np.float32)}),
        "gap": LayerNode("gap", "globalavgpool"),
        "output": LayerNode("output", "output"),
    }
    edges = [("input", "conv", 0), ("conv", "gap", 0), ("gap", "output", 0)]
    return ModelGraph("minimal", (1, 4, 4), 2, nodes, edges).validate()


class TestRoundTrip:
    def test_minimal_manifest_roundtrip(self, tmp_path):
        m = minimal_conv_model()
        save_model(m, tmp_path / "m")
        loaded = load_model(tmp_path / "m")
        assert graphs_equal(m, loaded)

    def test_roundtrip_is_bit_identical_on_disk(self, tmp_path):
        m = zoo.make_chain_cnn(seed=3)
        save_model(m, tmp_path / "a")
        loaded = load_model(tmp_path / "a")
        save_model(loaded, tmp_path / "b")
        blob_a = (tmp_path / "a" / "weights.bin").read_bytes()
        blob_b = (tmp_path / "b" / "weights.bin").read_bytes()
        assert blob_a == blob_b

    def test_three_layer_cnn_structural_equality(self, tmp_path):
        m = zoo.make_vgg_tiny(seed=1)
        save_model(m, tmp_path / "m")
        loaded = load_model(tmp_path / "m")
        assert graphs_equal(m, loaded)
        assert list(loaded.nodes) == list(m.nodes)

    def test_shape_mismatch_names_node(self, tmp_path):
        m = minimal_conv_model()
        save_model(m, tmp_path / "m")
        manifest = json.loads((tmp_path / "m" / "manifest.json").read_text())
        for nj in manifest["nodes"]:
            if nj["id"] == "conv":
                nj["params"]["weight"]["shape"] = [2, 1, 3, 3]
                # truncate the blob so only 17 floats remain for the weight
        blob = (tmp_path / "m" / "weights.bin").read_bytes()
        (tmp_path / "m" / "weights.bin").write_bytes(blob[:-8])
        (tmp_path / "m" / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(ManifestError, match="conv"):
            load_model(tmp_path / "m")

    def test_corrupted_blob_fails_checksum(self, tmp_path):
        m = minimal_conv_model()
        save_model(m, tmp_path / "m")
        blob = bytearray((tmp_path / "m" / "weights.bin").read_bytes())
        blob[4] ^= 0xFF  # flip one byte inside the first tensor
        (tmp_path / "m" / "weights.bin").write_bytes(bytes(blob))
        with pytest.raises(ManifestError, match="CRC32"):
            load_model(tmp_path / "m")

    def test_save_to_unwritable_location(self, tmp_path):
        m = minimal_conv_model()
        blocker = tmp_path / "blocker"
        blocker.write_text("not a directory")
        with pytest.raises(OSError):
            save_model(m, blocker / "m")

    def test_unknown_kind_rejected(self, tmp_path):
        m = minimal_conv_model()
        save_model(m, tmp_path / "m")
        manifest = json.loads((tmp_path / "m" / "manifest.json").read_text())
        manifest["nodes"][1]["kind"] = "attention"
        (tmp_path / "m" / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(ManifestError, match="attention"):
            load_model(tmp_path / "m")

    def test_bad_format_tag(self, tmp_path):
        m = minimal_conv_model()
        save_model(m, tmp_path / "m")
        manifest = json.loads((tmp_path / "m" / "manifest.json").read_text())
        manifest["format"] = "something-else"
        (tmp_path / "m" / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(ManifestError):
            load_model(tmp_path / "m")

    def test_crc_present_for_every_tensor(self, tmp_path):
        m = zoo.make_chain_cnn()
        save_model(m, tmp_path / "m")
        manifest = json.loads((tmp_path / "m" / "manifest.json").read_text())
        assert manifest["format"] == FORMAT_TAG
        blob = (tmp_path / "m" / "weights.bin").read_bytes()
        for nj in manifest["nodes"]:
            for pname, pj in nj["params"].items():
                raw = blob[pj["offset"]:pj["offset"] + 4 * int(np.prod(pj["shape"]))]
                assert (zlib.crc32(raw) & 0xFFFFFFFF) == pj["crc32"]


class TestValidation:
    def test_cycle_detected(self):
        m = minimal_conv_model()
        bad = ModelGraph(m.name, m.input_shape, m.num_classes, dict(m.nodes),
                         m.edges + [("gap", "conv", 1)])
        with pytest.raises(GraphValidationError, match="cycle|slot"):
            bad.validate()

    def test_add_operand_mismatch(self):
        b = zoo._Builder("bad_add", (3, 8, 8), 10, seed=0)
        a1 = b.conv("c1", 4)
        a2 = b.conv("c2", 6, src="input")
        b.add("add", a1, a2)
        b.gap("gap")
        b.linear("fc", 10)
        with pytest.raises(GraphValidationError, match="add"):
            b.build()

    def test_channel_chain_break_detected(self):
        m = zoo.make_chain_cnn()
        conv2 = m.nodes["conv2"]
        # claim conv2 consumes 9 channels while conv1 produces 8
        attrs = dict(conv2.attrs, in_channels=9)
        w = np.zeros((conv2.attrs["out_channels"], 9, 3, 3), dtype=np.float32)
        bad_node = LayerNode("conv2", "conv2d", attrs,
                             dict(conv2.params, weight=w))
        bad = m.with_nodes({"conv2": bad_node})
        with pytest.raises(GraphValidationError, match="conv2"):
            bad.validate()

    def test_nonfinite_params_rejected(self):
        m = zoo.make_chain_cnn()
        conv1 = m.nodes["conv1"]
        w = conv1.params["weight"].copy()
        w[0, 0, 0, 0] = np.nan
        bad = m.with_nodes(
            {"conv1": LayerNode("conv1", "conv2d", conv1.attrs,
                                dict(conv1.params, weight=w))})
        with pytest.raises(GraphValidationError, match="finite"):
            bad.validate()


class TestSliceParam:
    def conv_layer(self):
        return LayerNode(
            "c", "conv2d",
            {"in_channels": 3, "out_channels": 4, "kernel": 3, "stride": 1, "padding": 1},
            {"weight": np.arange(4 * 3 * 9, dtype=np.float32).reshape(4, 3, 3, 3),
             "bias": np.arange(4, dtype=np.float32)})

    def test_conv_out_slice(self):
        out = slice_param(self.conv_layer(), ParamRole.CONV_OUT, [0, 2])
        assert out.params["weight"].shape == (2, 3, 3, 3)
        assert out.params["bias"].shape == (2,)
        assert out.attrs["out_channels"] == 2
        np.testing.assert_array_equal(out.params["bias"], [0.0, 2.0])

    def test_full_keep_is_identity(self):
        layer = self.conv_layer()
        out = slice_param(layer, ParamRole.CONV_OUT, [0, 1, 2, 3])
        assert out.params["weight"].tobytes() == layer.params["weight"].tobytes()
        assert out.params["bias"].tobytes() == layer.params["bias"].tobytes()

    def test_batchnorm_gather(self):
        rng = np.random.default_rng(0)
        params = {name: rng.standard_normal(4).astype(np.float32)
                  for name in ("gamma", "beta", "running_mean", "running_var")}
        layer = LayerNode("bn", "batchnorm2d",
                          {"num_features": 4, "epsilon": 1e-5, "momentum": 0.1},
                          params)
        out = slice_param(layer, ParamRole.NORM_SCALE_SHIFT, [1, 3])
        for name in params:
            np.testing.assert_array_equal(out.params[name], params[name][[1, 3]])
        assert out.attrs["num_features"] == 2

    def test_empty_keep_rejected(self):
        with pytest.raises(GraphValidationError, match="empty"):
            slice_param(self.conv_layer(), ParamRole.CONV_OUT, [])

    def test_out_of_range_rejected(self):
        with pytest.raises(GraphValidationError, match="out of range"):
            slice_param(self.conv_layer(), ParamRole.CONV_OUT, [0, 4])

    def test_non_increasing_rejected(self):
        with pytest.raises(GraphValidationError, match="increasing"):
            slice_param(self.conv_layer(), ParamRole.CONV_OUT, [2, 0])

    def test_role_kind_mismatch_rejected(self):
        with pytest.raises(GraphValidationError, match="role"):
            slice_param(self.conv_layer(), ParamRole.LINEAR_OUT, [0])

    def test_slicing_composes(self):
        layer = self.conv_layer()
        # keep [0,2,3] then (reindexed) keep [1,2] == keep [2,3] in one shot
        step1 = slice_param(layer, ParamRole.CONV_OUT, [0, 2, 3])
        step2 = slice_param(step1, ParamRole.CONV_OUT, [1, 2])
        once = slice_param(layer, ParamRole.CONV_OUT, [2, 3])
        assert step2.params["weight"].tobytes() == once.params["weight"].tobytes()
        assert step2.params["bias"].tobytes() == once.params["bias"].tobytes()

    def test_slice_in_axis_leaves_other_axes(self):
        layer = self.conv_layer()
        out = slice_param(layer, ParamRole.CONV_IN, [0, 2])
        assert out.params["weight"].shape == (4, 2, 3, 3)
        assert out.attrs["in_channels"] == 2
        np.testing.assert_array_equal(out.params["weight"],
                                      layer.params["weight"][:, [0, 2]])
        assert out.params["bias"].tobytes() == layer.params["bias"].tobytes()
