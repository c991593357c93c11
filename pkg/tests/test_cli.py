"""CLI surface tests: every subcommand end to end on a tiny workspace."""

import json

import numpy as np
import pytest

from prunekit.cli import main
from prunekit.engine import Dataset, load_dataset, save_dataset
from prunekit.groups import build_groups
from prunekit.model import load_model, save_model
from prunekit.zoo import make_chain_cnn, make_synthetic_dataset


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    save_model(make_chain_cnn(seed=0), root / "model")
    for name, n, seed in (("train", 96, 1), ("val", 64, 2), ("calib", 16, 3)):
        x, y = make_synthetic_dataset(n, seed=seed)
        save_dataset(Dataset(x, y, 10), root / name)
    return root


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestInspection:
    def test_cost(self, ws, capsys):
        code, out, _ = run(capsys, "cost", ws / "model")
        assert code == 0
        assert "total" in out
        doc = json.loads(out.strip().splitlines()[-1])
        assert doc["total_params"] > 0 and doc["total_flops"] > 0

    def test_groups_dump(self, ws, capsys):
        code, out, _ = run(capsys, "groups", "dump", ws / "model")
        assert code == 0
        doc = json.loads(out)
        assert len(doc) == len(build_groups(load_model(ws / "model")))

    def test_score(self, ws, capsys):
        code, out, _ = run(capsys, "score", ws / "model",
                           "--criterion", "magnitude_l2")
        assert code == 0
        doc = json.loads(out)
        groups = {g.id: g for g in build_groups(load_model(ws / "model"))}
        for gid, vec in doc.items():
            assert len(vec) == groups[int(gid)].width

    def test_score_data_driven(self, ws, capsys):
        code, out, _ = run(capsys, "score", ws / "model",
                           "--criterion", "taylor", "--calib", ws / "calib")
        assert code == 0
        assert json.loads(out)

    def test_score_missing_calib_fails(self, ws, capsys):
        code, _, err = run(capsys, "score", ws / "model",
                           "--criterion", "taylor")
        assert code == 2
        assert "error:" in err

    def test_forward_with_logits(self, ws, capsys, tmp_path):
        logits = tmp_path / "logits.bin"
        code, out, _ = run(capsys, "forward", ws / "model", ws / "val",
                           "--logits-out", logits)
        assert code == 0
        doc = json.loads(out)
        assert doc["count"] == 64
        data = np.fromfile(logits, dtype="<f4")
        assert data.shape == (64 * 10,)
        assert np.all(np.isfinite(data))


class TestPipelineStages:
    def test_sparsify(self, ws, capsys, tmp_path):
        out_dir = tmp_path / "sparse"
        code, out, _ = run(capsys, "sparsify", ws / "model", ws / "train",
                           out_dir, "--reg", "group_lasso",
                           "--lambda", "0.01", "--epochs", "1")
        assert code == 0
        doc = json.loads(out)
        assert doc["regularizer"] == "group_lasso" and doc["reg_time"] > 0
        load_model(out_dir / "model")
        with open(out_dir / "history.json", encoding="utf-8") as fh:
            assert len(json.load(fh)) == 1

    def test_sparsify_preset(self, ws, capsys, tmp_path):
        out_dir = tmp_path / "sparse2"
        code, out, _ = run(capsys, "sparsify", ws / "model", ws / "train",
                           out_dir, "--reg", "growing_reg",
                           "--preset", "resnet18/cifar100", "--epochs", "1")
        assert code == 0

    def test_sparsify_bad_preset(self, ws, capsys, tmp_path):
        code, _, err = run(capsys, "sparsify", ws / "model", ws / "train",
                           tmp_path / "x", "--reg", "group_lasso",
                           "--preset", "lenet/mnist")
        assert code == 2 and "no preset" in err

    def test_prune(self, ws, capsys, tmp_path):
        out_dir = tmp_path / "pruned"
        code, out, _ = run(capsys, "prune", ws / "model", out_dir,
                           "--speedup", "2", "--steps", "10")
        assert code == 0
        summary = json.loads(out)
        assert summary["flops_pct"] <= 50.0
        pruned = load_model(out_dir / "model")
        assert pruned.num_classes == 10
        with open(out_dir / "telemetry.json", encoding="utf-8") as fh:
            doc = json.load(fh)
        assert doc["summary"]["steps"] == len(doc["steps"]) > 0

    def test_prune_invalid_target(self, ws, capsys, tmp_path):
        code, _, err = run(capsys, "prune", ws / "model", tmp_path / "x",
                           "--speedup", "0.5")
        assert code == 2 and "speedup" in err


@pytest.fixture(scope="module")
def bench_dir(ws, tmp_path_factory):
    out = tmp_path_factory.mktemp("benchout")
    cfg = {
        "model": str(ws / "model"),
        "train_data": str(ws / "train"),
        "val_data": str(ws / "val"),
        "output": str(out / "run"),
        "criteria": ["magnitude_l2"],
        "speedups": [2.0],
        "repeats": 1,
        "prune": {"steps": 8},
        "train": {"epochs": 1, "batch_size": 32},
    }
    cfg_path = out / "cfg.json"
    cfg_path.write_text(json.dumps(cfg), encoding="utf-8")
    assert main(["bench", "run", str(cfg_path)]) == 0
    return out / "run"


class TestBenchCommands:
    def test_run_emits_all_formats(self, bench_dir):
        for name in ("leaderboard.md", "leaderboard.csv", "leaderboard.json",
                     "rows.json", "manifest.json"):
            assert (bench_dir / name).exists()

    def test_report_matches_run_output(self, bench_dir, capsys):
        before = (bench_dir / "leaderboard.csv").read_text(encoding="utf-8")
        code, out, _ = run(capsys, "bench", "report", bench_dir,
                           "--format", "csv")
        assert code == 0
        assert out.strip() == before.strip()

    def test_run_with_override(self, ws, tmp_path, capsys):
        cfg = {
            "model": str(ws / "model"),
            "train_data": str(ws / "train"),
            "val_data": str(ws / "val"),
            "output": str(tmp_path / "run2"),
            "criteria": ["magnitude_l1"],
            "speedups": [2.0],
            "prune": {"steps": 8},
            "train": {"epochs": 0},
        }
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg), encoding="utf-8")
        code, out, _ = run(capsys, "bench", "run", cfg_path,
                           "--override", 'criteria=["magnitude_l2"]')
        assert code == 0
        with open(tmp_path / "run2" / "rows.json", encoding="utf-8") as fh:
            rows = json.load(fh)
        assert rows[0]["importance"] == "magnitude_l2"

    def test_run_reports_cell_failure(self, ws, tmp_path, capsys):
        cfg = {
            "model": str(ws / "model"),
            "train_data": str(ws / "train"),
            "val_data": str(ws / "val"),
            "output": str(tmp_path / "run3"),
            "criteria": ["taylor"],
            "speedups": [2.0],
            "repeats": 1,
            "prune": {"steps": 8},
            "train": {"epochs": 0},
        }
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg), encoding="utf-8")
        code, out, _ = run(capsys, "bench", "run", cfg_path)
        assert code == 1
        assert "failed" in out
