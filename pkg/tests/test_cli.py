from __future__ import annotations

import json
import subprocess
import sys

import pytest

from reachaudit.cli import main
from reachaudit.ingest import write_ratings
from reachaudit.synthetic import planted_popularity


@pytest.fixture
def workspace(tmp_path):
    data, _ = planted_popularity(12, 40, seed=3)
    write_ratings(data, tmp_path / "ratings.csv")
    cfg = {
        "dataset_path": "ratings.csv",
        "rating_min": 1,
        "rating_max": 5,
        "model": "mf_sgd",
        "latent_dim": 3,
        "epochs": 5,
        "action_kind": "future",
        "action_k": 2,
        "n_targets": 4,
        "n_users": 5,
        "betas": [1, 10],
        "out_dir": "out",
    }
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    return tmp_path


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


class TestSubcommands:
    def test_train(self, workspace, capsys):
        code, out, _ = run(["train", "--config", str(workspace / "cfg.json")], capsys)
        assert code == 0
        summary = json.loads(out)
        assert summary["status"] == "ok" and summary["rmse"] > 0
        assert (workspace / "out" / "model.npz").exists()

    def test_audit_then_report(self, workspace, capsys):
        code, out, _ = run(["audit", "--config", str(workspace / "cfg.json"), "--workers", "2"], capsys)
        assert code == 0
        assert json.loads(out)["n_pairs"] == 5 * 4 * 2
        csv = workspace / "out" / "pairs.csv"
        first = json.loads((workspace / "out" / "aggregate.json").read_text())
        code, out, _ = run(
            ["report", "--config", str(workspace / "cfg.json"), "--csv", str(csv), "--out", str(workspace / "r")], capsys
        )
        assert code == 0
        again = json.loads((workspace / "r" / "aggregate.json").read_text())
        assert again["availability"] == first["availability"]
        assert again["discovery"] == first["discovery"]

    def test_seed_override_changes_sample(self, workspace, capsys):
        run(["audit", "--config", str(workspace / "cfg.json"), "--out", str(workspace / "a")], capsys)
        run(["audit", "--config", str(workspace / "cfg.json"), "--out", str(workspace / "b"), "--seed", "7"], capsys)
        assert (workspace / "a" / "pairs.csv").read_bytes() != (workspace / "b" / "pairs.csv").read_bytes()

    def test_geometry(self, workspace, capsys):
        code, out, _ = run(["geometry", "--config", str(workspace / "cfg.json")], capsys)
        assert code == 0
        summary = json.loads(out)
        assert summary["max_prediction_change"] <= 1e-10
        assert summary["max_norm_error"] <= 1e-10
        report = json.loads((workspace / "out" / "geometry.json").read_text())
        assert report["n_vertices"] + len(report["non_vertices"]) == report["n_items"]
        assert all(u["fraction_reachable"] == 1.0 for u in report["users"] if u.get("rich"))


class TestErrors:
    def test_missing_config(self, tmp_path, capsys):
        code, out, err = run(["audit", "--config", str(tmp_path / "nope.json")], capsys)
        assert code == 1 and out == ""
        msg = json.loads(err)
        assert msg["status"] == "error" and msg["code"] == "FileNotFoundError"

    def test_unknown_key(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"dataset_path": "x.csv", "bogus": 1}))
        code, _, err = run(["train", "--config", str(tmp_path / "c.json")], capsys)
        assert code == 1
        assert json.loads(err)["code"] == "domain"

    def test_geometry_needs_factor_model(self, workspace, capsys):
        cfg = json.loads((workspace / "cfg.json").read_text()) | {"model": "knn"}
        (workspace / "knn.json").write_text(json.dumps(cfg))
        code, _, err = run(["geometry", "--config", str(workspace / "knn.json")], capsys)
        assert code == 1 and json.loads(err)["code"] == "domain"

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "reachaudit", "report", "--config", str(tmp_path / "x.json"), "--csv", "y"],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 1
        assert json.loads(proc.stderr)["status"] == "error"
