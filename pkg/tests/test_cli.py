import hashlib
import json
import os
import struct
import subprocess
import sys

import numpy as np
import pytest

from spatreg.cli import EVALUATE_HEADER, main

TINY_CONFIG = {
    "levels": 2,
    "blocks_per_level": 1,
    "width": 6,
    "iters_per_level": 30,
    "learning_rate": 1e-3,
    "seed": 5,
}


def run_cli(argv, env_seed=None):
    """Invoke the CLI in-process, capturing the exit code."""
    old = os.environ.pop("SPATREG_SEED", None)
    try:
        if env_seed is not None:
            os.environ["SPATREG_SEED"] = str(env_seed)
        return main(argv)
    finally:
        os.environ.pop("SPATREG_SEED", None)
        if old is not None:
            os.environ["SPATREG_SEED"] = old


def file_digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """gen-data + train once; the commands under test reuse the outputs."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run_cli([
        "gen-data", "--seed", "3", "--shape", "32", "--pairs", "3",
        "--regions", "3", "--roughness", "0.8,2.0,0.3", "--out", str(data),
    ]) == 0
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(TINY_CONFIG))
    run_dir = root / "run"
    assert run_cli([
        "train", "--config", str(cfg_path), "--data", str(data / "manifest.json"),
        "--out", str(run_dir), "--quiet",
    ]) == 0
    return {
        "root": root,
        "data": data,
        "manifest": data / "manifest.json",
        "config": cfg_path,
        "checkpoint": run_dir / "checkpoint.ckpt",
        "run": run_dir,
    }


class TestGenData:
    def test_manifest_lists_requested_pairs(self, workspace):
        manifest = json.loads(workspace["manifest"].read_text())
        assert len(manifest["pairs"]) == 3
        assert manifest["regions"] == 3

    def test_rerun_same_flags_identical_manifest_hash(self, tmp_path):
        args = ["gen-data", "--seed", "11", "--shape", "32", "--pairs", "2",
                "--regions", "3", "--roughness", "1,1,1"]
        assert run_cli(args + ["--out", str(tmp_path / "a")]) == 0
        assert run_cli(args + ["--out", str(tmp_path / "b")]) == 0
        assert file_digest(tmp_path / "a" / "manifest.json") == \
            file_digest(tmp_path / "b" / "manifest.json")
        assert file_digest(tmp_path / "a" / "pair0001_moving.arr") == \
            file_digest(tmp_path / "b" / "pair0001_moving.arr")

    def test_shape_too_small_for_pyramid(self, tmp_path, capsys):
        code = run_cli(["gen-data", "--seed", "0", "--shape", "8",
                        "--pairs", "1", "--out", str(tmp_path / "x")])
        assert code == 2
        assert "shape incompatible with pyramid depth" in capsys.readouterr().err

    def test_env_seed_overrides_flag(self, tmp_path):
        base = ["gen-data", "--shape", "32", "--pairs", "1", "--regions", "3",
                "--roughness", "1,1,1"]
        assert run_cli(base + ["--seed", "21", "--out", str(tmp_path / "a")]) == 0
        assert run_cli(base + ["--seed", "99", "--out", str(tmp_path / "b")],
                       env_seed=21) == 0
        assert file_digest(tmp_path / "a" / "manifest.json") == \
            file_digest(tmp_path / "b" / "manifest.json")

    def test_roughness_length_mismatch(self, tmp_path, capsys):
        code = run_cli(["gen-data", "--shape", "32", "--pairs", "1",
                        "--regions", "3", "--roughness", "1,1",
                        "--out", str(tmp_path / "x")])
        assert code == 2


class TestTrain:
    def test_outputs_exist(self, workspace):
        run = workspace["run"]
        for name in ("checkpoint.ckpt", "curve.csv", "curve.png",
                     "experiment.json"):
            assert (run / name).exists(), name
        exp = json.loads((run / "experiment.json").read_text())
        assert exp["config"]["width"] == 6

    def test_config_dataset_mismatch(self, workspace, tmp_path, capsys):
        bad = dict(TINY_CONFIG, regions=5)
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps(bad))
        code = run_cli(["train", "--config", str(cfg),
                        "--data", str(workspace["manifest"]),
                        "--out", str(tmp_path / "run")])
        assert code == 2


class TestRegister:
    def test_register_outputs_and_report(self, workspace, tmp_path):
        data = workspace["data"]
        out = tmp_path / "reg"
        code = run_cli([
            "register", "--checkpoint", str(workspace["checkpoint"]),
            "--fixed", str(data / "pair0000_fixed.arr"),
            "--moving", str(data / "pair0000_moving.arr"),
            "--labels", str(data / "pair0000_fixed_labels.arr"),
            "--moving-labels", str(data / "pair0000_moving_labels.arr"),
            "--lambda", "1.0,1.0,1.0", "--out", str(out),
        ])
        assert code == 0
        for name in ("warped.arr", "displacement.arr", "deformation.arr",
                     "jacobian.arr", "report.json", "register.png"):
            assert (out / name).exists(), name
        report = json.loads((out / "report.json").read_text())
        assert set(report) >= {"dice_per_region", "dice_avg", "folding_pct",
                               "jac_grad_mean", "jac_std", "lambda"}

    def test_lambda_length_mismatch_exits_2(self, workspace, tmp_path, capsys):
        data = workspace["data"]
        code = run_cli([
            "register", "--checkpoint", str(workspace["checkpoint"]),
            "--fixed", str(data / "pair0000_fixed.arr"),
            "--moving", str(data / "pair0000_moving.arr"),
            "--labels", str(data / "pair0000_fixed_labels.arr"),
            "--lambda", "3.76,2.42,2.61,2.33,0.67", "--out", str(tmp_path / "x"),
        ])
        assert code == 2
        assert "--lambda" in capsys.readouterr().err


class TestEvaluate:
    def test_csv_schema_and_sidecars(self, workspace, tmp_path):
        report = tmp_path / "eval.csv"
        code = run_cli([
            "evaluate", "--checkpoint", str(workspace["checkpoint"]),
            "--data", str(workspace["manifest"]),
            "--lambda", "1.0,1.0,1.0", "--report", str(report),
        ])
        assert code == 0
        lines = report.read_text().splitlines()
        assert lines[0] == EVALUATE_HEADER
        assert len(lines) == 2
        assert lines[1].startswith("pyramid_smoothed,")
        jsonl = tmp_path / "eval.jsonl"
        assert jsonl.exists()
        assert len(jsonl.read_text().splitlines()) == 3
        assert (tmp_path / "eval.png").exists()

    def test_raw_weighting_method_name(self, workspace, tmp_path):
        report = tmp_path / "raw.csv"
        code = run_cli([
            "evaluate", "--checkpoint", str(workspace["checkpoint"]),
            "--data", str(workspace["manifest"]), "--weighting", "raw",
            "--lambda", "1.0,1.0,1.0", "--report", str(report),
        ])
        assert code == 0
        assert report.read_text().splitlines()[1].startswith("pyramid_raw,")

    def test_checkpoint_version_mismatch_exits_3(self, workspace, tmp_path):
        ckpt = workspace["checkpoint"].read_bytes()
        (hlen,) = struct.unpack("<I", ckpt[:4])
        header = json.loads(ckpt[4:4 + hlen].decode())
        header["format_version"] = 99
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        tampered = tmp_path / "old.ckpt"
        tampered.write_bytes(struct.pack("<I", len(blob)) + blob + ckpt[4 + hlen:])
        code = run_cli([
            "evaluate", "--checkpoint", str(tampered),
            "--data", str(workspace["manifest"]),
            "--lambda", "1,1,1", "--report", str(tmp_path / "r.csv"),
        ])
        assert code == 3


class TestOptimizeAndSweep:
    def test_optimize_lambda_outputs(self, workspace, tmp_path):
        out = tmp_path / "opt"
        code = run_cli([
            "optimize-lambda", "--checkpoint", str(workspace["checkpoint"]),
            "--val-data", str(workspace["manifest"]),
            "--steps", "2", "--lr", "0.2", "--out", str(out),
        ])
        assert code == 0
        star = json.loads((out / "lambda_star.json").read_text())
        assert len(star["lambda_star"]) == 3
        traj = json.loads((out / "trajectory.json").read_text())
        assert len(traj) == 3
        assert (out / "trajectory.png").exists()

    def test_sweep_rows_match_grid(self, workspace, tmp_path):
        out = tmp_path / "sweep"
        code = run_cli([
            "sweep-lambda", "--checkpoint", str(workspace["checkpoint"]),
            "--data", str(workspace["manifest"]), "--region", "1",
            "--grid", "0.5,1,2,4,8", "--out", str(out),
        ])
        assert code == 0
        lines = (out / "sweep_region1.csv").read_text().splitlines()
        assert lines[0] == "lambda_k,dice_0,dice_1,dice_2,folding_pct"
        assert len(lines) == 6
        assert (out / "sweep_region1.png").exists()

    def test_sweep_region_out_of_range(self, workspace, tmp_path):
        code = run_cli([
            "sweep-lambda", "--checkpoint", str(workspace["checkpoint"]),
            "--data", str(workspace["manifest"]), "--region", "7",
            "--out", str(tmp_path / "x"),
        ])
        assert code == 2


class TestConsoleEntryPoint:
    def test_installed_script_shows_usage(self):
        proc = subprocess.run([sys.executable, "-m", "spatreg.cli", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "gen-data" in proc.stdout
