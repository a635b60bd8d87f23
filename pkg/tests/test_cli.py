"""
Tests for the s2ap command-line interface.

Commands run in-process through click's CliRunner with logging silenced so
stdout carries only the JSON envelope.
"""

import json
import logging

import pytest
from click.testing import CliRunner

from src.api.labels import AttentionMaps
from src.api.scenes import load_scenes
from src.cli.commands import cli, main
from src.core.config import settings

# Configure logging
logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
logger = logging.getLogger(__name__)

SMALL_CONFIG = {
    "scenes": {"count": 3, "dims": [256, 256], "faces_per_scene": [1, 2], "size_range": [32.0, 96.0]},
    "bench": {"predictor": "oracle"},
}

INFEASIBLE_CONFIG = {
    "scenes": {
        "count": 1,
        "dims": [64, 64],
        "faces_per_scene": [5, 5],
        "size_range": [40.0, 50.0],
        "max_retries": 30,
    },
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL_CONFIG), encoding="utf-8")
    return path


def _invoke(*args):
    result = CliRunner().invoke(cli, [*args, "--log-level", "CRITICAL"])
    logger.info(f"s2ap {' '.join(args)} -> exit {result.exit_code}")
    return result


def _ok(result):
    assert result.exit_code == 0, result.output
    response = json.loads(result.output)
    assert response["success"] is True
    return response["data"]


def test_version():
    """The version command prints the package version."""
    result = CliRunner().invoke(cli, ["version"])
    assert result.exit_code == 0
    assert result.output.strip() == f"s2ap v{settings.VERSION}"


def test_main_returns_exit_codes():
    """main() maps usage errors and success to exit codes."""
    assert main(["version"]) == 0
    assert main(["no-such-command"]) != 0


def test_gen_scenes(tmp_path, config_file):
    """gen-scenes writes scenes.json and a summary."""
    out = tmp_path / "out"
    data = _ok(_invoke("gen-scenes", "--config", str(config_file), "--seed", "3", "--out", str(out)))
    assert data["scenes"] == 3
    scenes = load_scenes(out / "scenes.json")
    assert len(scenes) == 3
    assert data["faces"] == sum(len(s.faces) for s in scenes)
    assert json.loads((out / "summary.json").read_text(encoding="utf-8")) == data


def test_make_labels_from_scenes_file(tmp_path, config_file):
    """make-labels renders one binary map file per scene."""
    scenes_dir = tmp_path / "scenes"
    _ok(_invoke("gen-scenes", "--config", str(config_file), "--out", str(scenes_dir)))
    out = tmp_path / "labels"
    scenes_path = str(scenes_dir / "scenes.json")
    data = _ok(_invoke("make-labels", "--config", str(config_file), "--scenes", scenes_path, "--out", str(out)))
    assert data["n_s"] == 8
    assert data["files"] == [f"labels/scene_{i:04d}.bin" for i in range(3)]
    maps = AttentionMaps.load(out / data["files"][0], (256, 256))
    assert maps.data.shape == (60, 32, 32)


def test_decode_writes_plans(tmp_path, config_file):
    """decode writes one plan per scene and optional PGM masks."""
    out = tmp_path / "decode"
    data = _ok(_invoke("decode", "--config", str(config_file), "--out", str(out), "--pgm"))
    assert data["predictor"] == "oracle"
    assert len(data["levels"]) == 3
    for i, count in enumerate(data["levels"]):
        plan = json.loads((out / "plans" / f"scene_{i:04d}.json").read_text(encoding="utf-8"))
        assert len(plan["levels"]) == count
        for k in range(count):
            assert (out / "plans" / f"scene_{i:04d}_level_{k}.pgm").read_bytes().startswith(b"P5")


def test_eval_writes_csv(tmp_path, config_file):
    """eval sweeps every configured threshold."""
    out = tmp_path / "eval"
    data = _ok(_invoke("eval", "--config", str(config_file), "--out", str(out)))
    lines = (out / "eval.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0].startswith("threshold")
    assert len(lines) == data["points"] + 1
    assert data["selected_threshold"] is not None or data["best_point"] is not None


def test_cost_report_modes(tmp_path, config_file):
    """Each cost mode gives a positive speedup over the dense pyramid."""
    for mode in ("scale", "spatial", "both"):
        out = tmp_path / mode
        data = _ok(_invoke("cost-report", "--config", str(config_file), "--mode", mode, "--out", str(out)))
        assert data["mode"] == mode
        assert data["baseline_flops"] > 0
        assert (out / "cost.csv").exists()


def test_bench_conv(tmp_path, config_file):
    """bench-conv times one row per detector layer and density."""
    out = tmp_path / "bench"
    data = _ok(
        _invoke(
            "bench-conv",
            "--config",
            str(config_file),
            "--size",
            "32",
            "--density",
            "0.25",
            "--density",
            "1.0",
            "--repeats",
            "1",
            "--out",
            str(out),
        )
    )
    assert data["densities"] == [0.25, 1.0]
    lines = (out / "bench_conv.csv").read_text(encoding="utf-8").splitlines()
    assert len(lines) == data["rows"] + 1


def test_run_writes_all_reports(tmp_path, config_file):
    """run writes scenes, evaluation, cost and curve reports."""
    out = tmp_path / "run"
    data = _ok(_invoke("run", "--config", str(config_file), "--seed", "1", "--out", str(out)))
    for name in ("scenes.json", "eval.csv", "cost.csv", "curve.csv", "summary.json"):
        assert (out / name).exists(), name
    assert data["threshold"] is not None
    assert data["cost"]["baseline_flops"] > 0


def test_run_is_deterministic(tmp_path, config_file):
    """Same seed and config give byte-identical reports whatever the worker count."""
    names = ("eval.csv", "cost.csv", "curve.csv", "summary.json")
    outputs = []
    for label, workers in (("a", "1"), ("b", "1"), ("c", "4")):
        out = tmp_path / label
        _ok(_invoke("run", "--config", str(config_file), "--seed", "5", "--workers", workers, "--out", str(out)))
        outputs.append({name: (out / name).read_bytes() for name in names})
    assert outputs[0] == outputs[1]
    assert outputs[0] == outputs[2]


def test_error_envelope_and_exit_code(tmp_path):
    """A failing command prints an error envelope and exits with status 1."""
    path = tmp_path / "infeasible.json"
    path.write_text(json.dumps(INFEASIBLE_CONFIG), encoding="utf-8")
    result = _invoke("gen-scenes", "--config", str(path), "--out", str(tmp_path / "out"))
    assert result.exit_code == 1
    response = json.loads(result.output)
    assert response["success"] is False
    assert response["code"] == "generation_failed"
    assert not (tmp_path / "out" / "summary.json").exists()


def test_invalid_config_rejected(tmp_path):
    """A config that fails validation is an invalid-input error."""
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"scalemap": {"num_bins": 7}}), encoding="utf-8")
    result = _invoke("gen-scenes", "--config", str(path), "--out", str(tmp_path / "out"))
    assert result.exit_code == 1
    assert json.loads(result.output)["code"] == "invalid_input"
