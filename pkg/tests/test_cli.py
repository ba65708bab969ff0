import csv
import hashlib
import json

import numpy as np
import pytest

from calibflow import cli, hypio
from calibflow.flow import load_checkpoint
from calibflow.metrics import GroundTruthSet, HypothesisSet
from calibflow.numcore import RngStream

TINY_TOY = ["--steps", "40", "--samples", "200", "--n-seeds", "1", "--grid-only"]
TINY_FLOW = ["--epochs", "2", "--blocks", "2", "--hidden", "8"]


def run(argv, capsys=None):
    code = cli.main([str(a) for a in argv])
    err = capsys.readouterr().err if capsys is not None else ""
    return code, err


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_toy_grid_csv_has_one_row_per_cell_and_seed(tmp_path):
    code, _ = run(["toy", "--dims", "1,5,45", "--hyps", "10,200,1000", "--seed", 7, "--out", tmp_path,
                   *TINY_TOY])
    assert code == 0
    rows = read_csv(tmp_path / "grid.csv")
    assert len(rows) == 9
    assert {r["seed"] for r in rows} == {"7"}
    assert (tmp_path / "sigma_grid.svg").read_text().lstrip().startswith("<?xml")


def test_toy_missing_flag_names_it(tmp_path, capsys):
    code, err = run(["toy", "--hyps", "10", "--out", tmp_path], capsys)
    assert code == 2
    assert "--dims" in err


def test_rerun_is_byte_identical_and_manifest_hashes_match(tmp_path):
    args = ["toy", "--dims", "1,3", "--hyps", "2,20", "--seed", 3, *TINY_TOY]
    assert run(args + ["--out", tmp_path / "a"])[0] == 0
    assert run(args + ["--out", tmp_path / "b"])[0] == 0
    for name in ("config.json", "report.json", "grid.csv", "sigma_grid.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    for name, digest in man["files"].items():
        assert hashlib.sha256((tmp_path / "a" / name).read_bytes()).hexdigest() == digest
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert set(man["files"]) | {"manifest.json"} == set(report["artifacts"])
    assert "wall_clock_seconds" in json.loads((tmp_path / "a" / "timing.json").read_text())


def test_toy_extras_written(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"dims": [2], "hyps": [5], "n_seeds": 1, "steps": 30, "M": 200,
                               "oracle": {"D": 2, "N": 5, "M": 300},
                               "collapse": {"N": 3, "M": 500, "sigma_max": 1.0, "points": 5},
                               "mean": {"N": 3, "sigma": 1.0, "steps": 20, "dists": ["normal"]}}))
    assert run(["toy", "--config", cfg, "--out", tmp_path / "o"])[0] == 0
    rep = json.loads((tmp_path / "o" / "report.json").read_text())["metrics"]
    assert {"oracle", "collapse", "mean_convergence"} <= set(rep)
    for f in ("oracle.csv", "collapse.svg", "mean_convergence.svg"):
        assert (tmp_path / "o" / f).exists()


def test_config_preset_expands_before_hashing(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"preset": "fig1b", "steps": 10}))
    from_file = cli.resolve_config("toy", None, None, str(p), {})
    from_flags = cli.resolve_config("toy", None, "fig1b", None, {"steps": 10})
    assert from_file == from_flags
    assert from_file["config"]["dims"] == [1, 2, 5, 10, 20, 45, 100]
    assert cli.config_hash(from_file) == cli.config_hash(from_flags)
    assert cli.config_hash(from_file) != cli.config_hash(cli.resolve_config("toy", 1, "fig1b", None, {}))


def test_config_errors_are_usage_errors(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"dims": [1], "hyps": [2], "stepz": 3}))
    code, err = run(["toy", "--config", p, "--out", tmp_path / "o"], capsys)
    assert code == 2 and "stepz" in err
    code, err = run(["toy", "--preset", "fig1d", "--out", tmp_path / "o"], capsys)
    assert code == 2 and "landscape" in err
    code, _ = run(["toy", "--seed", "-1"], capsys)
    assert code == 2


def test_threads_env_overrides_flag(monkeypatch):
    monkeypatch.delenv(cli.THREADS_ENV, raising=False)
    assert cli.resolve_threads(3) == 3
    assert cli.resolve_threads(None) == 1
    monkeypatch.setenv(cli.THREADS_ENV, "2")
    assert cli.resolve_threads(5) == 2
    monkeypatch.setenv(cli.THREADS_ENV, "0")
    with pytest.raises(cli.UsageError):
        cli.resolve_threads(5)


def test_landscape_small_grid_report(tmp_path):
    code, _ = run(["landscape", "--mu-grid=-2:2:5", "--sigma-grid", "1:7:7", "--samples", 1000,
                   "--ece-budget", 0.1, "--out", tmp_path])
    assert code == 0
    m = json.loads((tmp_path / "report.json").read_text())["metrics"]
    assert m["ece_constrained_optimum"]["mu"] == pytest.approx(0.0)
    assert abs(m["ece_constrained_optimum"]["sigma"] - 4.0) <= 1.0
    assert len(read_csv(tmp_path / "surface.csv")) == 35
    svg = (tmp_path / "landscape.svg").read_text()
    assert "true parameters" in svg


def test_landscape_nonpositive_sigma_rejected(tmp_path, capsys):
    code, err = run(["landscape", "--sigma-grid", "0,1,2", "--out", tmp_path], capsys)
    assert code == 2 and "sigma_grid" in err
    assert not (tmp_path / "report.json").exists()


# -- eval / calibrate ------------------------------------------------------------------

def _write_pair(tmp_path, hyps, gt, name="h"):
    hp, gp = tmp_path / f"{name}.cfh", tmp_path / f"{name}_gt.cfh"
    hypio.write_hypotheses(hp, HypothesisSet(hyps, unit="mm", seed=0, model_id=name))
    hypio.write_ground_truth(gp, GroundTruthSet(gt, unit="mm"))
    return hp, gp


def test_eval_self_calibrated_and_point_mass(tmp_path):
    rng = RngStream(0)
    hyps = rng.normal((200, 2000, 4, 3), std=50.0)
    gt = rng.normal((2000, 4, 3), std=50.0)
    hp, gp = _write_pair(tmp_path, hyps, gt, "good")
    assert run(["eval", hp, gp, "--out", tmp_path / "good"])[0] == 0
    m = json.loads((tmp_path / "good" / "metrics.json").read_text())
    assert m["ece"] < 0.02
    assert {"min_mpjpe", "pck150", "cps"} <= set(m)
    svg = (tmp_path / "good" / "reliability.svg").read_text()
    assert "ideal" in svg

    point = np.broadcast_to(gt[:200] + 30.0, (20, 200, 4, 3))
    hp, gp = _write_pair(tmp_path, point, gt[:200], "point")
    assert run(["eval", hp, gp, "--out", tmp_path / "point"])[0] == 0
    m = json.loads((tmp_path / "point" / "metrics.json").read_text())
    assert m["ece"] == pytest.approx(0.5, abs=0.02)


def test_eval_mismatched_keypoints_structured_error(tmp_path, capsys):
    rng = RngStream(1)
    hp, _ = _write_pair(tmp_path, rng.normal((5, 10, 4, 3)), rng.normal((10, 4, 3)), "a")
    _, gp = _write_pair(tmp_path, rng.normal((5, 10, 3, 3)), rng.normal((10, 3, 3)), "b")
    code, err = run(["eval", hp, gp, "--out", tmp_path / "o"], capsys)
    assert code == 2
    msg = json.loads(err.strip().splitlines()[-1])
    assert msg["error"] == "shape_mismatch" and msg["axis"] == "K"
    assert (msg["hypotheses"], msg["ground_truth"]) == (4, 3)


def test_eval_io_failures(tmp_path, capsys):
    rng = RngStream(2)
    hp, gp = _write_pair(tmp_path, rng.normal((5, 10, 2, 3)), rng.normal((10, 2, 3)))
    code, _ = run(["eval", hp, tmp_path / "missing.cfh", "--out", tmp_path / "o"], capsys)
    assert code == 4
    bad = tmp_path / "bad.cfh"
    bad.write_bytes(b"JUNKJUNKJUNKJUNKJUNKJUNK")
    code, err = run(["eval", bad, gp, "--out", tmp_path / "o"], capsys)
    assert code == 4 and "magic" in err


def test_calibrate_writes_curve(tmp_path):
    rng = RngStream(3)
    hp, gp = _write_pair(tmp_path, rng.normal((50, 300, 2, 3)), rng.normal((300, 2, 3)))
    assert run(["calibrate", hp, gp, "--quantiles", 20, "--out", tmp_path / "c"])[0] == 0
    rows = read_csv(tmp_path / "c" / "calibration.csv")
    assert len(rows) == 20 and set(rows[0]) == {"q", "median", "keypoint_0", "keypoint_1"}
    assert (tmp_path / "c" / "reliability.svg").exists()


# -- pendulum --------------------------------------------------------------------------

def test_pendulum_pipeline_small(tmp_path):
    data = tmp_path / "sim"
    assert run(["pendulum", "simulate", "--pendulums", 10, "--seed", 5, "--out", data])[0] == 0
    assert (data / "data" / "manifest.json").exists()
    audit = json.loads((data / "report.json").read_text())["metrics"]["audit"]
    assert audit["I"] == [3] and 3 not in audit["III"]

    common = ["--pendulums", 10, "--seed", 5, "--data", data / "data", *TINY_FLOW]
    for d in ("t1", "t2"):
        assert run(["pendulum", "train", "--model", "II", "--out", tmp_path / d, *common])[0] == 0
    assert ((tmp_path / "t1" / "report.json").read_bytes() == (tmp_path / "t2" / "report.json").read_bytes())
    p = load_checkpoint(tmp_path / "t1" / "checkpoint_II.json")
    assert p.config.n_blocks == 2 and p.config.hidden == 8

    assert run(["pendulum", "zero-shot", "--samples", 10, "--out", tmp_path / "z", *common])[0] == 0
    for m in ("I", "II", "III"):
        assert (tmp_path / "z" / f"checkpoint_{m}.json").exists()
    comp = json.loads((tmp_path / "z" / "comparison.json").read_text())
    assert set(comp["test_nll_full_context"]) == {"I", "II", "III"}
    # the standalone training of model II reproduces the zero-shot one
    z2 = load_checkpoint(tmp_path / "z" / "checkpoint_II.json")
    assert all(np.array_equal(z2.tensors[k].data, p.tensors[k].data) for k in p.tensors)

    code, _ = run(["pendulum", "baseline", "--hyps", 20, "--steps", 30, "--pendulums", 10, "--seed", 5,
                   "--data", data / "data", "--out", tmp_path / "b"])
    assert code == 0
    rows = read_csv(tmp_path / "b" / "sigma.csv")
    assert len(rows) == 6 and {"sigma_nll", "sigma_min_mpjpe"} <= set(rows[0])


def test_pendulum_dataset_config_mismatch(tmp_path, capsys):
    assert run(["pendulum", "simulate", "--pendulums", 4, "--out", tmp_path / "s"])[0] == 0
    code, err = run(["pendulum", "train", "--pendulums", 5, "--data", tmp_path / "s" / "data",
                     "--out", tmp_path / "t", *TINY_FLOW], capsys)
    assert code == 2 and "different pendulum config" in err


def test_pendulum_integrator_failure_exit_code(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"pendulum": {"n_pendulums": 3, "velocity_var": 400.0, "substeps": 1,
                                            "dt": 0.05}}))
    code, err = run(["pendulum", "simulate", "--config", cfg, "--out", tmp_path / "o"], capsys)
    assert code == 3 and "numerical_failure" in err
