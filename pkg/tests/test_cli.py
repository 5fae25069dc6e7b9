import csv
import json

import numpy as np
import pytest

from stable_ndde import cli
from stable_ndde.ndde import NddeModel
from stable_ndde.nets import LrfNetwork
from stable_ndde.systems import FeedbackPolicy, inverted_pendulum
from stable_ndde.trainer import save_checkpoint


def write(tmp_path, name, cfg):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


DATA = {"system": "oscillator", "initial_conditions": [[1.0, 0.0], [0.0, 2.0]], "horizon": [0.0, 3.0],
        "N": 16, "sigma": 0.1, "lookback": 1.0, "seed": 4}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.run(["generate-data", "--config", write(root, "data.json", DATA), "--out", str(root / "data")]) == 0
    train = {"dataset": "data/manifest.json", "model": {"tau": 0.25, "K": 4, "hidden": [8, 8]},
             "train": {"iterations": 5, "lr_start": 1e-2, "lr_end": 1e-3, "step": 0.125}, "seed": 0}
    assert cli.run(["train-ndde", "--config", write(root, "train.json", train), "--out", str(root / "ndde")]) == 0
    ev = {"checkpoint": "ndde/checkpoint.json", "dataset": "data/manifest.json", "step": 0.125}
    assert cli.run(["evaluate", "--config", write(root, "eval.json", ev), "--out", str(root / "eval")]) == 0
    return root


def test_generate_data_is_byte_identical(tmp_path, pipeline):
    cfg = write(tmp_path, "data.json", DATA)
    assert cli.run(["generate-data", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
    first = sorted((pipeline / "data").glob("*.csv"))
    assert first
    for p in first:
        assert (tmp_path / "again" / p.name).read_bytes() == p.read_bytes()


def test_seed_override_changes_noise(tmp_path, pipeline):
    cfg = write(tmp_path, "data.json", DATA)
    assert cli.run(["generate-data", "--config", cfg, "--out", str(tmp_path / "s"), "--seed", "5"]) == 0
    p = sorted((pipeline / "data").glob("*.csv"))[0]
    assert (tmp_path / "s" / p.name).read_bytes() != p.read_bytes()


def test_training_outputs(pipeline):
    metrics = json.loads((pipeline / "ndde" / "metrics.json").read_text())
    assert np.isfinite(metrics["train_mse"])
    rows = [json.loads(line) for line in (pipeline / "ndde" / "run.jsonl").read_text().splitlines()]
    assert sum("iteration" in r for r in rows) == 5


def test_evaluate_writes_predictions(pipeline):
    files = sorted((pipeline / "eval").glob("predictions_*.csv"))
    assert len(files) == 2
    with open(files[0]) as fh:
        header = next(csv.reader(fh))
    assert header[0] == "t" and len(header) == 3
    assert "mse" in json.dumps(json.loads((pipeline / "eval" / "metrics.json").read_text()))


def test_export_plots(tmp_path, pipeline):
    cfg = {"run": str(pipeline / "ndde" / "run.jsonl"),
           "predictions": [str(p) for p in sorted((pipeline / "eval").glob("predictions_*.csv"))]}
    out = tmp_path / "plots"
    assert cli.run(["export-plots", "--config", write(tmp_path, "plots.json", cfg), "--out", str(out)]) == 0
    with open(out / "loss_curve.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iteration", "train_loss", "lrf_loss", "lr"]
    assert len(rows) - 1 == 5
    assert (out / "loss_curve.png").stat().st_size > 0
    assert (out / "predictions_000.png").exists() and (out / "predictions_001.png").exists()


def test_fit_gp(tmp_path, pipeline):
    cfg = {"dataset": str(pipeline / "data" / "manifest.json"), "grid_points": 11}
    assert cli.run(["fit-gp", "--config", write(tmp_path, "gp.json", cfg), "--out", str(tmp_path / "gp")]) == 0
    arr = np.loadtxt(tmp_path / "gp" / "gp_000.csv", delimiter=",", skiprows=1)
    assert arr.shape == (11, 2)


def test_certify_policy_prints_summary(tmp_path, capsys):
    ip = inverted_pendulum()
    save_checkpoint(tmp_path / "ckpt.json", policy=FeedbackPolicy.from_lqr(ip, 0.0),
                    lrf=LrfNetwork.init(2, (8,)))
    cfg = {"system": "inverted-pendulum", "checkpoint": "ckpt.json",
           "razumikhin": {"tau_V": 0.01, "K_V": 5, "alpha": 1.0, "q": 1.2},
           "radius": 0.5, "histories": 3, "horizon": 0.5, "step": 0.01, "seed": 1}
    capsys.readouterr()
    assert cli.run(["certify", "--config", write(tmp_path, "cert.json", cfg), "--out", str(tmp_path / "c")]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert set(summary) == {"max_residual", "gamma", "M", "violations"}
    assert (tmp_path / "c" / "certificate.json").exists()


def test_user_errors_exit_one(tmp_path, monkeypatch):
    assert cli.run(["no-such-command", "--config", "x.json"]) == 1
    assert cli.run(["generate-data", "--config", str(tmp_path / "missing.json")]) == 1
    assert cli.run(["generate-data", "--config", write(tmp_path, "a.json", DATA), "--bogus"]) == 1
    bad = dict(DATA)
    del bad["N"]
    assert cli.run(["generate-data", "--config", write(tmp_path, "b.json", bad), "--out", str(tmp_path)]) == 1
    fb = {"system": "inverted-pendulum", "tau_u": 0.03, "lqr": {"R": [[0.0]]},
          "razumikhin": {"tau_V": 0.01, "K_V": 20, "alpha": 1.0, "q": 1.2}, "train": {"iterations": 1}}
    assert cli.run(["train-feedback", "--config", write(tmp_path, "f.json", fb), "--out", str(tmp_path)]) == 1
    monkeypatch.setenv("STABLE_NDDE_THREADS", "zero")
    assert cli.run(["generate-data", "--config", write(tmp_path, "c.json", DATA), "--out", str(tmp_path)]) == 1


def test_numerical_failure_exits_two(tmp_path, pipeline):
    m = NddeModel.init(1, 0.25, 4, (8, 8), seed=0)
    for a in m.params.arrays():
        a *= 1e4
    save_checkpoint(tmp_path / "big.json", model=m)
    cfg = {"checkpoint": "big.json", "dataset": str(pipeline / "data" / "manifest.json"), "step": 0.125}
    assert cli.run(["evaluate", "--config", write(tmp_path, "e.json", cfg), "--out", str(tmp_path / "e")]) == 2
