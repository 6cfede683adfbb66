import json

import pytest

from mmstt.cli import main


@pytest.fixture
def configs(tmp_path):
    spec = {
        "kind": "periodic", "n_points": 60, "n_dates": 44, "amplitude": 8.0,
        "period": 12.0, "noise_std": 0.1, "seed": 5,
    }
    model_cfg = {
        "t_in": 2, "t_out": 2, "c_in": 6, "grid_size": 8, "patch_size": 4,
        "embed_dim": 8, "n_layers": 1, "n_heads": 2, "ffn_hidden": 16, "dropout": 0.0,
    }
    train_cfg = {
        "learning_rate": 1e-3, "weight_decay": 1e-5, "patience": 5, "max_epochs": 3,
        "batch_size": 8, "smooth_l1_beta": 1.0, "seed": 0, "val_fraction": 0.2,
    }
    paths = {}
    for name, payload in (("spec", spec), ("model", model_cfg), ("train", train_cfg)):
        p = tmp_path / f"{name}.json"
        p.write_text(json.dumps(payload))
        paths[name] = str(p)
    return tmp_path, paths


def run_pipeline(tmp_path, paths, run="run"):
    out = tmp_path / run
    csv = out / "data.csv"
    cube = out / "cube.mmst"
    assert main(["synth", "--spec", paths["spec"], "--out", str(csv)]) == 0
    assert main(["preprocess", "--csv", str(csv), "--out", str(cube),
                 "--native-size", "32", "--working-size", "8",
                 "--t-in", "2", "--t-out", "2", "--val-fraction", "0.2"]) == 0
    assert main(["train", "--cube", str(cube), "--model-config", paths["model"],
                 "--train-config", paths["train"], "--out-dir", str(out / "model")]) == 0
    assert main(["eval", "--checkpoint", str(out / "model" / "checkpoint"),
                 "--cube", str(cube), "--out-dir", str(out / "report"),
                 "--val-fraction", "0.2", "--nodes", "2,3"]) == 0
    return out


def test_pipeline_smoke_end_to_end(configs):
    tmp_path, paths = configs
    out = run_pipeline(tmp_path, paths)
    assert (out / "data.csv").exists()
    assert (out / "cube.mmst").exists()
    assert (out / "cube.mmst.json").exists()
    assert (out / "model" / "history.csv").exists()
    assert (out / "model" / "checkpoint" / "manifest.json").exists()
    report = json.loads((out / "report" / "report.json").read_text())
    assert report["n_windows"] >= 1
    summary = (out / "report" / "summary.csv").read_text().splitlines()
    assert summary[0] == "horizon,rmse,mae,r2,ssim,corr"
    assert len(summary) == 1 + 2  # t+1, t+2
    nodes = (out / "report" / "nodes.csv").read_text().splitlines()
    assert len(nodes) == 1 + 2


def test_zero_epoch_training_still_produces_artifacts(configs, tmp_path):
    tmp_path, paths = configs
    train = json.loads(open(paths["train"]).read())
    train["max_epochs"] = 0
    p = tmp_path / "train0.json"
    p.write_text(json.dumps(train))
    paths = dict(paths, train=str(p))
    out = run_pipeline(tmp_path, paths, run="run0")
    history = (out / "model" / "history.csv").read_text().splitlines()
    assert history == ["epoch,train_loss,val_loss,is_best"]


def test_predict_window(configs):
    tmp_path, paths = configs
    out = run_pipeline(tmp_path, paths)
    pred = out / "pred.mmst"
    assert main(["predict", "--checkpoint", str(out / "model" / "checkpoint"),
                 "--cube", str(out / "cube.mmst"),
                 "--window-start", "0", "--out", str(pred)]) == 0
    from mmstt.numerics import load_tensor

    t = load_tensor(pred)
    assert t.shape == (2, 1, 8, 8)
    sidecar = json.loads((out / "pred.mmst.json").read_text())
    assert sidecar["units"] == "mm"
    assert len(sidecar["target_dates"]) == 2


def test_rerun_is_byte_identical(configs):
    tmp_path, paths = configs
    a = run_pipeline(tmp_path, paths, run="a")
    b = run_pipeline(tmp_path, paths, run="b")
    for rel in ("data.csv", "model/history.csv", "report/report.json",
                "report/summary.csv", "report/bins.csv"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_validation_failures_exit_1(configs, capsys):
    tmp_path, paths = configs
    assert main(["synth", "--spec", str(tmp_path / "missing.json"), "--out", "x.csv"]) == 1
    assert "not found" in capsys.readouterr().err

    bad_spec = tmp_path / "bad.json"
    bad_spec.write_text(json.dumps({"kind": "volcanic"}))
    assert main(["synth", "--spec", str(bad_spec), "--out", str(tmp_path / "x.csv")]) == 1

    assert main(["preprocess", "--csv", str(tmp_path / "nope.csv"),
                 "--out", str(tmp_path / "c.mmst")]) == 1
    assert main(["eval", "--checkpoint", str(tmp_path / "nope"),
                 "--cube", str(tmp_path / "c.mmst"), "--out-dir", str(tmp_path / "r")]) == 1


def test_worker_thread_cap_does_not_change_output(configs, monkeypatch):
    tmp_path, paths = configs
    csv = tmp_path / "threads.csv"
    assert main(["synth", "--spec", paths["spec"], "--out", str(csv)]) == 0
    cubes = {}
    for tag, threads in (("one", "1"), ("four", "4")):
        monkeypatch.setenv("MMSTT_THREADS", threads)
        out = tmp_path / f"cube_{tag}.mmst"
        assert main(["preprocess", "--csv", str(csv), "--out", str(out),
                     "--native-size", "32", "--working-size", "8",
                     "--t-in", "2", "--t-out", "2"]) == 0
        cubes[tag] = out.read_bytes()
    assert cubes["one"] == cubes["four"]
    monkeypatch.setenv("MMSTT_THREADS", "zero")
    assert main(["preprocess", "--csv", str(csv), "--out", str(tmp_path / "x.mmst"),
                 "--native-size", "32", "--working-size", "8",
                 "--t-in", "2", "--t-out", "2"]) == 1


def test_manifest_written_with_resolved_config(configs):
    tmp_path, paths = configs
    out = run_pipeline(tmp_path, paths)
    manifest = json.loads((out / "model" / "run_manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["resolved_config"]["train"]["learning_rate"] == 1e-3
    assert manifest["resolved_config"]["model"]["grid_size"] == 8
    assert "created_at" in manifest
