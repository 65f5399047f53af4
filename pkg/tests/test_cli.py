import json
import subprocess
import sys

import numpy as np
import pytest

from calibfw import cli
from calibfw import pano_pipeline as pp
from calibfw.nn.checkpoint import read_header


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-panos", "--count", 2, "--height", 64, "--style", "indoor-like", "--out", root / "panos_a",
               "--seed", 1) == 0
    assert run("gen-panos", "--count", 2, "--height", 64, "--style", "outdoor-like", "--out", root / "panos_b",
               "--seed", 2) == 0
    for dom in ("a", "b"):
        assert run("gen-dataset", "--panos", root / f"panos_{dom}", "--out", root / f"data_{dom}", "--count", 40,
                   "--size", 16, "--seed", 3, "--deterministic") == 0
    assert run("train", "--data", root / "data_a", "--arch", "calibnet-micro", "--epochs", 2,
               "--out", root / "base.ckpt", "--deterministic") == 0
    return root


def test_gen_panos_outputs(workspace):
    files = sorted((workspace / "panos_a").glob("*.png"))
    assert len(files) == 2
    for f in files:
        h, w = pp.load_png(f).shape[:2]
        assert w == 2 * h
    index = json.loads((workspace / "panos_a" / "index.json").read_text())
    assert index["style"] == "indoor-like" and len(index["files"]) == 2


def test_gen_panos_same_seed_identical(tmp_path):
    run("gen-panos", "--count", 1, "--height", 32, "--out", tmp_path / "x", "--seed", 9)
    run("gen-panos", "--count", 1, "--height", 32, "--out", tmp_path / "y", "--seed", 9)
    assert (tmp_path / "x" / "pano_0000.png").read_bytes() == (tmp_path / "y" / "pano_0000.png").read_bytes()


def test_gen_panos_zero_count_usage_error(tmp_path, capsys):
    assert run("gen-panos", "--count", 0, "--out", tmp_path) == 2
    assert "usage error" in capsys.readouterr().err


def test_gen_dataset_split_and_config(workspace):
    man = pp.load_manifest(workspace / "data_a")
    assert man.counts() == {"train": 32, "val": 8}
    cfg = json.loads((workspace / "data_a" / "run_config.json").read_text())
    assert cfg["seed"] == 3 and cfg["size"] == 16 and cfg["command"] == "gen-dataset"


def test_gen_dataset_missing_panos(tmp_path, capsys):
    assert run("gen-dataset", "--panos", tmp_path / "nope", "--out", tmp_path / "d") == 1
    err = capsys.readouterr().err.strip()
    assert err.count("\n") == 0 and "does not exist" in err


def test_train_outputs_history(workspace):
    hist = [json.loads(x) for x in (workspace / "base.history.jsonl").read_text().splitlines()]
    assert [h["epoch"] for h in hist] == [1, 2]
    cfg = json.loads((workspace / "base.config.json").read_text())
    assert cfg["lr"] == 0.003 and cfg["batch_size"] == 16


def test_train_invalid_arch(workspace, tmp_path, capsys):
    assert run("train", "--data", workspace / "data_a", "--arch", "resnet50", "--out", tmp_path / "m.ckpt") == 1
    assert "calibnet-tiny" in capsys.readouterr().err


def test_config_precedence(workspace, tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"epochs": 1, "lr": 0.01, "arch": "calibnet-micro"}))
    assert run("train", "--config", conf, "--lr", 0.02, "--data", workspace / "data_a", "--out", tmp_path / "m.ckpt") == 0
    cfg = json.loads((tmp_path / "m.config.json").read_text())
    assert cfg["epochs"] == 1 and cfg["lr"] == 0.02 and cfg["batch_size"] == 16


def test_env_data_root(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("CALIB_DATA_DIR", str(workspace))
    assert run("eval", "--model", workspace / "base.ckpt", "--data", "data_a", "--out-dir", tmp_path,
               "--timestamp", "T0") == 0
    assert (tmp_path / "base_data_a-val_T0.csv").exists()


def test_incremental_finetune_equals_lwf_lambda0(workspace):
    common = ["--base", workspace / "base.ckpt", "--old-data", workspace / "data_a", "--new-data", workspace / "data_b",
              "--max-steps", 5, "--seed", 4, "--deterministic"]
    assert run("train-incremental", "--strategy", "finetune", "--out", workspace / "ft.ckpt", *common) == 0
    assert run("train-incremental", "--strategy", "lwf", "--lambda", 0, "--out", workspace / "lwf0.ckpt", *common) == 0
    assert (workspace / "ft.ckpt").read_bytes() == (workspace / "lwf0.ckpt").read_bytes()


def test_incremental_lucir_mismatch(workspace, tmp_path, capsys):
    code = run("train-incremental", "--strategy", "lucir", "--exemplar-pct", 10, "--base", workspace / "base.ckpt",
               "--old-data", workspace / "data_a", "--new-data", workspace / "data_b", "--out", tmp_path / "x.ckpt")
    assert code == 1 and "cosine head" in capsys.readouterr().err


def test_incremental_bic_header_and_eval(workspace, tmp_path):
    assert run("train-incremental", "--strategy", "bic", "--exemplar-pct", 20, "--epochs", 1,
               "--base", workspace / "base.ckpt", "--old-data", workspace / "data_a",
               "--new-data", workspace / "data_b", "--out", workspace / "bic.ckpt") == 0
    extra = read_header(workspace / "bic.ckpt")["extra"]
    assert len(extra["bic"]["alpha"]) == 3 and len(extra["bic"]["beta"]) == 3
    assert run("eval", "--model", workspace / "bic.ckpt", "--data", workspace / "data_a", "--out-dir", tmp_path,
               "--timestamp", "T1") == 0
    lines = (tmp_path / "bic_data_a-val_T1.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[2].startswith("bic+bic")


def test_eval_empty_manifest(tmp_path, capsys):
    d = tmp_path / "empty"
    d.mkdir()
    (d / "manifest.jsonl").write_text(json.dumps({"schema_version": 1, "seed": 0, "ranges": {}, "crop_size": 16}) + "\n")
    assert run("eval", "--model", "m.ckpt", "--data", d, "--out-dir", tmp_path) == 1
    capsys.readouterr()


def test_sweep_writes_csv_and_svg(workspace, tmp_path):
    assert run("sweep-exemplars", "--base", workspace / "base.ckpt", "--old-data", workspace / "data_a",
               "--new-data", workspace / "data_b", "--pcts", "0,50", "--epochs", 1, "--out-dir", tmp_path) == 0
    assert (tmp_path / "sweep.csv").read_text().count("\n") == 3
    assert (tmp_path / "sweep.svg").read_text().startswith("<svg")


def test_draw_horizon_overlay(workspace, tmp_path):
    image = workspace / "data_a" / "images" / "000000.png"
    assert run("draw-horizon", "--model", workspace / "base.ckpt", "--image", image, "--out", tmp_path / "o.png") == 0
    out = pp.load_png(tmp_path / "o.png")
    assert out.shape == (64, 64, 3)
    green = np.all(out == (40, 200, 60), axis=-1)
    red = np.all(out == (230, 40, 40), axis=-1)
    assert green.any() and red.any()


def test_missing_required_option_exits_nonzero(capsys):
    with pytest.raises(SystemExit) as exc:
        run("train")
    assert exc.value.code == 2
    assert "--data" in capsys.readouterr().err


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "calibfw.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "draw-horizon" in proc.stdout
