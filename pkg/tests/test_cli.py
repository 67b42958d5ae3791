import json

import numpy as np
import pytest

from nexus.cli import main, read_ppm, write_ppm
from nexus.data import read_dataset

TINY = {
    "setup": {
        "n_train": 8, "n_eval": 2, "text_steps": 10,
        "unet": {"base": 4, "mults": [1, 2, 4, 4], "res_blocks": 1, "attn_scales": [4], "time_dim": 8,
                 "image_size": 32, "patch": 2, "text_dim": 64},
        "pretrain": {"steps": 2, "batch": 2, "warmup": 1, "dtype": "float64", "conv_backend": "numpy"},
    },
    "run": {"train": {"steps": 2, "batch": 2, "warmup": 1, "dtype": "float64", "conv_backend": "numpy"}},
}


def _json(path):
    return json.loads(path.read_text())


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["gen", "--n", "3", "--seed", "5", "--out", str(root / "data")]) == 0
    assert main(["train-adapter", "--config", str(cfg), "--out", str(root / "run")]) == 0
    return root, cfg


def test_gen_writes_dataset_and_run_json(workspace):
    root, _ = workspace
    ds = read_dataset(root / "data" / "dataset.nxd")
    assert len(ds) == 3 and ds.kind == "edge"
    run = _json(root / "data" / "run.json")
    assert run["command"] == "gen" and run["config"]["seed"] == 5


def test_gen_seed_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("NEXUS_SEED", "77")
    assert main(["gen", "--n", "1", "--out", str(tmp_path)]) == 0
    assert _json(tmp_path / "run.json")["config"]["seed"] == 77


def test_gen_rerun_bit_identical(tmp_path):
    for d in ("a", "b"):
        assert main(["gen", "--n", "2", "--seed", "1", "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a" / "dataset.nxd").read_bytes() == (tmp_path / "b" / "dataset.nxd").read_bytes()


def test_train_adapter_run_json(workspace):
    root, _ = workspace
    run = _json(root / "run" / "run.json")["config"]
    assert run["run"]["variant"] == "prime" and run["run"]["train"]["steps"] == 2
    assert run["setup"]["unet"]["base"] == 4
    assert (root / "run" / run["checkpoint"].split("/")[-1]).exists()


def test_sample_guidance_zero_logs_uncond(workspace, capsys):
    root, _ = workspace
    out = root / "sample"
    args = ["sample", "--run", str(root / "run"), "--condition", str(root / "data" / "dataset.nxd"),
            "--steps", "3", "--guidance", "0", "--log-branches", "--out", str(out)]
    assert main(args) == 0
    log = _json(out / "run.json")["config"]["branch_log"]
    assert len(log) == 3 and all(e["eps_equals_uncond"] for e in log)
    img = read_ppm(out / "sample.ppm")
    assert img.shape == (3, 32, 32) and img.dtype == np.uint8
    first = (out / "sample.ppm").read_bytes()
    assert main(args) == 0
    assert (out / "sample.ppm").read_bytes() == first


def test_eval_writes_report(workspace):
    root, _ = workspace
    out = root / "eval"
    assert main(["eval", "--run", str(root / "run"), "--n", "2", "--steps", "2", "--out", str(out)]) == 0
    rep = _json(out / "eval.json")
    assert rep["n"] == 2 and 0 <= rep["edge_f1"] <= 1 and 0 <= rep["color_accuracy"] <= 1
    assert rep["frechet"] >= 0 and (out / "run.json").exists()


def test_count_preset_output(tmp_path, capsys):
    assert main(["count", "--preset", "slim-full", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    summary = [ln for ln in text.splitlines() if ln.startswith("params ")][0]
    params_m = float(summary.split()[1].rstrip("M"))
    assert abs(params_m / 59.29 - 1) <= 0.15
    csv = (tmp_path / "report.csv").read_text().splitlines()
    assert csv[0] == "layer,params,macs"
    assert _json(tmp_path / "run.json")["command"] == "count"


def test_count_from_config(tmp_path):
    cfg = tmp_path / "a.json"
    cfg.write_text(json.dumps({"variant": "slim", "stages": 2, "channels": [8, 16], "unshuffle": 2}))
    assert main(["count", "--config", str(cfg), "--resolution", "32"]) == 0


def test_unknown_config_key_is_exit_2(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"variant": "prime", "stages": 2, "channels": [8, 16], "colour": 3}))
    assert main(["count", "--config", str(cfg)]) == 2
    bad_train = dict(TINY, run={"train": {"steps": 1, "momentum": 0.9}})
    cfg.write_text(json.dumps(bad_train))
    assert main(["train-adapter", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2
    cfg.write_text(json.dumps({"setup": {}, "extra": 1}))
    assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "p")]) == 2


def test_missing_paths_are_exit_2(tmp_path):
    assert main(["count", "--config", str(tmp_path / "nope.json")]) == 2
    assert main(["sample", "--run", str(tmp_path), "--condition", "x", "--out", str(tmp_path / "o")]) == 2
    assert main(["count", "--preset", "huge"]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_abort_is_exit_3(tmp_path):
    cfg = dict(TINY)
    cfg["run"] = {"train": dict(TINY["run"]["train"], lr=1e300)}
    path = tmp_path / "nan.json"
    path.write_text(json.dumps(cfg))
    assert main(["train-adapter", "--config", str(path), "--steps", "4", "--out", str(tmp_path / "r")]) == 3


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--scope", "primitives", "--out", str(tmp_path)]) == 0
    assert "matmul" in capsys.readouterr().out
    assert all(r["ok"] for r in _json(tmp_path / "run.json")["config"]["results"])


def test_preset_echo(capsys):
    assert main(["preset", "sd-paper"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["lr"] == 5e-6 and cfg["grad_accum"] == 4
    assert main(["preset", "nope"]) == 2


def test_ppm_round_trip_and_mapping(tmp_path):
    img = np.array([-1.0, 0.0, 1.0, 0.5]).reshape(1, 2, 2).repeat(3, axis=0)
    write_ppm(tmp_path / "x.ppm", img)
    raw = (tmp_path / "x.ppm").read_bytes()
    assert raw.startswith(b"P6\n2 2\n255\n")
    px = read_ppm(tmp_path / "x.ppm")
    assert px[0].ravel().tolist() == [0, 128, 255, 191]
