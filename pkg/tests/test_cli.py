import csv

import pytest

from safenav.cli import main
from safenav.config import RunConfig


@pytest.fixture
def tiny_config(tmp_path):
    cfg = RunConfig.from_dict({
        "eval": {"episodes": 3},
        "safety": {"dataset_size": 40, "epochs": 1, "hidden": [8, 8, 8], "batch_size": 16,
                   "active_only": False},
        "train": {"episodes": 2, "batch_size": 8, "warmup": 16},
        "sim": {"t_max": 4.0},
    })
    path = tmp_path / "tiny.yaml"
    path.write_text(cfg.to_yaml())
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


def test_config_prints_default(capsys):
    assert run("config") == 0
    assert "train:" in capsys.readouterr().out


def test_baseline_eval_writes_reports(tmp_path, tiny_config):
    out = tmp_path / "idm"
    assert run("eval", "--config", tiny_config, "--policy", "idm", "--out", out) == 0
    rows = list(csv.DictReader(open(out / "report.csv")))
    assert rows[0]["task"] == "left" and rows[0]["episodes"] == "3"
    assert "Success rate(%)" in (out / "report.txt").read_text()


def test_pipeline_collect_train_eval_ablate(tmp_path, tiny_config):
    assert run("collect-safety-data", "--config", tiny_config, "--samples", 30, "--out", tmp_path / "d") == 0
    assert run("train-safety", "--config", tiny_config, "--dataset", tmp_path / "d" / "safety_data.bin",
               "--out", tmp_path / "s") == 0
    model = tmp_path / "s" / "safety_model"
    assert model.exists()
    assert run("train-rl", "--config", tiny_config, "--safety", "on", "--safety-model", model,
               "--out", tmp_path / "rl") == 0
    ck = tmp_path / "rl" / "final"
    assert run("eval", "--config", tiny_config, "--checkpoint", ck, "--safety", "on", "--safety-model", model,
               "--episodes", 2, "--out", tmp_path / "e") == 0
    assert "+ safety" in (tmp_path / "e" / "report.txt").read_text()
    assert run("ablate", "--config", tiny_config, "--train", "--cells", "TD3+Attention", "pre-trained+Safety",
               "--safety-model", model, "--episodes", 1, "--out", tmp_path / "abl") == 0
    table = (tmp_path / "abl" / "ablation.txt").read_text()
    assert "TD3+Attention" in table and "pre-trained+Safety" in table


def test_replay_and_visualize(tmp_path, tiny_config):
    ck = tmp_path / "rl"
    assert run("train-rl", "--config", tiny_config, "--out", ck) == 0
    assert run("replay", "--config", tiny_config, "--checkpoint", ck / "final", "--out", tmp_path / "rp") == 0
    assert (tmp_path / "rp" / "attention.csv").exists()
    assert run("visualize-attention", "--trace", tmp_path / "rp" / "trace.csv",
               "--weights", tmp_path / "rp" / "attention.csv", "--every", 20, "--out", tmp_path / "img") == 0
    assert (tmp_path / "img" / "heatmap.png").exists()


def test_error_exit_codes(tmp_path, tiny_config, capsys):
    assert run("eval", "--config", tmp_path / "missing.yaml") == 2
    assert run("eval", "--config", tiny_config, "--checkpoint", tmp_path / "nope") == 2
    assert run("eval", "--config", tiny_config) == 2            # actor policy without a checkpoint
    assert run("eval", "--config", tiny_config, "--policy", "random", "--safety", "on") == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("train:\n  gama: 0.9\n")
    assert run("eval", "--config", bad) == 2
    assert "gama" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        run("eval", "--safety", "maybe")
