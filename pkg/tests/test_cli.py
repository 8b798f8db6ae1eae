import json
import subprocess
import sys
import time

import pytest
import yaml

from stepslab.cli import run
from stepslab.config import load_config
from stepslab.presets import PRESETS

TRAIN_CFG = """\
task: spiral2
steps: 30
batch_size: 64
seed: 3
eval_every: 10
optimizer:
  lr: 0.003
model:
  kind: mlp
  step_widths: [16, 24, 32]
  depths: [4, 2, 2]
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "spiral.yaml"
    path.write_text(TRAIN_CFG)
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_train")
    cfg = root / "spiral.yaml"
    cfg.write_text(TRAIN_CFG)
    out = root / "run"
    assert run(["train", "--config", str(cfg), "--out", str(out)]) == 0
    return out


def test_analyze_deit_s(capsys):
    assert run(["analyze", "--preset", "deit-s"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert abs(report["flops_total"] - 4.6e9) / 4.6e9 <= 0.03
    assert abs(report["params_total"] - 22.1e6) / 22.1e6 <= 0.02
    assert report["layers_total"] == 62


def test_analyze_writes_files(tmp_path, capsys):
    assert run(["analyze", "--preset", "steps-deit-s", "--table", "--out", str(tmp_path)]) == 0
    assert "layers_total" in capsys.readouterr().out
    assert json.loads((tmp_path / "cost.json").read_text())["layers_total"] == 122
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["artifacts"] == ["cost.json", "cost.txt"]


def test_analyze_config(cfg_file, capsys):
    assert run(["analyze", "--config", str(cfg_file)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["blocks_total"] == 8


def test_analyze_every_preset_is_fast(capsys):
    for name in PRESETS:
        start = time.perf_counter()
        assert run(["analyze", "--preset", name]) == 0
        assert time.perf_counter() - start < 1.0
    capsys.readouterr()


def test_genconfig(capsys, tmp_path):
    assert run(["genconfig", "--base-depth", "12", "--width", "384", "--steps", "3"]) == 0
    data = yaml.safe_load(capsys.readouterr().out)
    assert data["model"]["step_widths"] == [192, 272, 384]
    assert data["model"]["depths"] == [12, 6, 6]
    out = tmp_path / "g.yaml"
    assert run(["genconfig", "--base-depth", "4", "--width", "32", "--steps", "3", "--kind", "mlp",
                "--task", "spiral2", "--out", str(out)]) == 0
    cfg = load_config(out)
    assert cfg.task == "spiral2" and cfg.model.step_widths == (16, 24, 32) and cfg.model.depths == (4, 2, 2)


def test_unknown_subcommand_exits_one_with_usage(capsys):
    assert run(["frobnicate"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_missing_subcommand(capsys):
    assert run([]) == 1
    assert "usage:" in capsys.readouterr().err


def test_config_error_exits_one(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(TRAIN_CFG + "  width: 30\n")
    assert run(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "32" in err and "30" in err
    assert run(["genconfig", "--base-depth", "1", "--width", "32", "--steps", "2"]) == 1


def test_runtime_error_exits_two(cfg_file, tmp_path, capsys):
    assert run(["ablate", "--kind", "mask_table6", "--checkpoint", str(tmp_path / "nothing"),
                "--out", str(tmp_path / "a")]) == 2
    assert "checkpoint" in capsys.readouterr().err
    assert run(["train", "--config", str(cfg_file), "--set", "optimizer.lr=1e30", "--set",
                "optimizer.warmup_frac=0", "--out", str(tmp_path / "t")]) == 2
    assert "diverged at step" in capsys.readouterr().err


def test_train_artifacts(trained):
    names = {p.name for p in trained.iterdir()}
    assert {"run.csv", "model.ssnc", "model.json", "config.yaml", "loss.png", "manifest.json"} <= names
    manifest = json.loads((trained / "manifest.json").read_text())
    assert manifest["seed"] == 3 and len(manifest["config_hash"]) == 64
    assert manifest["command"][:2] == ["stepslab", "train"]
    assert set(manifest["artifacts"]) == names - {"manifest.json"}
    assert (trained / "run.csv").read_text().startswith("step,train_loss,eval_metric\n")


def test_manifest_reconstructs_run(trained, tmp_path):
    manifest = json.loads((trained / "manifest.json").read_text())
    cfg = tmp_path / "again.json"
    cfg.write_text(json.dumps(manifest["config"]))
    assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "run.csv").read_bytes() == (trained / "run.csv").read_bytes()
    assert (tmp_path / "again" / "model.ssnc").read_bytes() == (trained / "model.ssnc").read_bytes()


def test_ablate_mask_from_checkpoint(trained, tmp_path, capsys):
    out = tmp_path / "abl"
    assert run(["ablate", "--kind", "mask_table6", "--checkpoint", str(trained), "--out", str(out)]) == 0
    lines = (out / "mask_table6.csv").read_text().splitlines()
    assert lines[0] == "path,masked_channels,metric" and len(lines) == 13
    assert (out / "mask_table6.png").stat().st_size > 0
    capsys.readouterr()


def test_ablate_steps_preset(tmp_path, capsys):
    out = tmp_path / "steps"
    assert run(["ablate", "--kind", "steps_table4", "--preset", "deit-s", "--out", str(out)]) == 0
    text = (out / "steps_table4.csv").read_text()
    assert "192 272 384" in text
    capsys.readouterr()


def test_probe_artifacts(tmp_path, capsys):
    out = tmp_path / "probe"
    assert run(["probe", "--preset", "toy-probe-residual-96", "--preset", "toy-probe-steps-96",
                "--batch", "2", "--tokens", "8", "--out", str(out)]) == 0
    names = {p.name for p in out.iterdir()}
    assert {"gamma_toy-probe-residual-96.csv", "gamma_toy-probe-steps-96.csv", "gamma.png",
            "gamma_per_step.png", "manifest.json"} <= names
    assert "first-quarter mean gamma" in capsys.readouterr().out


def test_probe_layout_preset_is_config_error(tmp_path, capsys):
    assert run(["probe", "--preset", "steps-swin-t", "--out", str(tmp_path)]) == 1


def test_output_dir_from_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("STEPSLAB_OUT", str(tmp_path / "env"))
    assert run(["probe", "--preset", "toy-probe-residual-96", "--batch", "1", "--tokens", "4"]) == 0
    assert (tmp_path / "env" / "probe" / "manifest.json").exists()
    capsys.readouterr()


def test_gradcheck_command(tmp_path, capsys):
    assert run(["gradcheck", "--out", str(tmp_path)]) == 0
    assert "max relative error" in capsys.readouterr().out
    assert (tmp_path / "gradcheck.csv").read_text().startswith("check,relative_error\n")


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "stepslab.cli", "analyze", "--preset", "deit-t"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and json.loads(proc.stdout)["layers_total"] == 62
