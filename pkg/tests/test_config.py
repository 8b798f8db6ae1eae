import json
from dataclasses import fields

import pytest
from hypothesis import given
from hypothesis import strategies as st

from stepslab.config import apply_override, build_config, config_hash, emit_config, load_config, parse_text
from stepslab.errors import ConfigError
from stepslab.harness.train import OptimizerConfig, TrainConfig
from stepslab.steps import StepsConfig

BASE = """\
task: spiral2
steps: 100
batch_size: 64
optimizer:
  lr: 0.003
  weight_decay: 0.0
model:
  kind: mlp
  slice_widths: [16, 8, 8]
  depths: [4, 2, 2]
"""


def write(tmp_path, text, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_load_train_config(tmp_path):
    cfg = load_config(write(tmp_path, BASE))
    assert isinstance(cfg, TrainConfig)
    assert cfg.model.step_widths == (16, 24, 32)
    assert cfg.optimizer.lr == 0.003 and cfg.steps == 100


def test_model_only_file(tmp_path):
    cfg = load_config(write(tmp_path, "model:\n  kind: transformer\n  step_widths: [192, 272, 384]\n"
                                      "  depths: [12, 6, 6]\n  heads: [3, 4, 6]\n"))
    assert cfg == StepsConfig((192, 80, 112), (12, 6, 6), "transformer", (3, 4, 6))


def test_parse_error_reports_line(tmp_path):
    bad = BASE.replace("  lr: 0.003", "  lr: [0.003")
    with pytest.raises(ConfigError, match="line 6"):
        load_config(write(tmp_path, bad))


def test_top_level_must_be_mapping():
    with pytest.raises(ConfigError, match="mapping"):
        parse_text("- 1\n- 2\n")


@pytest.mark.parametrize("text, match", [
    (BASE + "epochs: 3\n", "epochs"),
    (BASE.replace("  lr: 0.003", "  lr: 0.003\n  momentum: 0.9"), "optimizer.momentum"),
    (BASE + "  dropout: 0.1\n", "dropout"),
])
def test_unknown_keys_are_rejected(tmp_path, text, match):
    with pytest.raises(ConfigError, match=match):
        load_config(write(tmp_path, text))


def test_width_sum_mismatch_prints_both_numbers(tmp_path):
    text = BASE + "  width: 30\n"
    with pytest.raises(ConfigError) as info:
        load_config(write(tmp_path, text))
    assert "32" in str(info.value) and "30" in str(info.value)


def test_invariant_violation_names_field(tmp_path):
    with pytest.raises(ConfigError, match="depths"):
        load_config(write(tmp_path, BASE.replace("[4, 2, 2]", "[4, 2]")))
    with pytest.raises(ConfigError, match="batch_size"):
        load_config(write(tmp_path, BASE.replace("batch_size: 64", "batch_size: 0")))


def test_override_changes_exactly_one_field(tmp_path):
    path = write(tmp_path, BASE)
    before = load_config(path)
    after = load_config(path, ["optimizer.lr=0.001"])
    assert after.optimizer.lr == 0.001
    for f in fields(OptimizerConfig):
        if f.name != "lr":
            assert getattr(after.optimizer, f.name) == getattr(before.optimizer, f.name)
    for f in fields(TrainConfig):
        if f.name != "optimizer":
            assert getattr(after, f.name) == getattr(before, f.name)


def test_override_lists_and_new_sections():
    data = parse_text(BASE)
    apply_override(data, "model.depths=[8, 4, 4]")
    apply_override(data, "seed=7")
    cfg = build_config(data)
    assert cfg.model.depths == (8, 4, 4) and cfg.seed == 7
    with pytest.raises(ConfigError):
        apply_override(data, "no_equals_sign")
    with pytest.raises(ConfigError):
        apply_override(data, "steps.inner=1")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.yaml")


def test_emit_reload_round_trip(tmp_path):
    cfg = load_config(write(tmp_path, BASE))
    for widths in ("slice", "step"):
        path = tmp_path / f"out_{widths}.yaml"
        emit_config(cfg, path, widths=widths)
        assert load_config(path) == cfg


def test_json_is_accepted(tmp_path):
    cfg = load_config(write(tmp_path, BASE))
    path = write(tmp_path, json.dumps(cfg.to_dict()), "cfg.json")
    assert load_config(path) == cfg


@given(st.lists(st.integers(1, 6), min_size=1, max_size=4), st.integers(0, 50), st.floats(1e-6, 1.0))
def test_round_trip_property(slices, seed, lr):
    model = StepsConfig(tuple(8 * s for s in slices), tuple(1 for _ in slices), "mlp")
    cfg = TrainConfig("spiral2", model, optimizer=OptimizerConfig(lr=lr), seed=seed)
    assert build_config(parse_text(emit_config(cfg))) == cfg


def test_config_hash_tracks_content():
    a = build_config(parse_text(BASE))
    b = build_config(parse_text(BASE))
    assert config_hash(a) == config_hash(b) and len(config_hash(a)) == 64
    data = parse_text(BASE)
    apply_override(data, "seed=1")
    assert config_hash(build_config(data)) != config_hash(a)
