import math
import struct

import numpy as np
import pytest

from stepslab.costing import width_schedule
from stepslab.errors import CheckpointError, ConfigError, PreconditionError, TrainingDivergence
from stepslab.harness import ablation_sweep
from stepslab.harness.ablation import allocation_grid, drop_sweep, mask_grid, mask_sweep, masking_gap
from stepslab.harness.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from stepslab.harness.model import Network
from stepslab.harness.optim import AdamW, cosine_lr
from stepslab.harness.tasks import (COPY_HALF, copyseq_sequences, corpus_text, decode, encode, make_task,
                                    unigram_perplexity)
from stepslab.harness.train import (OptimizerConfig, RunRecord, TrainConfig, evaluate, evaluate_network,
                                    load_network, train)
from stepslab.presets import get_preset
from stepslab.steps import StepsConfig
from stepslab.tensor import Tensor

SPIRAL_STEPS = get_preset("toy-spiral-steps3").config


def spiral_cfg(**kw):
    base = dict(task="spiral2", model=SPIRAL_STEPS, steps=20, batch_size=64, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- tasks

def test_spiral_is_balanced_and_split():
    t = make_task("spiral2", 0)
    y = np.concatenate([t.train_y, t.eval_y])
    assert np.bincount(y).tolist() == [500, 500]
    assert t.train_x.shape == (900, 2) and t.eval_x.shape == (100, 2)


def test_tasks_are_deterministic():
    a, b = make_task("spiral2", 7), make_task("spiral2", 7)
    assert a.train_x.tobytes() == b.train_x.tobytes()
    assert make_task("spiral2", 8).train_x.tobytes() != a.train_x.tobytes()


def test_charlm_round_trip():
    text = corpus_text()
    assert 50_000 < len(text) < 200_000
    ids = encode(text)
    assert ids.max() < 128 and decode(ids) == text
    t = make_task("charlm", 0)
    assert t.seq_len == 64 and t.eval_x.shape[1] == 64
    np.testing.assert_array_equal(t.eval_x[:, 1:], t.eval_y[:, :-1])


def test_copyseq_targets_by_construction():
    x, y, w = copyseq_sequences(np.random.default_rng(0), 100)
    for xi, yi, wi in zip(x, y, w):
        full = np.concatenate([xi, yi[-1:]])
        a = full[:COPY_HALF]
        assert full[COPY_HALF] == 0 and np.all(a > 0)
        np.testing.assert_array_equal(full[COPY_HALF + 1:], a)
        np.testing.assert_array_equal(yi, full[1:])
        np.testing.assert_array_equal(yi[wi == 1], a)


def test_unknown_task():
    with pytest.raises(ConfigError):
        make_task("imagenet")


# ---------------------------------------------------------------- training

def test_lr_zero_keeps_loss_constant():
    cfg = spiral_cfg(optimizer=OptimizerConfig(lr=0.0), overfit_single_batch=True, steps=10)
    record, _ = train(cfg)
    assert len(set(record.losses.tolist())) == 1


@pytest.mark.slow
def test_single_batch_overfit():
    cfg = spiral_cfg(optimizer=OptimizerConfig(lr=3e-3, weight_decay=0.0), overfit_single_batch=True,
                     batch_size=32, steps=2000, log_every=50)
    record, _ = train(cfg)
    assert record.losses[-1] < 1e-2


def test_record_steps_increase_and_are_finite():
    record, _ = train(spiral_cfg(log_every=3, eval_every=10))
    steps = [s for s, _, _ in record.samples]
    assert steps == sorted(set(steps)) and steps[0] == 1 and steps[-1] == 20
    assert np.isfinite(record.losses).all()
    assert [m is not None for s, _, m in record.samples if s in (10, 20)] == [True, True]


def test_divergence_names_the_step():
    cfg = spiral_cfg(model=get_preset("toy-spiral-residual").config,
                     optimizer=OptimizerConfig(lr=1e30, warmup_frac=0.0), steps=50)
    with pytest.raises(TrainingDivergence, match=r"step \d+") as info:
        train(cfg)
    assert info.value.step >= 1


def test_run_csv_format(tmp_path):
    record = RunRecord([(1, 0.5, None), (2, 0.25, 0.75)])
    text = record.to_csv(tmp_path / "run.csv")
    assert text == "step,train_loss,eval_metric\n1,0.5,\n2,0.25,0.75\n"


def test_train_config_validation():
    with pytest.raises(ConfigError, match="task"):
        spiral_cfg(task="mnist")
    with pytest.raises(ConfigError, match="lr"):
        OptimizerConfig(lr=-1.0)
    with pytest.raises(ConfigError, match="unknown config keys"):
        TrainConfig.from_dict({"task": "spiral2", "model": SPIRAL_STEPS.to_dict(), "epochs": 3})


# ---------------------------------------------------------------- evaluation

def _zero_head(net):
    net.head.weight.data[...] = 0
    net.head.bias.data[...] = 0
    return net


def test_uniform_classifier_is_at_chance():
    task = make_task("spiral2", 0)
    net = _zero_head(Network(task.describe(), SPIRAL_STEPS, np.random.default_rng(0)))
    acc = evaluate_network(net, task)
    assert task.eval_x.shape[0] == 100
    assert abs(acc - 0.5) <= 0.05


def test_uniform_language_model_perplexity_is_vocab():
    task = make_task("charlm", 0)
    net = _zero_head(Network(task.describe(), get_preset("toy-charlm-steps2").config, np.random.default_rng(0)))
    assert evaluate_network(net, task) == pytest.approx(128.0, rel=1e-9)


def test_unigram_baseline_is_below_uniform():
    assert 5.0 < unigram_perplexity(make_task("charlm", 0)) < 128.0


def test_evaluate_reproduces_in_run_metric(tmp_path):
    record, _ = train(spiral_cfg(out_dir=str(tmp_path), steps=30))
    assert abs(evaluate(tmp_path / "model.ssnc", "spiral2") - record.last_eval()) <= 1e-6
    assert abs(evaluate(tmp_path, "spiral2") - record.final_metric) <= 1e-6


def test_evaluate_rejects_incompatible_task(tmp_path):
    train(spiral_cfg(out_dir=str(tmp_path), steps=2))
    with pytest.raises(CheckpointError):
        evaluate(tmp_path, "copyseq")


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_byte_layout(tmp_path):
    path = save_checkpoint(tmp_path / "c.ssnc", {"w": np.array([[1.0, 2.0]], np.float32)})
    raw = path.read_bytes()
    expected = (MAGIC + struct.pack("<HB", 1, 4) + struct.pack("<H", 1) + b"w" + struct.pack("<B", 2)
                + struct.pack("<2I", 1, 2) + np.array([1.0, 2.0], "<f4").tobytes())
    assert raw == expected


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    task = make_task("spiral2", 0)
    net = Network(task.describe(), SPIRAL_STEPS, np.random.default_rng(3))
    before = net.forward(task.eval_x).data
    save_checkpoint(tmp_path / "model.ssnc", net.state_dict(),
         {"task": task.describe(), "model": SPIRAL_STEPS.to_dict(), "dtype": "f32", "seed": 0})
    again = load_network(tmp_path)
    assert again.forward(task.eval_x).data.tobytes() == before.tobytes()
    state, _ = load_checkpoint(tmp_path / "model.ssnc")
    for k, v in net.state_dict().items():
        assert state[k].tobytes() == v.tobytes()


def test_checkpoint_f64(tmp_path):
    arr = np.random.default_rng(0).standard_normal((3, 4, 5))
    save_checkpoint(tmp_path / "d.ssnc", {"a": arr, "b": arr[0]})
    state, meta = load_checkpoint(tmp_path / "d.ssnc")
    assert meta is None and state["a"].tobytes() == arr.tobytes()


@pytest.mark.parametrize("mutate, match", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<H", 9) + b[6:], "version"),
    (lambda b: b[:6] + bytes([2]) + b[7:], "element width"),
    (lambda b: b[:-3], "truncated"),
])
def test_corrupt_checkpoints(tmp_path, mutate, match):
    path = save_checkpoint(tmp_path / "c.ssnc", {"w": np.ones((2, 3), np.float32)})
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(CheckpointError, match=match):
        load_checkpoint(path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.ssnc")


def test_shape_mismatch_on_load(tmp_path):
    task = make_task("spiral2", 0)
    net = Network(task.describe(), SPIRAL_STEPS, np.random.default_rng(0))
    state = net.state_dict()
    state["head.bias"] = np.zeros(3, np.float32)
    with pytest.raises(CheckpointError, match="head.bias"):
        net.load_state(state)


# ---------------------------------------------------------------- optimizer

def test_adamw_matches_hand_computation():
    p = Tensor(np.array([0.5]), requires_grad=True)
    opt = AdamW({"p": p}, lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01)
    grads = [0.2, -0.3]
    w, m, v = 0.5, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        p.grad = np.array([g])
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w * (1 - 0.1 * 0.01)
        w = w - 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert abs(p.data[0] - w) <= 1e-12


def test_adamw_skips_decay_for_unflagged():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW({"p": p}, lr=0.1, weight_decay=0.5, decay={"p": False})
    p.grad = np.array([0.0])
    opt.step()
    assert p.data[0] == 1.0


def test_cosine_schedule():
    total, warm, peak = 100, 10, 1e-3
    assert cosine_lr(0, total, peak, warm, start=1e-5) == 1e-5
    assert cosine_lr(warm, total, peak, warm) == peak
    assert cosine_lr(total, total, peak, warm, floor=1e-6) == pytest.approx(1e-6, abs=1e-18)
    lrs = [cosine_lr(s, total, peak, warm) for s in range(warm, total + 1)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert cosine_lr(5, total, peak, warm) == pytest.approx(peak / 2)


# ---------------------------------------------------------------- reproducibility

def test_identical_seeds_give_identical_runs(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    train(spiral_cfg(out_dir=str(a), steps=15))
    train(spiral_cfg(out_dir=str(b), steps=15))
    assert (a / "run.csv").read_bytes() == (b / "run.csv").read_bytes()
    assert (a / "model.ssnc").read_bytes() == (b / "model.ssnc").read_bytes()


def test_different_seeds_differ(tmp_path):
    ra, _ = train(spiral_cfg(steps=5, seed=1))
    rb, _ = train(spiral_cfg(steps=5, seed=2))
    assert ra.to_csv() != rb.to_csv()


# ---------------------------------------------------------------- ablations

@pytest.fixture(scope="module")
def spiral_net():
    task = make_task("spiral2", 0)
    record, net = train(spiral_cfg(steps=60, optimizer=OptimizerConfig(lr=3e-3)), task)
    return net, task, record


def test_mask_grid():
    assert mask_grid(16) == [0, 3, 6, 10, 13, 16]


def test_mask_zero_row_equals_unmasked(spiral_net):
    net, task, record = spiral_net
    report = mask_sweep(net, task)
    unmasked = evaluate_network(net, task)
    for path in ("slow", "fast"):
        assert report.column("metric", path=path, masked_channels=0) == [unmasked]
    assert unmasked == record.final_metric
    assert isinstance(masking_gap(report), float)
    assert report.to_csv().splitlines()[0] == "path,masked_channels,metric"


def test_drop_sweep_compute_matched_triple():
    cfg = StepsConfig.from_step_widths(width_schedule(32, 3), (12, 6, 6), "mlp")
    task = make_task("spiral2", 0)
    net = Network(task.describe(), cfg, np.random.default_rng(0))
    report = drop_sweep(net, task)
    assert report.column("dropped_blocks") == [0, 4, 2, 1]
    assert report.column("step") == [0, 1, 2, 3]
    flops = report.column("dropped_flops")[1:]
    assert max(flops) / min(flops) < 1.2  # 16 -> 24 rounding leaves 12.5% slack in step 2
    assert report.rows[0]["metric"] == evaluate_network(net, task)


def test_ablation_preconditions(tmp_path):
    with pytest.raises(PreconditionError):
        ablation_sweep("mask_table6")
    with pytest.raises(PreconditionError):
        ablation_sweep("drop_table7", checkpoint=tmp_path / "missing")
    with pytest.raises(ConfigError):
        ablation_sweep("shuffle")


def test_ablation_from_checkpoint_path(tmp_path):
    train(spiral_cfg(out_dir=str(tmp_path), steps=10))
    report = ablation_sweep("mask_table6", checkpoint=tmp_path)
    assert report.column("metric", path="slow", masked_channels=0) == [evaluate(tmp_path, "spiral2")]


def test_steps_table_from_deit_s():
    base = get_preset("deit-s").config
    report = ablation_sweep("steps_table4", base=base)
    assert report.column("steps") == [1, 2, 3, 4, 5]
    assert report.column("widths", steps=3) == ["192 272 384"]
    assert report.column("depths", steps=3) == ["12 6 6"]
    assert report.column("layers", steps=1) == [62]
    assert report.column("metric") == [None] * 5


def test_allocation_table():
    assert allocation_grid(12) == [0, 1, 3, 6, 9, 11]
    report = ablation_sweep("alloc_table5", base=get_preset("deit-s").config)
    assert report.column("depths") == ["0 0 12", "2 1 11", "6 3 9", "12 6 6", "18 9 3", "22 11 1"]
    flops = report.column("flops")
    assert max(flops) / min(flops) < 1.06


def test_steps_sweep_can_train():
    base = spiral_cfg(model=StepsConfig((16,), (4,), "mlp"), steps=3)
    report = ablation_sweep("steps_table4", base=base, train_runs=True, max_steps=2)
    assert report.column("steps") == [1, 2]
    assert all(0.0 <= m <= 1.0 for m in report.column("metric"))
