"""Training loop, run records and evaluation."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..errors import CheckpointError, ConfigError, TrainingDivergence
from ..steps import StepsConfig
from ..tensor import NumericError
from .checkpoint import load_checkpoint, save_checkpoint
from .model import DTYPES, Network
from .optim import AdamW, cosine_lr
from .tasks import TASKS, Task, make_task

log = logging.getLogger(__name__)

RUN_CSV_HEADER = ("step", "train_loss", "eval_metric")


@dataclass
class OptimizerConfig:
    kind: str = "adamw"
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    min_lr: float = 0.0

    def __post_init__(self):
        # YAML 1.1 reads exponent literals without a dot ("1e-08") as strings
        try:
            for name in ("lr", "eps", "weight_decay", "warmup_frac", "min_lr"):
                setattr(self, name, float(getattr(self, name)))
            self.betas = tuple(float(b) for b in self.betas)
        except (TypeError, ValueError):
            raise ConfigError(f"optimizer: numeric field expected, got {self}") from None
        if self.kind != "adamw":
            raise ConfigError(f"optimizer.kind: only 'adamw' is supported, got {self.kind!r}")
        if self.lr < 0:
            raise ConfigError(f"optimizer.lr: must be >= 0, got {self.lr}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"optimizer.betas: need two values in [0, 1), got {list(self.betas)}")
        if not 0 <= self.warmup_frac < 1:
            raise ConfigError(f"optimizer.warmup_frac: must be in [0, 1), got {self.warmup_frac}")


@dataclass
class TrainConfig:
    task: str
    model: StepsConfig
    dtype: str = "f32"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 32
    steps: int = 1000
    seed: int = 0
    out_dir: str | None = None
    eval_every: int = 0  # 0: evaluate only at the end
    log_every: int = 1
    overfit_single_batch: bool = False
    zero_branch: bool = False
    stop_metric_below: float | None = None

    def __post_init__(self):
        if isinstance(self.stop_metric_below, str):
            try:
                self.stop_metric_below = float(self.stop_metric_below)
            except ValueError:
                raise ConfigError(f"stop_metric_below: number expected, got {self.stop_metric_below!r}") from None
        if self.task not in TASKS:
            raise ConfigError(f"task: unknown task {self.task!r}; choose from {list(TASKS)}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype: must be one of {sorted(DTYPES)}, got {self.dtype!r}")
        if self.steps < 1:
            raise ConfigError(f"steps: must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size: must be >= 1, got {self.batch_size}")
        if self.log_every < 1:
            raise ConfigError(f"log_every: must be >= 1, got {self.log_every}")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "model":
                value = value.to_dict()
            elif f.name == "optimizer":
                value = {g.name: (list(getattr(value, g.name)) if g.name == "betas" else getattr(value, g.name))
                         for g in fields(value)}
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "task" not in d or "model" not in d:
            raise ConfigError("config needs 'task' and 'model' sections")
        d["model"] = d["model"] if isinstance(d["model"], StepsConfig) else StepsConfig.from_dict(d["model"])
        opt = d.get("optimizer", {})
        if isinstance(opt, dict):
            opt_known = {f.name for f in fields(OptimizerConfig)}
            bad = set(opt) - opt_known
            if bad:
                raise ConfigError(f"unknown config keys: {sorted('optimizer.' + k for k in bad)}")
            d["optimizer"] = OptimizerConfig(**opt)
        return cls(**d)


@dataclass
class RunRecord:
    samples: list[tuple[int, float, float | None]] = field(default_factory=list)
    checkpoint: str | None = None
    wall_clock: float = 0.0
    final_metric: float | None = None

    @property
    def losses(self) -> np.ndarray:
        return np.array([s[1] for s in self.samples])

    def last_eval(self) -> float | None:
        for _, _, m in reversed(self.samples):
            if m is not None:
                return m
        return None

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(RUN_CSV_HEADER)
        for step, loss, metric in self.samples:
            writer.writerow([step, repr(loss), "" if metric is None else repr(metric)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def build_network(cfg: TrainConfig, task: Task) -> Network:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[0])
    return Network(task.describe(), cfg.model, rng, DTYPES[cfg.dtype], cfg.zero_branch)


def metric_name(task: Task) -> str:
    return "perplexity" if task.name == "charlm" else "accuracy"


def evaluate_network(net: Network, task: Task, mask=None, batch_size: int = 256) -> float:
    """Accuracy for classification/copy tasks, perplexity for charlm."""
    x, y, w = task.eval_x, task.eval_y, task.eval_w
    total_nll = 0.0
    total_w = 0.0
    correct = 0.0
    with T.no_grad():
        for lo in range(0, x.shape[0], batch_size):
            xb, yb = x[lo:lo + batch_size], y[lo:lo + batch_size]
            wb = np.ones(yb.shape) if w is None else w[lo:lo + batch_size]
            logits = net.forward(xb, mask).data.astype(np.float64)
            if task.name == "charlm":
                shifted = logits - logits.max(axis=-1, keepdims=True)
                logz = np.log(np.exp(shifted).sum(axis=-1))
                nll = logz - np.take_along_axis(shifted, yb[..., None], axis=-1)[..., 0]
                total_nll += float((nll * wb).sum())
            else:
                correct += float(((logits.argmax(axis=-1) == yb) * wb).sum())
            total_w += float(wb.sum())
    if task.name == "charlm":
        return math.exp(total_nll / total_w)
    return correct / total_w


def train(cfg: TrainConfig, task: Task | None = None) -> tuple[RunRecord, Network]:
    """Optimise a fresh network; write ``run.csv`` and ``model.ssnc`` if ``out_dir`` is set."""
    start = time.perf_counter()
    task = task or make_task(cfg.task, cfg.seed)
    net = build_network(cfg, task)
    params = net.parameters()
    opt_cfg = cfg.optimizer
    opt = AdamW(params, opt_cfg.lr, opt_cfg.betas, opt_cfg.eps, opt_cfg.weight_decay, net.decay_mask())
    data_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[1])
    warmup = int(round(opt_cfg.warmup_frac * cfg.steps))
    record = RunRecord()
    fixed = task.sample_batch(data_rng, cfg.batch_size) if cfg.overfit_single_batch else None
    for step in range(1, cfg.steps + 1):
        x, y, w = fixed if fixed is not None else task.sample_batch(data_rng, cfg.batch_size)
        opt.zero_grad()
        # the tensor ops reject non-finite values themselves; numpy's warnings would only duplicate that
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                loss = net.loss(x, y, w)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingDivergence(step, "non-finite loss")
                loss.backward()
                opt.step(cosine_lr(step, cfg.steps, opt_cfg.lr, warmup, 0.0, opt_cfg.min_lr))
        except NumericError as exc:
            raise TrainingDivergence(step, str(exc)) from exc
        do_eval = step == cfg.steps or (cfg.eval_every and step % cfg.eval_every == 0)
        metric = evaluate_network(net, task) if do_eval else None
        if metric is not None or step % cfg.log_every == 0 or step == 1:
            record.samples.append((step, value, metric))
        if metric is not None:
            log.info("step %d loss %.5f %s %.5f", step, value, metric_name(task), metric)
        if metric is not None and cfg.stop_metric_below is not None and metric < cfg.stop_metric_below:
            break
    record.final_metric = record.last_eval()
    if cfg.out_dir is not None:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        record.to_csv(out / "run.csv")
        meta = {"task": task.describe(), "model": cfg.model.to_dict(), "dtype": cfg.dtype, "seed": cfg.seed}
        record.checkpoint = str(save_checkpoint(out / "model.ssnc", net.state_dict(), meta))
    record.wall_clock = time.perf_counter() - start
    return record, net


def load_network(checkpoint) -> Network:
    """Rebuild a network from ``model.ssnc`` (or a directory containing it)."""
    path = Path(checkpoint)
    if path.is_dir():
        path = path / "model.ssnc"
    state, meta = load_checkpoint(path)
    if meta is None:
        raise CheckpointError(f"{path}: missing model description {path.with_suffix('.json')}")
    cfg = StepsConfig.from_dict(meta["model"])
    dtype = DTYPES[meta["dtype"]]
    net = Network(meta["task"], cfg, np.random.default_rng(0), dtype)
    net.load_state(state)
    net.meta = meta
    return net


def evaluate(checkpoint, task: Task | str, seed: int | None = None) -> float:
    """Metric of a saved network on a task's eval split.

    A task given by name is rebuilt with ``seed``, defaulting to the seed the
    checkpoint was trained with.
    """
    net = checkpoint if isinstance(checkpoint, Network) else load_network(checkpoint)
    if isinstance(task, str):
        if seed is None:
            seed = (getattr(net, "meta", None) or {}).get("seed", 0)
        task = make_task(task, seed)
    spec = task.describe()
    for key in ("kind", "in_features", "classes"):
        if net.task_spec.get(key) != spec[key]:
            raise CheckpointError(f"checkpoint {key}={net.task_spec.get(key)} incompatible with task "
                                  f"{task.name} ({key}={spec[key]})")
    return evaluate_network(net, task)


def with_overrides(cfg: TrainConfig, **changes) -> TrainConfig:
    return replace(cfg, **changes)
