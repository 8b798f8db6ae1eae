"""Ablation sweeps over a trained network or a base architecture.

* ``mask_table6``: zero the first (slow) or last (fast) k input channels of
  the body and re-evaluate without retraining.
* ``drop_table7``: remove the last ``2**(n-i)`` blocks of step i (equal
  compute per row) and re-evaluate without retraining.
* ``steps_table4``: cost (and optionally train) 1..5-step variants of a
  base width/depth.
* ``alloc_table5``: cost (and optionally train) 3-step depth allocations
  ``(2a, a, D - a)``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..costing import allocate_depths, head_counts, model_cost, width_schedule
from ..errors import ConfigError, PreconditionError
from ..steps import StepsConfig, drop_step_blocks
from .model import Network
from .tasks import Task, make_task
from .train import TrainConfig, evaluate_network, load_network, train

KINDS = ("mask_table6", "drop_table7", "steps_table4", "alloc_table5")


@dataclass
class AblationReport:
    kind: str
    columns: list[str]
    rows: list[dict] = field(default_factory=list)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.columns, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: ("" if row.get(k) is None else row[k]) for k in self.columns})
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def column(self, name: str, **where) -> list:
        return [r[name] for r in self.rows if all(r.get(k) == v for k, v in where.items())]


def mask_grid(d1: int, points: int = 5) -> list[int]:
    """Channel counts 0..d1 in ``points`` equal increments."""
    return sorted({int(round(d1 * j / points)) for j in range(points + 1)})


def mask_sweep(net: Network, task: Task, counts=None) -> AblationReport:
    cfg = net.config
    counts = mask_grid(cfg.slice_widths[0]) if counts is None else list(counts)
    report = AblationReport("mask_table6", ["path", "masked_channels", "metric"])
    base = evaluate_network(net, task)
    for path in ("slow", "fast"):
        for k in counts:
            metric = base if k == 0 else evaluate_network(net, task, mask=(path, k))
            report.rows.append({"path": path, "masked_channels": k, "metric": metric})
    return report


def drop_sweep(net: Network, task: Task, n_tokens: int | None = None) -> AblationReport:
    cfg = net.config
    n_tokens = n_tokens or net.task_spec.get("seq_len", 1)
    report = AblationReport("drop_table7", ["step", "dropped_blocks", "dropped_flops", "metric"])
    report.rows.append({"step": 0, "dropped_blocks": 0, "dropped_flops": 0, "metric": evaluate_network(net, task)})
    for i in range(1, cfg.n + 1):
        count = 2 ** (cfg.n - i)
        if count > cfg.depths[i - 1]:
            continue
        body = drop_step_blocks(net.body, i, count)
        before = model_cost(cfg, n_tokens).flops_total
        after = model_cost(body.config, n_tokens).flops_total
        report.rows.append({"step": i, "dropped_blocks": count, "dropped_flops": before - after,
                            "metric": evaluate_network(net.with_body(body), task)})
    return report


def _cost_row(cfg: StepsConfig, n_tokens: int, extra_layers: int) -> dict:
    rep = model_cost(cfg, n_tokens, extra_layers=extra_layers)
    return {"blocks": rep.blocks_total, "layers": rep.layers_total,
            "params": rep.params_total, "flops": rep.flops_total}


def _heads_for(widths, head_dim: int | None, kind: str):
    return head_counts(widths, head_dim or 16) if kind == "transformer" else ()


def steps_sweep(base: TrainConfig | StepsConfig, n_tokens: int, max_steps: int = 5, train_runs: bool = False,
                head_dim: int | None = None, extra_layers: int = 2) -> AblationReport:
    cfg = base.model if isinstance(base, TrainConfig) else base
    if cfg.n != 1:
        raise ConfigError("steps_table4 needs a 1-step base model")
    width, depth = cfg.width, cfg.depths[0]
    report = AblationReport("steps_table4", ["steps", "depths", "widths", "blocks", "layers", "params",
                                             "flops", "metric"])
    for n in range(1, max_steps + 1):
        try:
            widths = width_schedule(width, n)
            depths = allocate_depths(depth, n)
        except ConfigError:
            break
        heads = cfg.heads if n == 1 else _heads_for(widths, head_dim, cfg.kind)
        variant = StepsConfig.from_step_widths(widths, depths, cfg.kind, heads)
        row = {"steps": n, "depths": " ".join(map(str, depths)), "widths": " ".join(map(str, widths)),
               **_cost_row(variant, n_tokens, extra_layers), "metric": None}
        if train_runs and isinstance(base, TrainConfig):
            record, _ = train(replace(base, model=variant, out_dir=None))
            row["metric"] = record.final_metric
        report.rows.append(row)
    return report


def allocation_grid(depth: int) -> list[int]:
    if depth == 12:
        return [0, 1, 3, 6, 9, 11]
    return sorted({int(round(depth * a / 12)) for a in (0, 1, 3, 6, 9, 11)} - {depth})


def alloc_sweep(base: TrainConfig | StepsConfig, n_tokens: int, train_runs: bool = False,
                head_dim: int | None = None, extra_layers: int = 2) -> AblationReport:
    cfg = base.model if isinstance(base, TrainConfig) else base
    if cfg.n == 1:
        width, depth = cfg.width, cfg.depths[0]
        widths = width_schedule(width, 3)
        heads = _heads_for(widths, head_dim, cfg.kind)
    elif cfg.n == 3:
        widths, heads = cfg.step_widths, cfg.heads
        depth = cfg.depths[1] + cfg.depths[2]
    else:
        raise ConfigError("alloc_table5 needs a 1-step or 3-step base model")
    report = AblationReport("alloc_table5", ["depths", "blocks", "layers", "params", "flops", "metric"])
    for a in allocation_grid(depth):
        depths = (2 * a, a, depth - a)
        variant = StepsConfig.from_step_widths(widths, depths, cfg.kind, heads)
        row = {"depths": " ".join(map(str, depths)), **_cost_row(variant, n_tokens, extra_layers), "metric": None}
        if train_runs and isinstance(base, TrainConfig):
            record, _ = train(replace(base, model=variant, out_dir=None))
            row["metric"] = record.final_metric
        report.rows.append(row)
    return report


def ablation_sweep(kind: str, base=None, checkpoint=None, task: Task | str | None = None,
                   seed: int | None = None, train_runs: bool = False, n_tokens: int | None = None,
                   **kwargs) -> AblationReport:
    """Run one ablation grid.

    ``mask_table6`` and ``drop_table7`` evaluate an already trained network
    (``checkpoint``: a :class:`Network`, a ``model.ssnc`` path or its
    directory).  ``steps_table4`` and ``alloc_table5`` start from ``base``, a
    :class:`TrainConfig` (trainable) or a :class:`StepsConfig` (cost only).
    """
    if kind not in KINDS:
        raise ConfigError(f"ablation kind must be one of {list(KINDS)}, got {kind!r}")
    if kind in ("mask_table6", "drop_table7"):
        if checkpoint is None:
            raise PreconditionError(f"{kind} evaluates a trained network: a checkpoint is required")
        if isinstance(checkpoint, Network):
            net = checkpoint
        else:
            path = Path(checkpoint)
            if not (path.exists() and (path.is_file() or (path / "model.ssnc").exists())):
                raise PreconditionError(f"{kind}: no checkpoint at {path}")
            net = load_network(path)
        if task is None or isinstance(task, str):
            meta_seed = (getattr(net, "meta", None) or {}).get("seed", 0)
            name = task or net.task_spec["task"]
            task = make_task(name, meta_seed if seed is None else seed)
        return mask_sweep(net, task) if kind == "mask_table6" else drop_sweep(net, task)
    if base is None:
        raise PreconditionError(f"{kind} needs a base configuration")
    if n_tokens is None:
        n_tokens = 197
        if isinstance(base, TrainConfig):
            n_tokens = 1 if base.task == "spiral2" else make_task(base.task, base.seed).seq_len
    if kind == "steps_table4":
        return steps_sweep(base, n_tokens, train_runs=train_runs, **kwargs)
    return alloc_sweep(base, n_tokens, train_runs=train_runs, **kwargs)


def masking_gap(report: AblationReport) -> float:
    """Fast-path minus slow-path metric at the largest common mask count."""
    k = max(report.column("masked_channels", path="slow"))
    slow = report.column("metric", path="slow", masked_channels=k)[0]
    fast = report.column("metric", path="fast", masked_channels=k)[0]
    return float(np.subtract(fast, slow))
