"""Config files for train/probe/ablate runs.

Grammar
-------
A config file is a YAML mapping (block style, ``key: value`` per line,
nesting by indentation, ``#`` comments, lists as ``[a, b]`` or ``- item``).
A JSON object is accepted too, since JSON is a YAML subset.  Top level::

    task: spiral2            # spiral2 | charlm | copyseq
    dtype: f32               # f32 | f64
    batch_size: 256
    steps: 2000
    seed: 0
    out_dir: null            # null means "not written"
    eval_every: 0
    log_every: 100
    overfit_single_batch: false
    zero_branch: false
    stop_metric_below: null
    optimizer:
      kind: adamw
      lr: 0.003
      betas: [0.9, 0.999]
      eps: 1.0e-08
      weight_decay: 0.0
      warmup_frac: 0.05
      min_lr: 0.0
    model:
      kind: mlp              # transformer | mlp
      slice_widths: [16, 8, 8]   # or step_widths: [16, 24, 32]
      width: 32              # optional; must equal sum(slice_widths)
      depths: [4, 2, 2]
      heads: [2, 2, 2]       # transformer only

A file holding only ``model:`` describes an architecture (no training).
Unknown keys anywhere are an error.  Overrides are ``dotted.key=value`` with
the value parsed as a YAML scalar/list (``optimizer.lr=0.001``,
``model.depths=[12,6,6]``).
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import yaml

from .errors import ConfigError
from .harness.train import TrainConfig
from .steps import StepsConfig


def parse_text(text: str, source: str = "<config>") -> dict:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark is not None else "unknown line"
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"{source}: parse error at {where}: {problem}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping, got {type(data).__name__}")
    return data


def apply_override(data: dict, override: str) -> None:
    if "=" not in override:
        raise ConfigError(f"override {override!r}: expected dotted.key=value")
    key, raw = override.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"override {override!r}: empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError:
        raise ConfigError(f"override {override!r}: cannot parse value {raw!r}") from None
    node = data
    for p in parts[:-1]:
        child = node.setdefault(p, {})
        if not isinstance(child, dict):
            raise ConfigError(f"override {override!r}: {p!r} is not a section")
        node = child
    node[parts[-1]] = value


def build_config(data: dict) -> TrainConfig | StepsConfig:
    """Validate a parsed mapping into a TrainConfig (or a StepsConfig for model-only files)."""
    try:
        if set(data) == {"model"}:
            if not isinstance(data["model"], dict):
                raise ConfigError("model: must be a mapping")
            return StepsConfig.from_dict(data["model"])
        if not isinstance(data.get("model"), dict):
            raise ConfigError("model: missing or not a mapping")
        if "optimizer" in data and not isinstance(data["optimizer"], dict):
            raise ConfigError("optimizer: must be a mapping")
        return TrainConfig.from_dict(data)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from None


def load_config(path, overrides=()) -> TrainConfig | StepsConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    data = parse_text(path.read_text(encoding="utf-8"), str(path))
    for ov in overrides:
        apply_override(data, ov)
    return build_config(data)


def config_dict(cfg: TrainConfig | StepsConfig, widths: str = "slice") -> dict:
    if isinstance(cfg, TrainConfig):
        out = cfg.to_dict()
        out["model"] = cfg.model.to_dict(widths)
        return out
    return {"model": cfg.to_dict(widths)}


def emit_config(cfg: TrainConfig | StepsConfig, path=None, widths: str = "slice") -> str:
    """YAML text of a config; ``widths="step"`` writes the model's cumulative step widths."""
    text = yaml.safe_dump(config_dict(cfg, widths), sort_keys=False, default_flow_style=None)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def config_hash(cfg: TrainConfig | StepsConfig) -> str:
    canon = json.dumps(config_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()
