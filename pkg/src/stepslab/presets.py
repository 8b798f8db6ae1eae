"""Bundled architecture presets.

The ImageNet presets transcribe published DeiT / Swin layouts and their
step-by-step counterparts (224px input, 16px patches for DeiT, 1000 classes).
Swin-family presets carry only their stage layout; their windowed attention
makes the dense-attention FLOP formula inapplicable, so they are costed for
blocks and layers only.  ``extra_layers`` counts linear layers outside the
blocks (DeiT: patch embedding + classifier; Swin: 5).

Toy presets are the desk-scale models used by the training harness and the
probe experiments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .costing import CostReport, HeadSpec, StemSpec, layout_cost, model_cost
from .errors import ConfigError
from .steps import StepsConfig

DEIT_TOKENS = 197
DEIT_STEM = StemSpec("patch", in_features=3 * 16 * 16, tokens=196, cls_token=True, pos_tokens=DEIT_TOKENS)
DEIT_HEAD = HeadSpec(classes=1000, rows=1)


@dataclass(frozen=True)
class Preset:
    name: str
    config: StepsConfig
    tokens: int
    stem: StemSpec
    head: HeadSpec
    extra_layers: int
    reference: dict = field(default_factory=dict)

    def cost(self) -> CostReport:
        return model_cost(self.config, self.tokens, self.stem, self.head, self.extra_layers, self.name)


@dataclass(frozen=True)
class LayoutPreset:
    """Staged layout; each stage is a tuple of (width, heads, depth)."""

    name: str
    stages: tuple
    extra_layers: int
    reference: dict = field(default_factory=dict)

    def cost(self) -> CostReport:
        return layout_cost(self.stages, self.extra_layers, name=self.name)


def _deit(name, widths, heads, depths, ref):
    cfg = StepsConfig.from_step_widths(widths, depths, "transformer", heads)
    return Preset(name, cfg, DEIT_TOKENS, DEIT_STEM, DEIT_HEAD, 2, ref)


PRESETS: dict[str, Preset | LayoutPreset] = {}


def _register(p):
    PRESETS[p.name] = p


_register(_deit("deit-t", [192], [3], [12], {"layers": 62, "params": 5.7e6, "flops": 1.3e9}))
_register(_deit("deit-s", [384], [6], [12], {"layers": 62, "params": 22.1e6, "flops": 4.6e9}))
_register(_deit("deit-b", [768], [12], [12], {"layers": 62, "params": 86.6e6, "flops": 17.6e9}))
_register(_deit("steps-deit-t", [96, 136, 192], [2, 2, 3], [12, 6, 6],
                {"layers": 122, "params": 5.7e6, "flops": 1.3e9}))
_register(_deit("steps-deit-s", [192, 272, 384], [3, 4, 6], [12, 6, 6],
                {"layers": 122, "params": 22.1e6, "flops": 4.7e9}))
_register(_deit("steps-deit-b-302", [96, 136, 192, 272, 384], [2, 2, 3, 4, 6], [12] * 5,
                {"layers": 302}))

_register(LayoutPreset("swin-t", (((96, 3, 2),), ((192, 6, 2),), ((384, 12, 6),), ((768, 24, 2),)),
                       5, {"layers": 65}))
_register(LayoutPreset("swin-s", (((96, 3, 2),), ((192, 6, 2),), ((384, 12, 18),), ((768, 24, 2),)),
                       5, {"layers": 125}))
_register(LayoutPreset("swin-b", (((128, 4, 2),), ((256, 8, 2),), ((512, 16, 18),), ((1024, 32, 2),)),
                       5, {"layers": 125}))
_register(LayoutPreset(
    "steps-swin-t",
    (((96, 3, 2),), ((192, 6, 2),),
     ((192, 6, 6), (272, 8, 3), (384, 12, 3)),
     ((192, 6, 4), (272, 8, 2), (384, 12, 2), (544, 16, 2), (768, 24, 0))),
    5, {"layers": 135}))
_register(LayoutPreset(
    "steps-swin-s",
    (((96, 3, 2),), ((192, 6, 2),),
     ((192, 6, 6), (272, 8, 3), (384, 12, 15)),
     ((192, 6, 4), (272, 8, 2), (384, 12, 2), (544, 16, 2), (768, 24, 0))),
    5, {"layers": 195}))
_register(LayoutPreset(
    "steps-swin-b",
    (((128, 4, 2),), ((256, 8, 2),),
     ((256, 8, 6), (360, 12, 3), (512, 16, 15)),
     ((256, 8, 4), (360, 12, 2), (512, 16, 2), (720, 24, 2), (1024, 32, 0))),
    5, {"layers": 195}))

# desk-scale models
SPIRAL_STEM = StemSpec("linear", in_features=2, tokens=1)
SPIRAL_HEAD = HeadSpec(classes=2, rows=1)
_register(Preset("toy-spiral-residual", StepsConfig((32,), (4,), "mlp"), 1, SPIRAL_STEM, SPIRAL_HEAD, 2))
_register(Preset("toy-spiral-steps3", StepsConfig.from_step_widths([16, 24, 32], [4, 2, 2], "mlp"),
                 1, SPIRAL_STEM, SPIRAL_HEAD, 2))
_register(Preset("toy-charlm-residual", StepsConfig((48,), (2,), "transformer", (3,)), 64,
                 StemSpec("embedding", in_features=128, pos_tokens=64), HeadSpec(classes=128, rows=64), 1))
_register(Preset("toy-charlm-steps2", StepsConfig.from_step_widths([32, 48], [2, 1], "transformer", [2, 3]),
                 64, StemSpec("embedding", in_features=128, pos_tokens=64), HeadSpec(classes=128, rows=64), 1))
_register(Preset("toy-probe-residual-96", StepsConfig((46,), (96,), "transformer", (2,)), 32,
                 StemSpec(), HeadSpec(final_norm=False), 0))
_register(Preset("toy-probe-steps-96", StepsConfig.from_step_widths([32, 48, 64], [48, 24, 24], "transformer",
                                                                    [2, 3, 4]),
                 32, StemSpec(), HeadSpec(final_norm=False), 0))


def get_preset(name: str) -> Preset | LayoutPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
