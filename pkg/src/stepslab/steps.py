"""Step-by-step (narrow-to-wide) macro-architecture and its ablations.

An n-step model splits its C input channels into consecutive slices
``x_1 .. x_n`` of widths ``d_1 .. d_n``.  Step 1 runs a residual stack of
width ``C_1 = d_1`` on ``x_1``; step i runs a stack of width
``C_i = d_1 + .. + d_i`` on ``[y_{i-1}, x_i]``.  The first slice (lowest
channel indices) is the slow path; later slices are the fast path.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .blocks import BLOCK_KINDS, ResidualStack, stack_forward
from .errors import ConfigError
from .tensor import DimensionError, PartitionError, Tensor


@dataclass(frozen=True)
class StepsConfig:
    """Macro-architecture description.

    ``slice_widths`` are the d_i; ``heads`` gives the head count of each
    step (transformer kind only).  A 1-step config describes a plain residual
    stack.
    """

    slice_widths: tuple[int, ...]
    depths: tuple[int, ...]
    kind: str = "transformer"
    heads: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "slice_widths", tuple(int(d) for d in self.slice_widths))
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        if self.kind not in BLOCK_KINDS:
            raise ConfigError(f"kind: unknown block kind {self.kind!r}")
        if not self.slice_widths:
            raise ConfigError("slice_widths: at least one step is required")
        if any(d < 1 for d in self.slice_widths):
            raise ConfigError(f"slice_widths: every slice must be >= 1, got {list(self.slice_widths)}")
        if len(self.depths) != self.n:
            raise ConfigError(f"depths: expected {self.n} entries, got {len(self.depths)}")
        if any(d < 0 for d in self.depths):
            raise ConfigError(f"depths: must be >= 0, got {list(self.depths)}")
        if self.kind == "transformer":
            if len(self.heads) != self.n:
                raise ConfigError(f"heads: expected {self.n} entries, got {len(self.heads)}")
            for c, h in zip(self.step_widths, self.heads):
                if h < 1 or c % h:
                    raise ConfigError(f"heads: step width {c} is not divisible by {h} heads")

    @classmethod
    def from_step_widths(cls, step_widths, depths, kind: str = "transformer", heads=()) -> "StepsConfig":
        widths = [int(c) for c in step_widths]
        if any(b <= a for a, b in zip(widths, widths[1:])):
            raise ConfigError(f"step_widths: must be strictly increasing, got {widths}")
        slices = [widths[0]] + [b - a for a, b in zip(widths, widths[1:])]
        return cls(tuple(slices), tuple(depths), kind, tuple(heads))

    @property
    def n(self) -> int:
        return len(self.slice_widths)

    @property
    def width(self) -> int:
        return sum(self.slice_widths)

    @property
    def step_widths(self) -> tuple[int, ...]:
        return tuple(int(c) for c in np.cumsum(self.slice_widths))

    @property
    def total_blocks(self) -> int:
        return sum(self.depths)

    def head_count(self, i: int) -> int:
        return self.heads[i] if self.kind == "transformer" else 0

    def to_dict(self, widths: str = "slice") -> dict:
        """Plain-dict form; ``widths="step"`` writes cumulative step widths instead of slices."""
        out = {"kind": self.kind}
        if widths == "step":
            out["step_widths"] = list(self.step_widths)
        else:
            out["slice_widths"] = list(self.slice_widths)
        out["depths"] = list(self.depths)
        if self.kind == "transformer":
            out["heads"] = list(self.heads)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "StepsConfig":
        known = {"kind", "slice_widths", "step_widths", "depths", "heads", "width"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        if ("slice_widths" in d) == ("step_widths" in d):
            raise ConfigError("model: give exactly one of slice_widths or step_widths")
        kind = d.get("kind", "transformer")
        heads = d.get("heads", ())
        if "depths" not in d:
            raise ConfigError("model.depths: missing")
        if "step_widths" in d:
            cfg = cls.from_step_widths(d["step_widths"], d["depths"], kind, heads)
        else:
            cfg = cls(tuple(d["slice_widths"]), tuple(d["depths"]), kind, tuple(heads))
        if "width" in d and int(d["width"]) != cfg.width:
            raise ConfigError(f"model.width: slice widths sum to {cfg.width} but width is {d['width']}")
        return cfg


@dataclass
class StepsModel:
    config: StepsConfig
    stacks: list[ResidualStack] = field(default_factory=list)

    def __post_init__(self):
        cfg = self.config
        if len(self.stacks) != cfg.n:
            raise ConfigError(f"model has {len(self.stacks)} sub-models, config has {cfg.n} steps")
        for i, (s, c, d) in enumerate(zip(self.stacks, cfg.step_widths, cfg.depths), start=1):
            if s.width != c or s.depth != d or s.kind != cfg.kind:
                raise ConfigError(f"step {i}: sub-model ({s.kind}, width {s.width}, depth {s.depth}) "
                                  f"!= config ({cfg.kind}, width {c}, depth {d})")

    @classmethod
    def init(cls, config: StepsConfig, rng: np.random.Generator, dtype=np.float32,
             zero_branch: bool = False) -> "StepsModel":
        stacks = [
            ResidualStack.init(config.kind, c, d, rng, heads=config.head_count(i),
                               dtype=dtype, zero_branch=zero_branch)
            for i, (c, d) in enumerate(zip(config.step_widths, config.depths))
        ]
        return cls(config, stacks)

    @property
    def width(self) -> int:
        return self.config.width

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for i, stack in enumerate(self.stacks, start=1):
            out.update(stack.parameters(f"{prefix}step{i}."))
        return out


@dataclass
class StepTrace:
    """Stream entering one step and the activations after each of its blocks."""

    step_index: int
    width: int
    inputs: Tensor
    activations: list[Tensor]


def steps_forward(x: Tensor, model: StepsModel, trace: bool = False,
                  mask: np.ndarray | None = None):
    """Run ``y_1 = F_1(x_1)``, ``y_i = F_i([y_{i-1}, x_i])`` and return ``y_n``.

    Returns:
        ``(y_n, traces)``; ``traces`` is a list of :class:`StepTrace` when
        ``trace`` is set, else ``None``.
    """
    cfg = model.config
    if x.shape[-1] != cfg.width:
        raise DimensionError(f"input width {x.shape[-1]} does not match model width {cfg.width}")
    slices = T.split_last(x, cfg.slice_widths) if cfg.n > 1 else [x]
    traces = [] if trace else None
    y = None
    for i, (stack, part) in enumerate(zip(model.stacks, slices), start=1):
        stream = part if y is None else T.concat_last([y, part])
        y, acts = stack_forward(stream, stack, trace=trace, mask=mask)
        if trace:
            traces.append(StepTrace(i, stack.width, stream, acts))
    return y, traces


def drop_step_blocks(model: StepsModel, step: int, count: int) -> StepsModel:
    """Return a model whose step ``step`` (1-based) lacks its last ``count`` blocks.

    Remaining blocks are shared with ``model``, not copied.
    """
    cfg = model.config
    if not 1 <= step <= cfg.n:
        raise IndexError(f"step must be in 1..{cfg.n}, got {step}")
    depth = cfg.depths[step - 1]
    if not 0 <= count <= depth:
        raise IndexError(f"cannot drop {count} blocks from step {step} of depth {depth}")
    if count == 0:
        return model
    depths = list(cfg.depths)
    depths[step - 1] = depth - count
    stacks = list(model.stacks)
    old = stacks[step - 1]
    stacks[step - 1] = ResidualStack(old.width, old.kind, old.blocks[: depth - count])
    return StepsModel(replace(cfg, depths=tuple(depths)), stacks)


def mask_path(x: Tensor, path: str, k: int) -> Tensor:
    """Zero the first ``k`` channels (``slow``) or the last ``k`` (``fast``)."""
    c = x.shape[-1]
    if not 0 <= k <= c:
        raise IndexError(f"cannot mask {k} of {c} channels")
    if path not in ("slow", "fast"):
        raise ValueError(f"path must be 'slow' or 'fast', got {path!r}")
    if k == 0:
        return x
    keep = np.ones(x.shape, dtype=x.dtype)
    if path == "slow":
        keep[..., :k] = 0
    else:
        keep[..., c - k:] = 0
    return T.mul(x, Tensor(keep))


# --------------------------------------------------------------------------
# wide-to-narrow reverse design


@dataclass(frozen=True)
class ReverseConfig:
    """Wide-to-narrow stacking: strictly decreasing widths, first equals C."""

    widths: tuple[int, ...]
    depths: tuple[int, ...]
    kind: str = "transformer"
    heads: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        if len(self.depths) != len(self.widths) or not self.widths:
            raise ConfigError("depths: one depth per width is required")
        if any(b >= a for a, b in zip(self.widths, self.widths[1:])) or self.widths[-1] < 1:
            raise ConfigError(f"widths: must be strictly decreasing and positive, got {list(self.widths)}")
        if self.kind not in BLOCK_KINDS:
            raise ConfigError(f"kind: unknown block kind {self.kind!r}")
        if self.kind == "transformer" and len(self.heads) != len(self.widths):
            raise ConfigError("heads: one head count per width is required")

    @classmethod
    def mirror_of(cls, cfg: StepsConfig) -> "ReverseConfig":
        return cls(cfg.step_widths[::-1], cfg.depths[::-1], cfg.kind, cfg.heads[::-1])

    @property
    def n(self) -> int:
        return len(self.widths)

    @property
    def width(self) -> int:
        return self.widths[0]

    @property
    def peel_widths(self) -> tuple[int, ...]:
        """Widths of y_1 .. y_n."""
        return tuple(a - b for a, b in zip(self.widths, self.widths[1:])) + (self.widths[-1],)


@dataclass
class ReverseModel:
    config: ReverseConfig
    stacks: list[ResidualStack]

    @classmethod
    def init(cls, config: ReverseConfig, rng, dtype=np.float32, zero_branch: bool = False):
        stacks = [
            ResidualStack.init(config.kind, w, d, rng,
                               heads=config.heads[i] if config.kind == "transformer" else 0,
                               dtype=dtype, zero_branch=zero_branch)
            for i, (w, d) in enumerate(zip(config.widths, config.depths))
        ]
        return cls(config, stacks)

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for i, stack in enumerate(self.stacks, start=1):
            out.update(stack.parameters(f"{prefix}step{i}."))
        return out


def reverse_forward(x: Tensor, model: ReverseModel, mask: np.ndarray | None = None) -> Tensor:
    """``x_{i+1}, y_i = Split(F_i(x_i))`` for i < n, ``y_n = F_n(x_n)``; returns ``[y_1..y_n]``."""
    cfg = model.config
    if x.shape[-1] != cfg.width:
        raise PartitionError(f"input width {x.shape[-1]} does not match first width {cfg.width}")
    outputs = []
    current = x
    for i, stack in enumerate(model.stacks):
        if current.shape[-1] != stack.width:
            raise PartitionError(f"step {i + 1} expects width {stack.width}, stream has {current.shape[-1]}")
        f, _ = stack_forward(current, stack, mask=mask)
        if i + 1 < cfg.n:
            current, peeled = T.split_last(f, [cfg.widths[i + 1], cfg.peel_widths[i]])
            outputs.append(peeled)
        else:
            outputs.append(f)
    return T.concat_last(outputs)
