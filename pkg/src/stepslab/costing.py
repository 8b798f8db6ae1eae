"""Analytic cost model: FLOPs, parameters, layer counts and width/depth schedules.

FLOPs are counted as multiply-accumulates (one MAC = one FLOP).  Under that
convention a transformer block of width C over N tokens costs
``12*N*C**2 + 2*N**2*C``: ``4NC^2`` for the QKV and output projections,
``2N^2C`` for the two attention products and ``8NC^2`` for the 4x MLP.
Only matrix products are counted; norms, softmax and activations are free.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

from .blocks import BLOCK_KINDS
from .errors import ConfigError

LAYERS_PER_BLOCK = {"transformer": 5, "mlp": 2}


def transformer_flops(n_tokens: int, width: int, depth: int) -> int:
    """Exact MAC count of ``depth`` transformer blocks: 12NC^2D + 2N^2CD."""
    n, c, d = int(n_tokens), int(width), int(depth)
    return 12 * n * c * c * d + 2 * n * n * c * d


def mlp_flops(n_tokens: int, width: int, depth: int) -> int:
    """MAC count of ``depth`` 4x MLP blocks: 8NC^2D."""
    return 8 * int(n_tokens) * int(width) ** 2 * int(depth)


def block_flops_breakdown(kind: str, n_tokens: int, width: int, depth: int) -> dict[str, int]:
    n, c, d = int(n_tokens), int(width), int(depth)
    if kind == "transformer":
        return {"qkv_out": 4 * n * c * c * d, "attention": 2 * n * n * c * d, "mlp": 8 * n * c * c * d}
    if kind == "mlp":
        return {"qkv_out": 0, "attention": 0, "mlp": 8 * n * c * c * d}
    raise ConfigError(f"kind: unknown block kind {kind!r}")


def block_params(kind: str, width: int) -> int:
    """Parameters of one block including its norms and biases."""
    c = int(width)
    if kind == "transformer":
        # qkv 3C^2+3C, out C^2+C, fc1 4C^2+4C, fc2 4C^2+C, two norms 4C
        return 12 * c * c + 13 * c
    if kind == "mlp":
        # fc1 4C^2+4C, fc2 4C^2+C, one norm 2C
        return 8 * c * c + 7 * c
    raise ConfigError(f"kind: unknown block kind {kind!r}")


@dataclass(frozen=True)
class StemSpec:
    """Input side of a network.

    kind:
        ``patch``/``linear``: a projection from ``in_features`` to C applied to
        ``tokens`` input rows; ``embedding``: a lookup table with
        ``in_features`` rows (no MACs); ``none``: nothing.
    """

    kind: str = "none"
    in_features: int = 0
    tokens: int = 0
    cls_token: bool = False
    pos_tokens: int = 0

    def flops(self, width: int) -> int:
        if self.kind in ("patch", "linear"):
            return self.tokens * self.in_features * width
        return 0

    def params(self, width: int) -> int:
        if self.kind in ("patch", "linear"):
            base = self.in_features * width + width
        elif self.kind == "embedding":
            base = self.in_features * width
        elif self.kind == "none":
            base = 0
        else:
            raise ConfigError(f"stem.kind: unknown stem kind {self.kind!r}")
        return base + (width if self.cls_token else 0) + self.pos_tokens * width


@dataclass(frozen=True)
class HeadSpec:
    """Final norm plus a linear classifier applied to ``rows`` token rows."""

    classes: int = 0
    rows: int = 1
    final_norm: bool = True

    def flops(self, width: int) -> int:
        return self.rows * width * self.classes

    def params(self, width: int) -> int:
        norm = 2 * width if self.final_norm else 0
        return norm + (width * self.classes + self.classes if self.classes else 0)


@dataclass
class CostReport:
    flops_total: int | None
    flops_breakdown: dict[str, int] | None
    params_total: int | None
    layers_total: int
    blocks_total: int
    extra_layers: int = 0
    name: str = ""
    steps: list[dict] = field(default_factory=list)
    scope: str = "full"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    def to_table(self) -> str:
        def fmt(v):
            return "n/a" if v is None else f"{v:,}"

        rows = [("name", self.name or "-"), ("scope", self.scope),
                ("blocks_total", fmt(self.blocks_total)), ("layers_total", fmt(self.layers_total)),
                ("params_total", fmt(self.params_total)), ("flops_total", fmt(self.flops_total))]
        for key, value in (self.flops_breakdown or {}).items():
            rows.append((f"flops_breakdown.{key}", fmt(value)))
        for i, s in enumerate(self.steps, start=1):
            rows.append((f"step{i}", f"width {s['width']} x depth {s['depth']}"))
        w = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{w}}  {v:>20}" for k, v in rows)


def _step_list(cfg) -> tuple[str, list[tuple[int, int]]]:
    """(kind, [(width, depth), ...]) for any supported architecture description."""
    kind = getattr(cfg, "kind", None)
    if kind not in BLOCK_KINDS:
        raise ConfigError(f"kind: unknown block kind {kind!r}")
    if hasattr(cfg, "step_widths"):
        return kind, list(zip(cfg.step_widths, cfg.depths))
    if hasattr(cfg, "widths"):
        return kind, list(zip(cfg.widths, cfg.depths))
    if hasattr(cfg, "blocks") and hasattr(cfg, "width"):
        return kind, [(cfg.width, len(cfg.blocks))]
    raise ConfigError(f"cannot cost object of type {type(cfg).__name__}")


def model_cost(cfg, n_tokens: int, stem: StemSpec | None = None, head: HeadSpec | None = None,
               extra_layers: int = 0, name: str = "") -> CostReport:
    """Cost of a steps/reverse/residual architecture plus optional stem and head.

    ``cfg`` may be a :class:`~stepslab.steps.StepsConfig`, a
    :class:`~stepslab.steps.ReverseConfig` or a
    :class:`~stepslab.blocks.ResidualStack`.  Stem and head are sized at the
    full model width (the widest step).
    """
    kind, steps = _step_list(cfg)
    stem = stem or StemSpec()
    head = head or HeadSpec(classes=0, final_norm=False)
    width = max(w for w, _ in steps)
    breakdown = {"qkv_out": 0, "attention": 0, "mlp": 0}
    step_rows = []
    params = 0
    for w, d in steps:
        part = block_flops_breakdown(kind, n_tokens, w, d)
        for k, v in part.items():
            breakdown[k] += v
        step_params = block_params(kind, w) * d
        params += step_params
        step_rows.append({"width": int(w), "depth": int(d), "flops": sum(part.values()), "params": step_params})
    breakdown["stem"] = stem.flops(width)
    breakdown["head"] = head.flops(width)
    params += stem.params(width) + head.params(width)
    blocks = sum(d for _, d in steps)
    return CostReport(
        flops_total=sum(breakdown.values()),
        flops_breakdown=breakdown,
        params_total=params,
        layers_total=LAYERS_PER_BLOCK[kind] * blocks + extra_layers,
        blocks_total=blocks,
        extra_layers=extra_layers,
        name=name,
        steps=step_rows,
    )


def layout_cost(stages, extra_layers: int, kind: str = "transformer", name: str = "") -> CostReport:
    """Block and layer counts for a staged layout whose FLOPs are out of scope.

    ``stages`` is a list of stages, each a list of ``(width, heads, depth)``.
    """
    blocks = sum(d for stage in stages for _, _, d in stage)
    steps = [{"width": w, "depth": d, "flops": None, "params": None} for stage in stages for w, _, d in stage]
    return CostReport(None, None, None, LAYERS_PER_BLOCK[kind] * blocks + extra_layers, blocks,
                      extra_layers, name, steps, scope="layers-only")


# --------------------------------------------------------------------------
# schedules


def round_to_multiple(x: float, base: int = 8) -> int:
    """Nearest multiple of ``base``; exact halves round up."""
    return int(math.floor(x / base + 0.5)) * base


def width_schedule(width: int, n_steps: int, base: int = 8) -> tuple[int, ...]:
    """Step widths growing by sqrt(2) per step and ending at ``width``.

    ``C_i = round(width * 2**(-(n-i)/2))`` to the nearest multiple of ``base``;
    the last width is ``width`` itself.
    """
    if n_steps < 1:
        raise ConfigError("steps: must be >= 1")
    if width < base * 2 ** ((n_steps - 1) / 2):
        raise ConfigError(f"width: {width} is too narrow for {n_steps} steps (every step must be >= {base})")
    widths = [round_to_multiple(width * 2 ** (-(n_steps - i) / 2), base) for i in range(1, n_steps)]
    widths.append(int(width))
    if any(b <= a for a, b in zip(widths, widths[1:])) or widths[0] < base:
        raise ConfigError(f"width: rounding {width} over {n_steps} steps gives non-increasing widths {widths}")
    return tuple(widths)


def head_counts(widths, head_dim: int = 64) -> tuple[int, ...]:
    """Largest head count <= width // head_dim that divides each width (at least 1)."""
    if head_dim < 1:
        raise ConfigError(f"head_dim: must be >= 1, got {head_dim}")
    out = []
    for w in widths:
        h = max(1, int(w) // head_dim)
        while w % h:
            h -= 1
        out.append(h)
    return tuple(out)


def allocate_depths(base_depth: int, n_steps: int) -> tuple[int, ...]:
    """Split a ``base_depth``-block stack into ``n_steps`` steps of equal compute.

    Working from the widest step down: half of the current blocks stay at the
    current width, the other half are each replaced by two blocks one width
    level (a factor sqrt(2)) narrower.  The narrowest step keeps what remains.
    With an odd count the larger half stays.
    """
    if n_steps < 1:
        raise ConfigError("steps: must be >= 1")
    if n_steps > 1 and base_depth < 2:
        raise ConfigError(f"depth: {base_depth} blocks cannot be split into {n_steps} steps")
    depths = []
    current = int(base_depth)
    for _ in range(n_steps - 1):
        moved = current // 2
        depths.append(current - moved)
        current = 2 * moved
    depths.append(current)
    return tuple(reversed(depths))


@dataclass(frozen=True)
class BudgetPoint:
    depth: int
    width: int | None
    flops: int

    @property
    def feasible(self) -> bool:
        return self.width is not None


def budget_frontier(budget: int, n_tokens: int, kind: str = "transformer",
                    depths=(12, 24, 48, 96), base: int = 8) -> list[BudgetPoint]:
    """Widest ``base``-multiple width per depth whose block cost fits the budget.

    Infeasible depths (not even one ``base``-wide stack fits) are returned with
    ``width=None``.
    """
    if budget <= 0:
        raise ConfigError("budget: must be positive")
    cost = transformer_flops if kind == "transformer" else mlp_flops
    if kind not in BLOCK_KINDS:
        raise ConfigError(f"kind: unknown block kind {kind!r}")
    points = []
    for d in depths:
        if cost(n_tokens, base, d) > budget:
            points.append(BudgetPoint(int(d), None, 0))
            continue
        lo, hi = 1, 2
        while cost(n_tokens, hi * base, d) <= budget:
            hi *= 2
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if cost(n_tokens, mid * base, d) <= budget:
                lo = mid
            else:
                hi = mid
        points.append(BudgetPoint(int(d), lo * base, cost(n_tokens, lo * base, d)))
    return points
