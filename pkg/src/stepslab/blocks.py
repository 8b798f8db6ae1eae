"""Residual building blocks and plain residual stacks.

Two block kinds share one interface (``forward``, ``residual``,
``parameters``):

* ``transformer``: pre-norm multi-head self-attention followed by a pre-norm
  4x MLP, each wrapped in its own shortcut.
* ``mlp``: a single pre-norm 4x MLP wrapped in a shortcut.

Linear weights are stored as (in, out) so a projection is ``x @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

BLOCK_KINDS = ("transformer", "mlp")
INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


class Linear:
    def __init__(self, weight: Tensor, bias: Tensor):
        if weight.ndim != 2 or bias.shape != (weight.shape[1],):
            raise DimensionError(f"linear weight {weight.shape} / bias {bias.shape}")
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, n_in: int, n_out: int, rng, dtype=np.float32, zero: bool = False) -> "Linear":
        w = np.zeros((n_in, n_out), dtype) if zero else trunc_normal(rng, (n_in, n_out), dtype=dtype)
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(n_out, dtype), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


class LayerNorm:
    def __init__(self, gain: Tensor, bias: Tensor, eps: float = 1e-6):
        self.gain = gain
        self.bias = bias
        self.eps = eps

    @classmethod
    def init(cls, width: int, dtype=np.float32) -> "LayerNorm":
        return cls(Tensor(np.ones(width, dtype), requires_grad=True),
                   Tensor(np.zeros(width, dtype), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)

    def parameters(self) -> dict[str, Tensor]:
        return {"gain": self.gain, "bias": self.bias}


def _collect(prefix: str, modules: dict) -> dict[str, Tensor]:
    out = {}
    for name, module in modules.items():
        for pname, p in module.parameters().items():
            out[f"{prefix}{name}.{pname}"] = p
    return out


def causal_attention_mask(n: int) -> np.ndarray:
    """Boolean (n, n) mask; row i may attend to columns 0..i."""
    if n < 1:
        raise ValueError("sequence length must be >= 1")
    return np.tril(np.ones((n, n), dtype=bool))


class TransformerBlock:
    """Pre-norm attention sub-block then pre-norm MLP sub-block."""

    kind = "transformer"

    def __init__(self, width: int, heads: int, ln1: LayerNorm, qkv: Linear, proj: Linear,
                 ln2: LayerNorm, fc1: Linear, fc2: Linear):
        if heads < 1 or width % heads:
            raise DimensionError(f"width {width} is not divisible by {heads} heads")
        self.width = width
        self.heads = heads
        self.ln1, self.qkv, self.proj = ln1, qkv, proj
        self.ln2, self.fc1, self.fc2 = ln2, fc1, fc2

    @classmethod
    def init(cls, width: int, heads: int, rng, dtype=np.float32, zero_branch: bool = False):
        return cls(
            width, heads,
            LayerNorm.init(width, dtype),
            Linear.init(width, 3 * width, rng, dtype),
            Linear.init(width, width, rng, dtype, zero=zero_branch),
            LayerNorm.init(width, dtype),
            Linear.init(width, 4 * width, rng, dtype),
            Linear.init(4 * width, width, rng, dtype, zero=zero_branch),
        )

    def attention(self, z: Tensor, mask: np.ndarray | None = None) -> Tensor:
        c, h = self.width, self.heads
        dh = c // h
        lead = z.shape[:-2]
        n = z.shape[-2]
        k = len(lead)
        q, key, v = T.split_last(self.qkv(self.ln1(z)), [c, c, c])
        heads_first = list(range(k)) + [k + 1, k, k + 2]
        q = T.transpose(T.reshape(q, lead + (n, h, dh)), heads_first)
        v = T.transpose(T.reshape(v, lead + (n, h, dh)), heads_first)
        key_t = T.transpose(T.reshape(key, lead + (n, h, dh)), list(range(k)) + [k + 1, k + 2, k])
        scores = T.scale(T.matmul(q, key_t), 1.0 / np.sqrt(dh))
        weights = T.softmax(scores, mask)
        mixed = T.transpose(T.matmul(weights, v), heads_first)
        return self.proj(T.reshape(mixed, lead + (n, c)))

    def mlp(self, z: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(self.ln2(z))))

    def forward(self, z: Tensor, mask: np.ndarray | None = None) -> Tensor:
        z = z + self.attention(z, mask)
        return z + self.mlp(z)

    def residual(self, z: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Total branch contribution ``forward(z) - z`` computed branch by branch."""
        a = self.attention(z, mask)
        return a + self.mlp(z + a)

    def output_layers(self) -> list[Linear]:
        return [self.proj, self.fc2]

    def parameters(self) -> dict[str, Tensor]:
        return _collect("", {"ln1": self.ln1, "qkv": self.qkv, "proj": self.proj,
                             "ln2": self.ln2, "fc1": self.fc1, "fc2": self.fc2})


class MLPBlock:
    """Pre-norm 4x MLP wrapped in a shortcut; acts on each token independently."""

    kind = "mlp"

    def __init__(self, width: int, ln: LayerNorm, fc1: Linear, fc2: Linear):
        self.width = width
        self.heads = 0
        self.ln, self.fc1, self.fc2 = ln, fc1, fc2

    @classmethod
    def init(cls, width: int, heads: int = 0, rng=None, dtype=np.float32, zero_branch: bool = False):
        return cls(width, LayerNorm.init(width, dtype),
                   Linear.init(width, 4 * width, rng, dtype),
                   Linear.init(4 * width, width, rng, dtype, zero=zero_branch))

    def mlp(self, z: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(self.ln(z))))

    def forward(self, z: Tensor, mask: np.ndarray | None = None) -> Tensor:
        return z + self.mlp(z)

    def residual(self, z: Tensor, mask: np.ndarray | None = None) -> Tensor:
        return self.mlp(z)

    def output_layers(self) -> list[Linear]:
        return [self.fc2]

    def parameters(self) -> dict[str, Tensor]:
        return _collect("", {"ln": self.ln, "fc1": self.fc1, "fc2": self.fc2})


def make_block(kind: str, width: int, heads: int, rng, dtype=np.float32, zero_branch: bool = False):
    if kind == "transformer":
        return TransformerBlock.init(width, heads, rng, dtype, zero_branch)
    if kind == "mlp":
        return MLPBlock.init(width, 0, rng, dtype, zero_branch)
    raise ValueError(f"unknown block kind {kind!r}")


def block_forward(z: Tensor, block, mask: np.ndarray | None = None) -> Tensor:
    if z.shape[-1] != block.width:
        raise DimensionError(f"input width {z.shape[-1]} does not match block width {block.width}")
    return block.forward(z, mask)


@dataclass
class ResidualStack:
    """D blocks of one width applied in sequence; D = 0 is the identity."""

    width: int
    kind: str
    blocks: list = field(default_factory=list)

    def __post_init__(self):
        for b in self.blocks:
            if b.width != self.width:
                raise DimensionError(f"block width {b.width} in stack of width {self.width}")

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @classmethod
    def init(cls, kind: str, width: int, depth: int, rng, heads: int = 0,
             dtype=np.float32, zero_branch: bool = False) -> "ResidualStack":
        blocks = [make_block(kind, width, heads, rng, dtype, zero_branch) for _ in range(depth)]
        return cls(width, kind, blocks)

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for i, b in enumerate(self.blocks):
            for name, p in b.parameters().items():
                out[f"{prefix}block{i}.{name}"] = p
        return out


def stack_forward(z0: Tensor, stack: ResidualStack, trace: bool = False,
                  mask: np.ndarray | None = None):
    """Apply every block in order.

    Returns:
        ``(z_D, activations)`` where ``activations`` is ``[z_1, ..., z_D]`` when
        ``trace`` is set and ``None`` otherwise.
    """
    if z0.shape[-1] != stack.width:
        raise DimensionError(f"input width {z0.shape[-1]} does not match stack width {stack.width}")
    z = z0
    acts = [] if trace else None
    for block in stack.blocks:
        z = block.forward(z, mask)
        if trace:
            acts.append(z)
    return z, acts
