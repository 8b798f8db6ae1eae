"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation records its inputs and a local gradient rule
on the output tensor.  :func:`backward` walks the recorded graph in reverse
topological order and accumulates gradients into the leaf tensors that were
created with ``requires_grad=True``.

Broadcasting is deliberately narrow: elementwise operations accept either two
tensors of identical shape or a tensor and a scalar.  Bias addition over the
trailing axis has its own operation (:func:`add_bias`).
"""

from __future__ import annotations

import builtins
import threading
from contextlib import contextmanager
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "DimensionError",
    "PartitionError",
    "NumericError",
    "ContractError",
    "tensor",
    "no_grad",
    "count_macs",
    "backward",
    "zero_grad",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "gelu",
    "relu",
    "softmax",
    "elementwise",
    "matmul",
    "add_bias",
    "linear",
    "layer_norm",
    "split_last",
    "concat_last",
    "reshape",
    "transpose",
    "sum",
    "mean",
    "embedding",
    "cross_entropy",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class PartitionError(ValueError):
    """A channel partition does not add up to the width it splits."""


class NumericError(ArithmeticError):
    """An operation produced NaN/Inf or hit a division degeneracy."""


class ContractError(ValueError):
    """An operation was called outside its documented preconditions."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _counters() -> list:
    counters = getattr(_state, "mac_counters", None)
    if counters is None:
        counters = _state.mac_counters = []
    return counters


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class MacCounter:
    """Running multiply-accumulate total for every :func:`matmul` call."""

    def __init__(self) -> None:
        self.total = 0
        self.calls = 0

    def add(self, macs: int) -> None:
        self.total += macs
        self.calls += 1


@contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Count multiply-accumulates performed by matrix products in the block.

    Only :func:`matmul` contributes; normalisation, softmax and elementwise
    work are not counted, which matches the analytic cost model.
    """
    counter = MacCounter()
    stack = _counters()
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.remove(counter)


class Tensor:
    """An n-dimensional real array that can take part in differentiation.

    Attributes:
        data: The values, a contiguous ``float32`` or ``float64`` array.
        grad: Accumulated gradient (leaf tensors only), or ``None``.
        requires_grad: Whether gradients should flow to this tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = np.float64
        arr = np.array(data, dtype=dtype, order="C")
        if arr.dtype not in (np.float32, np.float64):
            raise TypeError(f"unsupported element type {arr.dtype}")
        if 0 in arr.shape:
            raise DimensionError(f"extents must be positive, got {arr.shape}")
        _check_finite(arr, "tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: non-finite values in result")


def _result(data: np.ndarray, parents: tuple, rule, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data if data.flags.c_contiguous else np.array(data, order="C")
    out.grad = None
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = rule
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        if x.dtype != like.dtype:
            raise TypeError(f"element width mismatch: {x.dtype} vs {like.dtype}")
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        b = _as_tensor(b, a)
    elif isinstance(b, Tensor):
        a = _as_tensor(a, b)
    else:
        raise TypeError("at least one operand must be a Tensor")
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}")
    return a, b


def _fit(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # scalar operands receive the summed gradient
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum(), dtype=grad.dtype).reshape(shape)


# --------------------------------------------------------------------------
# graph traversal


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Gradients accumulate: calling this twice without :func:`zero_grad` adds
    the second result on top of the first.

    Raises:
        ContractError: if ``loss`` is not a 0-d tensor.
    """
    if not isinstance(loss, Tensor) or loss.ndim != 0:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward needs a scalar loss, got shape {shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def rule(g):
        return _fit(g, a.shape), _fit(g, b.shape)

    return _result(a.data + b.data, (a, b), rule, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def rule(g):
        return _fit(g, a.shape), _fit(-g, b.shape)

    return _result(a.data - b.data, (a, b), rule, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def rule(g):
        return _fit(g * b.data, a.shape), _fit(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), rule, "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a constant (non-differentiable) factor."""
    f = x.dtype.type(factor)

    def rule(g):
        return (g * f,)

    return _result(x.data * f, (x,), rule, "scale")


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))
    cdf = cdf.astype(x.dtype, copy=False)

    def rule(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf).astype(x.dtype, copy=False),)

    return _result(x.data * cdf, (x,), rule, "gelu")


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0

    def rule(g):
        return (g * positive,)

    return _result(np.where(positive, x.data, 0).astype(x.dtype), (x,), rule, "relu")


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    Args:
        x: Logits.
        mask: Optional boolean array broadcastable to ``x``; ``False`` entries
            are inadmissible and behave as if their logit were ``-inf``.
    """
    logits = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=-1).all():
            raise NumericError("softmax: a row has no admissible entry")
        logits = np.where(mask, logits, -np.inf)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (x,), rule, "softmax")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "gelu": gelu,
    "relu": relu,
    "softmax_lastaxis": softmax,
}


def elementwise(op: str, *operands, **kwargs) -> Tensor:
    """Dispatch one of the named elementwise operations."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*operands, **kwargs)


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be 2-D while ``a`` carries extra leading (batch) axes, or both may
    carry the same leading axes.
    """
    if a.dtype != b.dtype:
        raise TypeError(f"element width mismatch: {a.dtype} vs {b.dtype}")
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    counters = _counters()
    if counters:
        macs = int(np.prod(out.shape[:-2], dtype=np.int64)) * a.shape[-2] * a.shape[-1] * b.shape[-1]
        for c in counters:
            c.add(macs)

    def rule(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2 and a.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _result(out, (a, b), rule, "matmul")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a vector along the trailing axis."""
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise DimensionError(f"bias {bias.shape} does not match trailing extent of {x.shape}")

    def rule(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _result(x.data + bias.data, (x, bias), rule, "add_bias")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add_bias(y, bias)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis with population variance, then apply gain/bias.

    Raises:
        NumericError: when a row has zero variance and ``eps`` is 0.
    """
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"layer_norm affine {gain.shape}/{bias.shape} vs width {c}")
    if eps < 0:
        raise ContractError("eps must be non-negative")
    centred = x.data - x.data.mean(axis=-1, keepdims=True)
    var = (centred * centred).mean(axis=-1, keepdims=True)
    if eps == 0 and (var == 0).any():
        raise NumericError("layer_norm: zero variance with eps=0")
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = centred * inv

    def rule(g):
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, c)
        return dx, (flat_g * xhat.reshape(-1, c)).sum(axis=0), flat_g.sum(axis=0)

    return _result(xhat * gain.data + bias.data, (x, gain, bias), rule, "layer_norm")


# --------------------------------------------------------------------------
# shape manipulation


def split_last(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Split the trailing axis into consecutive slices of the given widths."""
    sizes = [int(s) for s in sizes]
    if any(s < 1 for s in sizes) or builtins.sum(sizes) != x.shape[-1]:
        raise PartitionError(f"slice widths {sizes} sum to {builtins.sum(sizes)}, width is {x.shape[-1]}")
    parts = []
    start = 0
    for size in sizes:
        lo, hi = start, start + size

        def rule(g, lo=lo, hi=hi):
            full = np.zeros_like(x.data)
            full[..., lo:hi] = g
            return (full,)

        parts.append(_result(x.data[..., lo:hi].copy(), (x,), rule, "split_last"))
        start = hi
    return parts


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the trailing axis; inverse of :func:`split_last`."""
    parts = list(parts)
    if not parts:
        raise DimensionError("concat_last needs at least one part")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise DimensionError(f"leading shapes differ: {parts[0].shape} vs {p.shape}")
        if p.dtype != parts[0].dtype:
            raise TypeError("element width mismatch in concat_last")
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])

    def rule(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    data = np.concatenate([p.data for p in parts], axis=-1)
    return _result(data, tuple(parts), rule, "concat_last")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def rule(g):
        return (g.reshape(x.shape),)

    try:
        data = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _result(data, (x,), rule, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def rule(g):
        return (np.transpose(g, inverse),)

    return _result(np.transpose(x.data, axes), (x,), rule, "transpose")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def rule(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), rule, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size

    def rule(g):
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return _result(np.asarray(x.data.mean(), dtype=x.dtype), (x,), rule, "mean")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` (vocab x C) for an integer id array."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"token id out of range for vocabulary {table.shape[0]}")

    def rule(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), rule, "embedding")


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits).

    Args:
        logits: (..., V) unnormalised scores.
        targets: integer array with the leading shape of ``logits``.
        weights: optional 0/1 (or real) per-position weights; the mean is
            taken over their sum instead of the position count.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"targets {targets.shape} vs logits {logits.shape}")
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    t = targets.reshape(-1)
    w = np.ones(t.shape, dtype=logits.dtype) if weights is None else np.asarray(weights, dtype=logits.dtype).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise ContractError("cross_entropy: weights sum to zero")
    shifted = flat - flat.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    nll = logz - shifted[np.arange(t.size), t]
    loss = (w * nll).sum() / total

    def rule(g):
        p = np.exp(shifted - logz[:, None])
        p[np.arange(t.size), t] -= 1.0
        return ((g * p * (w / total)[:, None]).reshape(logits.shape).astype(logits.dtype),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), rule, "cross_entropy")
