"""Finite-difference gradient checks for the autodiff engine.

Errors are reported per input tensor as
``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-8)``,
with central differences ``(f(x+h) - f(x-h)) / 2h`` at ``h = 1e-4`` in f64.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import MLPBlock, TransformerBlock, causal_attention_mask
from .tensor import Tensor

STEP = 1e-4
TOLERANCE = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def numeric_grad(fn, inputs: list[Tensor], index: int, step: float = STEP) -> np.ndarray:
    x = inputs[index]
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with T.no_grad():
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = float(fn(*inputs).data)
            flat[k] = orig - step
            down = float(fn(*inputs).data)
            flat[k] = orig
            gflat[k] = (up - down) / (2 * step)
    return grad


def gradcheck(fn, inputs: list[Tensor], step: float = STEP) -> list[float]:
    """Relative error of every input's gradient of the scalar ``fn(*inputs)``."""
    for x in inputs:
        x.grad = None
        x.requires_grad = True
    out = fn(*inputs)
    out.backward()
    errors = []
    for i, x in enumerate(inputs):
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        errors.append(relative_error(analytic, numeric_grad(fn, inputs, i, step)))
    return errors


def _weighted(out: Tensor, rng) -> Tensor:
    """Reduce to a scalar through random weights so every output element matters."""
    w = Tensor(rng.uniform(-1, 1, out.shape))
    return T.sum(T.mul(out, w))


def _cases(rng: np.random.Generator) -> dict:
    u = lambda *s: Tensor(rng.uniform(-2, 2, s))  # noqa: E731
    away = lambda *s: Tensor(np.sign(rng.uniform(-1, 1, s)) * rng.uniform(0.05, 2, s))  # noqa: E731
    mask = causal_attention_mask(4)
    ids = rng.integers(0, 6, (2, 3))
    targets = rng.integers(0, 5, (2, 3))
    wts = rng.uniform(0, 1, (2, 3))
    return {
        "add": (lambda a, b: _weighted(T.add(a, b), rng_fixed(1)), [u(3, 4), u(3, 4)]),
        "add_scalar": (lambda a, b: _weighted(T.add(a, b), rng_fixed(2)), [u(3, 4), u()]),
        "sub": (lambda a, b: _weighted(T.sub(a, b), rng_fixed(3)), [u(3, 4), u(3, 4)]),
        "mul": (lambda a, b: _weighted(T.mul(a, b), rng_fixed(4)), [u(3, 4), u(3, 4)]),
        "scale": (lambda a: _weighted(T.scale(a, 0.7), rng_fixed(5)), [u(3, 4)]),
        "neg": (lambda a: _weighted(T.neg(a), rng_fixed(6)), [u(3, 4)]),
        "gelu": (lambda a: _weighted(T.gelu(a), rng_fixed(7)), [u(3, 5)]),
        "relu": (lambda a: _weighted(T.relu(a), rng_fixed(8)), [away(3, 5)]),
        "softmax": (lambda a: _weighted(T.softmax(a), rng_fixed(9)), [u(2, 3, 5)]),
        "softmax_masked": (lambda a: _weighted(T.softmax(a, mask), rng_fixed(10)), [u(2, 4, 4)]),
        "matmul": (lambda a, b: _weighted(T.matmul(a, b), rng_fixed(11)), [u(2, 3, 4), u(2, 4, 5)]),
        "matmul_shared": (lambda a, b: _weighted(T.matmul(a, b), rng_fixed(12)), [u(2, 3, 4), u(4, 5)]),
        "add_bias": (lambda a, b: _weighted(T.add_bias(a, b), rng_fixed(13)), [u(2, 3, 4), u(4)]),
        "linear": (lambda a, w, b: _weighted(T.linear(a, w, b), rng_fixed(14)), [u(2, 3, 4), u(4, 5), u(5)]),
        "layer_norm": (lambda a, g, b: _weighted(T.layer_norm(a, g, b, 1e-6), rng_fixed(15)),
                       [u(2, 3, 6), u(6), u(6)]),
        "split_last": (lambda a: _weighted(T.concat_last(T.split_last(a, [2, 3, 1])[::-1]), rng_fixed(16)),
                       [u(2, 6)]),
        "concat_last": (lambda a, b: _weighted(T.concat_last([a, b]), rng_fixed(17)), [u(2, 3, 2), u(2, 3, 4)]),
        "reshape": (lambda a: _weighted(T.reshape(a, (4, 3)), rng_fixed(18)), [u(2, 6)]),
        "transpose": (lambda a: _weighted(T.transpose(a, (2, 0, 1)), rng_fixed(19)), [u(2, 3, 4)]),
        "sum": (lambda a: T.sum(a), [u(3, 4)]),
        "mean": (lambda a: T.mean(a), [u(3, 4)]),
        "embedding": (lambda t: _weighted(T.embedding(t, ids), rng_fixed(20)), [u(6, 4)]),
        "cross_entropy": (lambda z: T.cross_entropy(z, targets), [u(2, 3, 5)]),
        "cross_entropy_weighted": (lambda z: T.cross_entropy(z, targets, wts), [u(2, 3, 5)]),
    }


def rng_fixed(seed: int) -> np.random.Generator:
    return np.random.default_rng(1000 + seed)


def _block_case(block, x: Tensor, mask=None):
    params = block.parameters()
    names = list(params)
    tensors = [x] + [params[n] for n in names]

    def fn(*args):
        return _weighted(block.forward(args[0], mask), rng_fixed(99))

    return fn, tensors, ["input"] + names


@dataclass
class GradcheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0
    tolerance: float = TOLERANCE

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.errors.items() if not v < self.tolerance}

    def to_table(self) -> str:
        w = max(len(k) for k in self.errors)
        lines = [f"{k:<{w}}  {v:.3e}  {'ok' if v < self.tolerance else 'FAIL'}" for k, v in self.errors.items()]
        return "\n".join(lines)


def run_suite(seed: int = 0, step: float = STEP) -> GradcheckReport:
    """Check every differentiable op and a full transformer (and MLP) block in f64."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    report = GradcheckReport()
    for name, (fn, inputs) in _cases(rng).items():
        report.errors[name] = max(gradcheck(fn, inputs, step))
    # Blocks: weights are drawn from U(-0.5, 0.5) so the branches are not
    # negligible next to the shortcut.
    blk = TransformerBlock.init(8, 2, rng, np.float64)
    mlp = MLPBlock.init(6, rng=rng, dtype=np.float64)
    for block in (blk, mlp):
        for p in block.parameters().values():
            p.data[...] = rng.uniform(-0.5, 0.5, p.shape)
    cases = [("transformer_block", blk, Tensor(rng.uniform(-2, 2, (2, 4, 8))), None),
             ("transformer_block_causal", blk, Tensor(rng.uniform(-2, 2, (1, 4, 8))), causal_attention_mask(4)),
             ("mlp_block", mlp, Tensor(rng.uniform(-2, 2, (2, 3, 6))), None)]
    for label, block, x, mask in cases:
        fn, tensors, names = _block_case(block, x, mask)
        for n, e in zip(names, gradcheck(fn, tensors, step)):
            report.errors[f"{label}.{n}"] = e
    report.seconds = time.perf_counter() - start
    return report
