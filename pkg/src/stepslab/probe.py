"""Shortcut-ratio diagnostics.

For a residual stream ``z_l = z_0 + r_l`` the shortcut ratio is
``gamma_l = sigma_0 / sigma_l``.  Standard deviations are taken per token over
the channel axis (population statistics) and then averaged over all tokens in
the batch; this is the axis a pre-norm layer normalises over.

For a step-by-step model, a block in step i is compared against the input
channels that feed that step's stream (``x[..., :C_i]``), so ratios at
different widths stay comparable.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .blocks import ResidualStack, stack_forward
from .errors import DegenerateInputError
from .steps import StepsModel, steps_forward
from .tensor import DimensionError, Tensor

CSV_HEADER = ("block_index", "step_index", "width", "sigma0", "sigma_l", "gamma")
SIGMA_CONVENTION = "per-token std over channels (population), mean over tokens"


def token_sigma(x: np.ndarray, eps: float = 0.0) -> float:
    """Mean over tokens of the per-token channel standard deviation."""
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(x.var(axis=-1) + eps).mean())


@dataclass(frozen=True)
class GammaRecord:
    block_index: int
    step_index: int
    width: int
    sigma0: float
    sigma_l: float
    gamma: float


@dataclass
class GammaTrace:
    records: list[GammaRecord] = field(default_factory=list)
    convention: str = SIGMA_CONVENTION
    batch: str = ""

    @property
    def gammas(self) -> np.ndarray:
        return np.array([r.gamma for r in self.records])

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in self.records:
            writer.writerow([r.block_index, r.step_index, r.width, repr(r.sigma0), repr(r.sigma_l), repr(r.gamma)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text

    def normalized_depth(self, per_step: bool = False) -> np.ndarray:
        """Depth in (0, 1] for plotting.

        ``per_step=False`` places all blocks on one axis in execution order;
        ``per_step=True`` normalises within each step so steps overlay.
        """
        if not per_step:
            n = len(self.records)
            return np.arange(1, n + 1) / max(n, 1)
        out = np.empty(len(self.records))
        steps = np.array([r.step_index for r in self.records])
        for s in np.unique(steps):
            idx = np.flatnonzero(steps == s)
            out[idx] = np.arange(1, idx.size + 1) / idx.size
        return out


def _record(records, stream0: np.ndarray, z: np.ndarray, step_index: int, width: int):
    s0 = token_sigma(stream0)
    if s0 == 0:
        raise DegenerateInputError("sigma0 is zero: the probe batch has no per-token variation")
    sl = token_sigma(z)
    if sl == 0:
        raise DegenerateInputError(f"sigma_l is zero at block {len(records) + 1}")
    records.append(GammaRecord(len(records) + 1, step_index, width, s0, sl, s0 / sl))


def shortcut_ratio_trace(model, batch: Tensor, mask: np.ndarray | None = None) -> GammaTrace:
    """Forward ``batch`` through ``model`` and record gamma after every block.

    ``model`` is a :class:`ResidualStack`, a :class:`StepsModel`, or any
    object with ``width`` and ``blocks`` whose blocks implement ``forward``.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    records: list[GammaRecord] = []
    with T.no_grad():
        if isinstance(model, StepsModel):
            if x.shape[-1] != model.width:
                raise DimensionError(f"batch width {x.shape[-1]} does not match model width {model.width}")
            _, traces = steps_forward(x, model, trace=True, mask=mask)
            for tr in traces:
                ref = x.data[..., : tr.width]
                for z in tr.activations:
                    _record(records, ref, z.data, tr.step_index, tr.width)
        else:
            if x.shape[-1] != model.width:
                raise DimensionError(f"batch width {x.shape[-1]} does not match model width {model.width}")
            if isinstance(model, ResidualStack):
                _, acts = stack_forward(x, model, trace=True, mask=mask)
            else:
                acts, z = [], x
                for block in model.blocks:
                    z = block.forward(z, mask)
                    acts.append(z)
            for z in acts:
                _record(records, x.data, z.data, 0, model.width)
    return GammaTrace(records, batch=f"shape={tuple(x.shape)}")


class Decomposition(NamedTuple):
    gamma: np.ndarray
    rho: np.ndarray
    reconstruction_error: float


def decompose_normalized(z0, rl, eps: float = 0.0) -> Decomposition:
    """Split normalize(z0 + rl) into gamma * normalize(z0) + rho * normalize(rl).

    Statistics are per token (last axis).  ``gamma = sigma_0 / sigma_l`` and
    ``rho = sigma_r / sigma_l`` are returned per token; the error is the max
    absolute deviation between the layer-normalised sum and the weighted
    combination.  A residual with zero spread contributes nothing.
    """
    z0 = np.asarray(z0.data if isinstance(z0, Tensor) else z0, dtype=np.float64)
    rl = np.asarray(rl.data if isinstance(rl, Tensor) else rl, dtype=np.float64)
    if z0.shape != rl.shape:
        raise DimensionError(f"shape mismatch {z0.shape} vs {rl.shape}")
    zl = z0 + rl
    s0 = np.sqrt(z0.var(axis=-1, keepdims=True) + eps)
    sl = np.sqrt(zl.var(axis=-1, keepdims=True) + eps)
    sr = np.sqrt(rl.var(axis=-1, keepdims=True) + eps)
    if (s0 == 0).any() or (sl == 0).any():
        raise DegenerateInputError("zero per-token variance in z0 or z0 + rl")
    z0_hat = (z0 - z0.mean(axis=-1, keepdims=True)) / s0
    r_centred = rl - rl.mean(axis=-1, keepdims=True)
    r_hat = np.divide(r_centred, sr, out=np.zeros_like(rl), where=sr > 0)
    c = z0.shape[-1]
    ones, zeros = Tensor(np.ones(c)), Tensor(np.zeros(c))
    with T.no_grad():
        zl_hat = T.layer_norm(Tensor(zl), ones, zeros, eps).data
    gamma = (s0 / sl)[..., 0]
    rho = (sr / sl)[..., 0]
    recon = gamma[..., None] * z0_hat + rho[..., None] * r_hat
    return Decomposition(gamma, rho, float(np.abs(zl_hat - recon).max()))


def variance_oracle(depth: int, residual_variance: float) -> np.ndarray:
    """gamma_l = 1/sqrt(1 + l*v) for unit-variance input and independent residuals."""
    if residual_variance < 0:
        raise ValueError("residual variance must be non-negative")
    l = np.arange(1, depth + 1)
    return 1.0 / np.sqrt(1.0 + l * residual_variance)


def monte_carlo_gamma(depth: int, residual_variance: float, samples: int = 100_000,
                      seed: int = 0) -> np.ndarray:
    """Simulate ``z_l = z_0 + sum of independent N(0, v) draws`` and return sigma_0/sigma_l."""
    rng = np.random.default_rng(seed)
    z0 = rng.standard_normal(samples)
    z = z0.copy()
    sigma0 = z0.std()
    out = np.empty(depth)
    sd = np.sqrt(residual_variance)
    for l in range(depth):
        z += sd * rng.standard_normal(samples)
        out[l] = sigma0 / z.std()
    return out


class NoiseStub:
    """Residual block whose branch is fresh N(0, v) noise, independent of its input."""

    kind = "stub"

    def __init__(self, width: int, variance: float, rng: np.random.Generator):
        self.width = width
        self.variance = variance
        self.rng = rng

    def residual(self, z: Tensor, mask=None) -> Tensor:
        noise = np.sqrt(self.variance) * self.rng.standard_normal(z.shape)
        return Tensor(noise.astype(z.dtype))

    def forward(self, z: Tensor, mask=None) -> Tensor:
        return z + self.residual(z)

    def parameters(self) -> dict:
        return {}


def noise_stack(width: int, depth: int, variance: float = 1.0, seed: int = 0) -> ResidualStack:
    rng = np.random.default_rng(seed)
    stack = ResidualStack(width, "mlp")
    stack.blocks = [NoiseStub(width, variance, rng) for _ in range(depth)]
    return stack


def first_quarter_mean(trace: GammaTrace) -> float:
    g = trace.gammas
    return float(g[: max(1, len(g) // 4)].mean())


# Probe inputs are drawn at embedding scale (the std of a truncated-normal
# initialised patch/token embedding), not unit scale: with unit-variance
# inputs the residual branches of a freshly initialised stack are too small
# relative to the stream for gamma to move at all.
PROBE_STD = 0.02


def probe_batch(width: int, seed: int = 0, batch: int = 8, tokens: int = 32, std: float = PROBE_STD,
                dtype=np.float64) -> Tensor:
    rng = np.random.default_rng(seed)
    return Tensor((rng.standard_normal((batch, tokens, width)) * std).astype(dtype))


def probe_at_init(config, seed: int = 0, batch: int = 8, tokens: int = 32, std: float = PROBE_STD,
                  dtype=np.float64) -> GammaTrace:
    """Gamma trace of a freshly initialised model (weights seeded with ``seed``)."""
    model = StepsModel.init(config, np.random.default_rng(seed), dtype)
    x = probe_batch(config.width, 10_000 + seed, batch, tokens, std, dtype)
    return shortcut_ratio_trace(model, x)
