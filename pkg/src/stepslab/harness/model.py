"""Full networks: stem, step-by-step body, final norm and linear head."""

from __future__ import annotations

import copy

import numpy as np

from .. import tensor as T
from ..blocks import LayerNorm, Linear, causal_attention_mask, trunc_normal
from ..costing import CostReport, HeadSpec, StemSpec, model_cost
from ..errors import CheckpointError
from ..steps import StepsConfig, StepsModel, mask_path, steps_forward
from ..tensor import Tensor

DTYPES = {"f32": np.float32, "f64": np.float64}


class Network:
    """Task-facing model.

    ``classify`` tasks project each input row to the model width with a
    linear stem and treat rows as independent tokens.  ``sequence`` tasks
    use token and learned absolute position embeddings and a causal mask.
    """

    def __init__(self, task_spec: dict, config: StepsConfig, rng: np.random.Generator,
                 dtype=np.float32, zero_branch: bool = False):
        self.task_spec = dict(task_spec)
        self.config = config
        self.dtype = np.dtype(dtype)
        c = config.width
        kind = task_spec["kind"]
        if kind == "classify":
            self.stem = Linear.init(task_spec["in_features"], c, rng, dtype)
            self.tok_embed = self.pos_embed = None
        elif kind == "sequence":
            self.stem = None
            self.tok_embed = Tensor(trunc_normal(rng, (task_spec["in_features"], c), dtype=dtype), requires_grad=True)
            self.pos_embed = Tensor(trunc_normal(rng, (task_spec["seq_len"], c), dtype=dtype), requires_grad=True)
        else:
            raise ValueError(f"unknown task kind {kind!r}")
        self.body = StepsModel.init(config, rng, dtype, zero_branch)
        self.norm = LayerNorm.init(c, dtype)
        self.head = Linear.init(c, task_spec["classes"], rng, dtype)

    @property
    def kind(self) -> str:
        return self.task_spec["kind"]

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        if self.stem is not None:
            out["stem.weight"] = self.stem.weight
            out["stem.bias"] = self.stem.bias
        else:
            out["embed.tokens"] = self.tok_embed
            out["embed.positions"] = self.pos_embed
        out.update(self.body.parameters("body."))
        out["norm.gain"] = self.norm.gain
        out["norm.bias"] = self.norm.bias
        out["head.weight"] = self.head.weight
        out["head.bias"] = self.head.bias
        return out

    def decay_mask(self) -> dict[str, bool]:
        """Weight decay applies to matrices only."""
        return {name: p.ndim >= 2 and not name.startswith("embed.positions")
                for name, p in self.parameters().items()}

    def embed(self, x) -> Tensor:
        if self.kind == "classify":
            return self.stem(Tensor(np.asarray(x, dtype=self.dtype)))
        ids = np.asarray(x)
        pos = np.broadcast_to(np.arange(ids.shape[-1]), ids.shape)
        return T.embedding(self.tok_embed, ids) + T.embedding(self.pos_embed, pos)

    def forward(self, x, mask: tuple[str, int] | None = None) -> Tensor:
        """Logits for a batch; ``mask=(path, k)`` zeroes channels before the body."""
        h = self.embed(x)
        if mask is not None:
            h = mask_path(h, *mask)
        attn_mask = causal_attention_mask(h.shape[-2]) if self.kind == "sequence" else None
        h, _ = steps_forward(h, self.body, mask=attn_mask)
        return self.head(self.norm(h))

    def loss(self, x, y, w=None, mask=None) -> Tensor:
        return T.cross_entropy(self.forward(x, mask), y, w)

    def with_body(self, body: StepsModel) -> "Network":
        net = copy.copy(self)
        net.body = body
        net.config = body.config
        return net

    def cost(self) -> CostReport:
        return task_cost(self.config, self.task_spec)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))[:3]
            extra = sorted(set(state) - set(params))[:3]
            raise CheckpointError(f"parameter names differ (missing {missing}, unexpected {extra})")
        for name, p in params.items():
            arr = state[name]
            if arr.shape != p.shape:
                raise CheckpointError(f"{name}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.dtype)


def task_cost(config: StepsConfig, spec: dict) -> CostReport:
    """Analytic cost of one sample (one row, or one sequence) of a task."""
    if spec["kind"] == "classify":
        stem = StemSpec("linear", in_features=spec["in_features"], tokens=1)
        head = HeadSpec(classes=spec["classes"], rows=1)
        return model_cost(config, 1, stem, head, extra_layers=2)
    stem = StemSpec("embedding", in_features=spec["in_features"], pos_tokens=spec["seq_len"])
    head = HeadSpec(classes=spec["classes"], rows=spec["seq_len"])
    return model_cost(config, spec["seq_len"], stem, head, extra_layers=1)
