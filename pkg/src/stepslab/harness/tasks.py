"""Desk-scale datasets.

* ``spiral2``: two interleaved 2-D spirals, 500 points per class.
* ``charlm``: next-character prediction over the first chapters of
  *Moby-Dick* (public domain), byte-level vocabulary of 128, windows of 64.
* ``copyseq``: ``a_1..a_k <sep> a_1..a_k`` over a 16-symbol vocabulary; the
  model must reproduce the first half after the separator.

Every task is deterministic given its seed and split 90/10 into train/eval.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np

from ..errors import ConfigError

TASKS = ("spiral2", "charlm", "copyseq")
CHARLM_VOCAB = 128
CHARLM_SEQ = 64
COPY_VOCAB = 16
COPY_HALF = 8
COPY_SAMPLES = 2000


@dataclass
class Task:
    name: str
    kind: str  # "classify" or "sequence"
    in_features: int  # input features (classify) or vocabulary size (sequence)
    classes: int
    seq_len: int
    train_x: np.ndarray
    train_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    train_w: np.ndarray | None = None
    eval_w: np.ndarray | None = None
    stream: np.ndarray | None = None  # charlm: the train token stream
    eval_stream: np.ndarray | None = None

    def describe(self) -> dict:
        return {"task": self.name, "kind": self.kind, "in_features": self.in_features,
                "classes": self.classes, "seq_len": self.seq_len}

    def sample_batch(self, rng: np.random.Generator, batch_size: int):
        """Return ``(x, y, w)`` for one training step."""
        if self.name == "charlm":
            starts = rng.integers(0, self.stream.size - self.seq_len - 1, size=batch_size)
            idx = starts[:, None] + np.arange(self.seq_len + 1)
            windows = self.stream[idx]
            return windows[:, :-1], windows[:, 1:], None
        n = self.train_x.shape[0]
        if batch_size >= n:
            sel = np.arange(n)
        else:
            sel = rng.choice(n, size=batch_size, replace=False)
        w = None if self.train_w is None else self.train_w[sel]
        return self.train_x[sel], self.train_y[sel], w


def encode(text: str) -> np.ndarray:
    ids = np.frombuffer(text.encode("ascii"), dtype=np.uint8).astype(np.int64)
    if ids.size and ids.max() >= CHARLM_VOCAB:
        raise ConfigError("charlm text must be 7-bit ASCII")
    return ids


def decode(ids) -> str:
    return bytes(int(i) for i in ids).decode("ascii")


def corpus_text() -> str:
    return resources.files("stepslab.data").joinpath("moby_dick_ch1-9.txt").read_text(encoding="ascii")


def _split(n: int, rng: np.random.Generator):
    order = rng.permutation(n)
    cut = int(round(0.9 * n))
    return order[:cut], order[cut:]


def make_spiral2(seed: int, n_per_class: int = 500, noise: float = 0.02) -> Task:
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for label in (0, 1):
        t = np.sqrt(rng.uniform(0.0, 1.0, n_per_class)) * 3.0 * np.pi
        r = t / (3.0 * np.pi)
        pts = np.stack([r * np.cos(t), r * np.sin(t)], axis=1)
        if label:
            pts = -pts
        xs.append(pts + noise * rng.standard_normal(pts.shape))
        ys.append(np.full(n_per_class, label))
    x = np.concatenate(xs) * 2.0
    y = np.concatenate(ys).astype(np.int64)
    tr, ev = _split(x.shape[0], rng)
    return Task("spiral2", "classify", 2, 2, 1, x[tr], y[tr], x[ev], y[ev])


def make_charlm(seed: int) -> Task:
    ids = encode(corpus_text())
    cut = int(round(0.9 * ids.size))
    train, held = ids[:cut], ids[cut:]
    n_eval = (held.size - 1) // CHARLM_SEQ
    idx = np.arange(n_eval)[:, None] * CHARLM_SEQ + np.arange(CHARLM_SEQ + 1)
    windows = held[idx]
    return Task("charlm", "sequence", CHARLM_VOCAB, CHARLM_VOCAB, CHARLM_SEQ,
                np.empty((0, CHARLM_SEQ), np.int64), np.empty((0, CHARLM_SEQ), np.int64),
                windows[:, :-1], windows[:, 1:], stream=train, eval_stream=held)


def copyseq_sequences(rng: np.random.Generator, count: int, half: int = COPY_HALF):
    """Sequences ``a <0> a`` with symbols 1..15; returns inputs, next-token targets, copy weights."""
    a = rng.integers(1, COPY_VOCAB, size=(count, half))
    full = np.concatenate([a, np.zeros((count, 1), np.int64), a], axis=1)
    x, y = full[:, :-1], full[:, 1:]
    w = np.zeros(x.shape)
    w[:, half:] = 1.0
    return x, y, w


def make_copyseq(seed: int) -> Task:
    rng = np.random.default_rng(seed)
    x, y, w = copyseq_sequences(rng, COPY_SAMPLES)
    tr, ev = _split(COPY_SAMPLES, rng)
    return Task("copyseq", "sequence", COPY_VOCAB, COPY_VOCAB, x.shape[1],
                x[tr], y[tr], x[ev], y[ev], w[tr], w[ev])


def make_task(name: str, seed: int = 0) -> Task:
    if name == "spiral2":
        return make_spiral2(seed)
    if name == "charlm":
        return make_charlm(seed)
    if name == "copyseq":
        return make_copyseq(seed)
    raise ConfigError(f"task: unknown task {name!r}; choose from {list(TASKS)}")


def unigram_perplexity(task: Task) -> float:
    """Perplexity of the add-one-smoothed train character distribution on the eval stream."""
    counts = np.bincount(task.stream, minlength=task.in_features).astype(np.float64) + 1.0
    logp = np.log(counts / counts.sum())
    targets = task.eval_y.reshape(-1)
    return float(np.exp(-logp[targets].mean()))
