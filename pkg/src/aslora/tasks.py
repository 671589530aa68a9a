"""Deterministic synthetic tasks.

``copy_class``
    Class ``c`` plants its reserved marker token ``c`` at a random position;
    the rest of the sequence is filler.  Linearly separable on token counts.
``layerwise_probe``
    ``depth`` binary attributes, each shown by one of two reserved tokens.
    The label is the parity of all attributes, so any depth >= 2 needs
    non-linear composition of the planted features.
``seq_regression``
    Each token carries a fixed random value; the target is their mean.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .rng import derive_seed, make_rng

TASK_KINDS = ("copy_class", "layerwise_probe", "seq_regression")


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "layerwise_probe"
    num_train: int = 512
    num_eval: int = 256
    noise_rate: float = 0.0
    seed: int = 0
    seq_len: int = 32
    vocab_size: int = 64
    num_classes: int = 2
    depth: int = 2

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ContractError(f"unknown task kind {self.kind!r}")
        if self.num_train < 1 or self.num_eval < 0:
            raise ContractError("num_train must be positive and num_eval non-negative")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ContractError("noise_rate must lie in [0, 1)")
        if self.kind == "copy_class" and self.vocab_size <= self.num_classes:
            raise ContractError("copy_class needs filler tokens beyond the class markers")
        if self.kind == "layerwise_probe":
            if self.depth < 1 or self.depth > self.seq_len:
                raise ContractError("layerwise_probe depth must lie in [1, seq_len]")
            if self.vocab_size <= 2 * self.depth:
                raise ContractError("layerwise_probe needs filler tokens beyond 2*depth markers")

    @property
    def is_classification(self) -> bool:
        return self.kind != "seq_regression"

    @property
    def n_classes(self) -> int:
        return 2 if self.kind == "layerwise_probe" else self.num_classes


@dataclass
class Dataset:
    tokens: np.ndarray  # int64 [n, seq]
    labels: np.ndarray  # int64 [n] or float [n]

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.tokens[idx], self.labels[idx])


@dataclass
class TaskData:
    spec: TaskSpec
    train: Dataset
    eval: Dataset


def _balanced_labels(rng, n: int, k: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % k).astype(np.int64)


def _flip(rng, labels: np.ndarray, k: int, rate: float) -> np.ndarray:
    # same number of flips drawn from every class, rotated by one: counts are preserved
    if rate <= 0:
        return labels
    out = labels.copy()
    per_class = min(int(round(rate * len(labels) / k)), *(int((labels == c).sum()) for c in range(k)))
    for c in range(k):
        idx = rng.permutation(np.flatnonzero(labels == c))[:per_class]
        out[idx] = (c + 1) % k
    return out


def _fill(rng, n: int, spec: TaskSpec, lo: int) -> np.ndarray:
    return rng.integers(lo, spec.vocab_size, size=(n, spec.seq_len), dtype=np.int64)


def _sample(rng, spec: TaskSpec, n: int):
    if spec.kind == "copy_class":
        labels = _balanced_labels(rng, n, spec.num_classes)
        tokens = _fill(rng, n, spec, spec.num_classes)
        pos = rng.integers(0, spec.seq_len, size=n)
        tokens[np.arange(n), pos] = labels
        return tokens, labels
    if spec.kind == "layerwise_probe":
        k = spec.depth
        labels = _balanced_labels(rng, n, 2)
        bits = rng.integers(0, 2, size=(n, k), dtype=np.int64)
        bits[:, -1] = (labels - bits[:, :-1].sum(axis=1)) % 2
        tokens = _fill(rng, n, spec, 2 * k)
        for row in range(n):
            pos = rng.choice(spec.seq_len, size=k, replace=False)
            tokens[row, pos] = 2 * np.arange(k) + bits[row]
        return tokens, labels
    values = make_rng(derive_seed(spec.seed, 7)).normal(0.0, 1.0, size=spec.vocab_size)
    tokens = _fill(rng, n, spec, 0)
    labels = values[tokens].mean(axis=1)
    return tokens, labels


def generate(spec: TaskSpec) -> TaskData:
    """Train/eval splits as a pure function of ``spec`` (including its seed)."""
    rng = make_rng(derive_seed(spec.seed, 11))
    n = spec.num_train + spec.num_eval
    tokens, labels = _sample(rng, spec, n)
    # drop eval rows that duplicate a training sequence
    seen = {row.tobytes() for row in tokens[: spec.num_train]}
    keep = np.ones(n, dtype=bool)
    for i in range(spec.num_train, n):
        keep[i] = tokens[i].tobytes() not in seen
    tokens, labels = tokens[keep], labels[keep]
    if spec.is_classification:
        train_labels = _flip(rng, labels[: spec.num_train], spec.n_classes, spec.noise_rate)
        labels = np.concatenate([train_labels, labels[spec.num_train:]])
    else:
        labels = labels + spec.noise_rate * rng.normal(0.0, 1.0, size=labels.shape)
        labels = labels.astype(np.float64)
    train = Dataset(tokens[: spec.num_train], labels[: spec.num_train])
    ev = Dataset(tokens[spec.num_train:], labels[spec.num_train:])
    return TaskData(spec, train, ev)


def evaluate(model, data: Dataset, batch_size: int = 256) -> dict[str, float]:
    """Loss plus accuracy (classification) or MSE (regression), without recording gradients."""
    n = len(data)
    if n == 0:
        return {}
    total, correct = 0.0, 0
    with T.no_grad():
        for s in range(0, n, batch_size):
            ids = data.tokens[s:s + batch_size]
            y = data.labels[s:s + batch_size]
            out = model.forward(ids)
            if model.cfg.task_head == "classification":
                total += T.cross_entropy(out, y).item() * len(y)
                correct += int((out.data.argmax(axis=1) == y).sum())
            else:
                total += T.mse(out, y).item() * len(y)
    if model.cfg.task_head == "classification":
        return {"loss": total / n, "accuracy": correct / n}
    return {"loss": total / n, "mse": total / n}
