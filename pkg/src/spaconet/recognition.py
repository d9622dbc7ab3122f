"""Classifier head, cross-entropy loss and the top-1 accuracy metric."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError
from .numerics import (FLOAT, Node, Parameter, _as_node, affine, dropout, leaf)


@dataclass
class ClassifierHead:
    """Dropout followed by an affine map to class logits."""

    weight: Parameter
    bias: Parameter
    dropout_rate: float = 0.0

    @property
    def num_classes(self) -> int:
        return self.bias.value.shape[0]

    def named_params(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


def init_head(channels: int, num_classes: int, dropout_rate: float,
              rng: np.random.Generator, prefix: str = "head") -> ClassifierHead:
    std = np.sqrt(2.0 / channels)
    return ClassifierHead(
        weight=Parameter(rng.normal(0.0, std, (channels, num_classes)), f"{prefix}.weight"),
        bias=Parameter(np.zeros(num_classes), f"{prefix}.bias"),
        dropout_rate=dropout_rate)


def head_logits(features, head: ClassifierHead, mode: str = "eval", rng=None) -> Node:
    """Logit node for a (c,) feature vector; dropout active only in train mode."""
    x = _as_node(features)
    if mode == "train" and head.dropout_rate > 0.0:
        x = dropout(x, head.dropout_rate, "train", rng)
    return affine(x, leaf(head.weight), leaf(head.bias))


def classify(features: np.ndarray, head: ClassifierHead) -> tuple[np.ndarray, int]:
    """Eval-mode logits and the argmax class (lowest index wins ties)."""
    logits = head_logits(np.asarray(features, dtype=FLOAT), head).value
    return logits, int(np.argmax(logits))


def cross_entropy(logits: np.ndarray, label: int) -> float:
    """Negative log softmax probability of `label`, via shifted log-sum-exp."""
    z = np.asarray(logits, dtype=FLOAT)
    if not 0 <= label < z.shape[-1]:
        raise ArgumentError(f"label {label} out of range [0, {z.shape[-1]})")
    m = z.max()
    return float(np.log(np.exp(z - m).sum()) - (z[label] - m))


def cross_entropy_node(logits: Node, label: int) -> Node:
    """Graph version of `cross_entropy`; gradient is softmax(z) - onehot."""
    z = logits.value
    if not 0 <= label < z.shape[-1]:
        raise ArgumentError(f"label {label} out of range [0, {z.shape[-1]})")
    m = z.max()
    e = np.exp(z - m)
    p = e / e.sum()
    loss = np.asarray(np.log(e.sum()) - (z[label] - m))

    def grad(g):
        d = p.copy()
        d[label] -= 1.0
        return float(g) * d

    return Node(loss, ((logits, grad),) if logits.needs_grad else (),
                needs_grad=logits.needs_grad)


def top1_accuracy(predictions, labels) -> float:
    predictions = list(predictions)
    labels = list(labels)
    if not predictions or len(predictions) != len(labels):
        raise ArgumentError(
            f"need equal-length nonempty lists, got {len(predictions)} and {len(labels)}")
    correct = sum(1 for p, y in zip(predictions, labels) if p == y)
    return correct / len(labels)
