"""Confidence filtering and label-map extraction for semantic score grids."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, DimensionError
from .numerics import FLOAT, NumericsError


@dataclass
class ScoreTensor:
    """H x W x l grid of raw per-class confidence scores (not probabilities)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=FLOAT)
        if self.data.ndim != 3 or self.data.shape[2] < 1:
            raise DimensionError(f"score tensor must be (H, W, l), got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise NumericsError("score tensor contains non-finite values")

    @property
    def num_classes(self) -> int:
        return self.data.shape[2]


@dataclass
class LabelMap:
    """Integer grid of per-cell class ids in [0, num_classes)."""

    data: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise DimensionError(f"label map must be 2-D, got shape {self.data.shape}")
        if self.data.size and (self.data.min() < 0 or self.data.max() >= self.num_classes):
            raise ArgumentError(
                f"label values must lie in [0, {self.num_classes}), "
                f"got range [{self.data.min()}, {self.data.max()}]")


@dataclass
class BinaryMask:
    """0/1 indicator grid for one object id."""

    data: np.ndarray
    object_id: int = field(default=-1)


def acf(scores: ScoreTensor, k: int = 2) -> ScoreTensor:
    """Adaptive confidence filter: stride-k per-channel max pooling.

    Requires H and W divisible by k; padding would fabricate confidence
    values, so indivisible inputs are rejected.
    """
    if k < 1:
        raise ArgumentError(f"filter size must be >= 1, got {k}")
    h, w, _ = scores.data.shape
    if h % k or w % k:
        raise DimensionError(
            f"score tensor {h}x{w} is not divisible by filter size {k}; "
            f"crop the input to a multiple of {k}")
    if k == 1:
        return ScoreTensor(scores.data.copy())
    v = scores.data
    pooled = v.reshape(h // k, k, w // k, k, v.shape[2]).max(axis=(1, 3))
    return ScoreTensor(pooled)


def argmax_labels(scores: ScoreTensor) -> LabelMap:
    """Per-cell argmax over channels; ties break toward the lowest class id."""
    return LabelMap(scores.data.argmax(axis=2), scores.num_classes)


def binary_map(labels: LabelMap, object_id: int) -> BinaryMask:
    if not 0 <= object_id < labels.num_classes:
        raise ArgumentError(
            f"object id {object_id} out of range [0, {labels.num_classes})")
    return BinaryMask((labels.data == object_id).astype(np.uint8), object_id)
