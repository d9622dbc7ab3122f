"""Object-wise feature aggregation: one pooled feature row per semantic class.

Masked sums accumulate cells in row-major order (via cumsum) so the results
are bitwise-identical to a sequential loop oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbones import FeatureGrid
from .errors import DataError, DimensionError
from .filtering import BinaryMask, LabelMap, ScoreTensor, acf, argmax_labels, binary_map
from .numerics import FLOAT, nearest_resize_labels


@dataclass
class SemanticSequence:
    """l x c matrix of per-object features in class-id order.

    Rows for objects that occupy no cell are exactly zero and flagged absent.
    """

    data: np.ndarray
    presence: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=FLOAT)
        self.presence = np.asarray(self.presence, dtype=bool)
        if self.data.ndim != 2 or self.presence.shape != (self.data.shape[0],):
            raise DimensionError(
                f"sequence needs (l, c) data with an l-length presence vector, "
                f"got {self.data.shape} and {self.presence.shape}")


def masked_average(grid: FeatureGrid, mask: BinaryMask) -> np.ndarray:
    """Mean feature over mask==1 cells; the zero vector when the mask is empty."""
    f = grid.data
    m = np.asarray(mask.data)
    if m.shape != f.shape[:2]:
        raise DimensionError(f"mask shape {m.shape} does not match grid {f.shape[:2]}")
    cells = f[m.astype(bool)]  # row-major order
    if cells.shape[0] == 0:
        return np.zeros(f.shape[2], dtype=FLOAT)
    return np.cumsum(cells, axis=0)[-1] / cells.shape[0]


def aggregate(grid: FeatureGrid, labels: LabelMap, num_objects: int) -> SemanticSequence:
    """Row o = masked mean of the grid over cells labelled o, for o in 0..l-1."""
    lm = np.asarray(labels.data)
    if lm.shape != grid.data.shape[:2]:
        raise DimensionError(
            f"label map shape {lm.shape} does not match grid {grid.data.shape[:2]}")
    if lm.size and lm.max() >= num_objects:
        raise DataError(f"label {int(lm.max())} exceeds object count {num_objects}")
    rows = np.zeros((num_objects, grid.channels), dtype=FLOAT)
    presence = np.zeros(num_objects, dtype=bool)
    bounded = LabelMap(lm, num_objects)
    for o in range(num_objects):
        mask = binary_map(bounded, o)
        if mask.data.any():
            rows[o] = masked_average(grid, mask)
            presence[o] = True
    return SemanticSequence(rows, presence)


def downsample_labels(scores: ScoreTensor, k: int, target: tuple[int, int]) -> LabelMap:
    """Filter scores, take the argmax map, and nearest-resize it to `target`."""
    filtered = acf(scores, k)
    labels = argmax_labels(filtered)
    return LabelMap(nearest_resize_labels(labels.data, target[0], target[1]),
                    labels.num_classes)


def aggregate_pair(grid_rgb: FeatureGrid, grid_spa: FeatureGrid, scores: ScoreTensor,
                   k: int = 2) -> tuple[SemanticSequence, SemanticSequence]:
    """Aggregate both feature grids with one shared downsampled label map."""
    if grid_rgb.spatial != grid_spa.spatial:
        raise DimensionError(
            f"feature grids must share spatial shape, got {grid_rgb.spatial} "
            f"and {grid_spa.spatial}")
    labels = downsample_labels(scores, k, grid_rgb.spatial)
    return (aggregate(grid_rgb, labels, scores.num_classes),
            aggregate(grid_spa, labels, scores.num_classes))
