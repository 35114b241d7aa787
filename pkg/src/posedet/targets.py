"""Dense target assignment for the anchor-free multi-level detector.

Every pyramid location is mapped back to input pixels at half-stride
offsets. A location is a positive for a box iff it falls inside the box
and the largest of its four side distances lies in the level's regress
range; overlaps resolve to the smaller box. Center-ness encodes how
centered a positive location sits within its box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import IndivisibleInput, NonPositiveTarget
from .ingest import BoxAnnotation

INF = float("inf")

# (lo, hi] per level; a level owns the boxes whose max side distance
# falls in its range.
DEFAULT_RANGE_BOUNDS = (64.0, 128.0, 256.0, 512.0)
PYRAMID_LEVELS = (3, 4, 5, 6, 7)


@dataclass(frozen=True)
class LevelSpec:
    """One pyramid level: index, stride 2^level, regress range (lo, hi]."""

    level: int
    stride: int
    regress_min: float
    regress_max: float

    def __post_init__(self):
        assert self.stride == 2 ** self.level


def default_levels(range_bounds: tuple[float, ...] = DEFAULT_RANGE_BOUNDS) -> tuple[LevelSpec, ...]:
    """Levels P3..P7 with consecutive ranges partitioning (0, inf)."""
    bounds = (0.0, *range_bounds, INF)
    return tuple(
        LevelSpec(level=lv, stride=2 ** lv, regress_min=bounds[i], regress_max=bounds[i + 1])
        for i, lv in enumerate(PYRAMID_LEVELS)
    )


@dataclass
class TargetMaps:
    """Per-level dense ground truth.

    class_maps: (H_i, W_i) int64, -1 = background.
    reg_maps:   (H_i, W_i, 4) float64 (l, t, r, b) distances, zero on background.
    ctr_maps:   (H_i, W_i) float64 center-ness, zero on background.
    """

    levels: tuple[LevelSpec, ...]
    class_maps: list[np.ndarray]
    reg_maps: list[np.ndarray]
    ctr_maps: list[np.ndarray]

    @property
    def num_positives(self) -> int:
        return int(sum((m >= 0).sum() for m in self.class_maps))


def grid_shape(level: LevelSpec, input_size: tuple[int, int]) -> tuple[int, int]:
    w, h = input_size
    return h // level.stride, w // level.stride


def location_grid(level: LevelSpec, input_size: tuple[int, int]) -> np.ndarray:
    """(H_i, W_i, 2) input-pixel (x, y) coordinates of every cell center.

    Cell (row y, col x) maps to (s/2 + x*s, s/2 + y*s) for stride s.
    """
    w, h = input_size
    if w % 128 or h % 128:
        raise IndivisibleInput(f"input size {w}x{h} not divisible by 128")
    s = level.stride
    xs = s / 2 + np.arange(w // s, dtype=np.float64) * s
    ys = s / 2 + np.arange(h // s, dtype=np.float64) * s
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def centerness_from_sides(l, t, r, b):
    """Vectorized center-ness: sqrt((min(l,r)/max(l,r)) * (min(t,b)/max(t,b)))."""
    lr = np.minimum(l, r) / np.maximum(l, r)
    tb = np.minimum(t, b) / np.maximum(t, b)
    return np.sqrt(lr * tb)


def center_ness(l: float, t: float, r: float, b: float) -> float:
    """Center-ness of one positive location from its four side distances."""
    if min(l, t, r, b) <= 0:
        raise NonPositiveTarget(f"side distances must be positive, got {(l, t, r, b)}")
    return math.sqrt((min(l, r) / max(l, r)) * (min(t, b) / max(t, b)))


def assign_targets(
    boxes: list[BoxAnnotation],
    levels: tuple[LevelSpec, ...],
    input_size: tuple[int, int],
) -> TargetMaps:
    """Build per-level class / regression / center-ness target maps.

    A location is positive for a box iff it lies strictly inside the box and
    max(l, t, r, b) falls in the level's (lo, hi] range. When several boxes
    claim one location the smallest area wins; equal areas go to the lower
    box index. Background rows keep zero reg/ctr values and are masked out
    of those losses downstream.
    """
    class_maps, reg_maps, ctr_maps = [], [], []
    if boxes:
        bx = np.asarray([b.box for b in boxes], dtype=np.float64)  # (N, 4)
        cls_ids = np.asarray([b.class_id for b in boxes], dtype=np.int64)
        areas = (bx[:, 2] - bx[:, 0]) * (bx[:, 3] - bx[:, 1])

    for spec in levels:
        grid = location_grid(spec, input_size)
        hi, wi = grid.shape[:2]
        cls_map = np.full((hi, wi), -1, dtype=np.int64)
        reg_map = np.zeros((hi, wi, 4), dtype=np.float64)
        ctr_map = np.zeros((hi, wi), dtype=np.float64)

        if boxes:
            gx = grid[..., 0][..., None]  # (H, W, 1)
            gy = grid[..., 1][..., None]
            l = gx - bx[None, None, :, 0]  # (H, W, N)
            t = gy - bx[None, None, :, 1]
            r = bx[None, None, :, 2] - gx
            b = bx[None, None, :, 3] - gy
            sides = np.stack([l, t, r, b], axis=-1)  # (H, W, N, 4)
            inside = sides.min(axis=-1) > 0
            max_side = sides.max(axis=-1)
            in_range = (max_side > spec.regress_min) & (max_side <= spec.regress_max)
            candidate = inside & in_range

            masked_area = np.where(candidate, areas[None, None, :], np.inf)
            best = masked_area.argmin(axis=-1)  # first index on ties
            positive = candidate.any(axis=-1)

            rows, cols = np.nonzero(positive)
            chosen = best[rows, cols]
            cls_map[rows, cols] = cls_ids[chosen]
            chosen_sides = sides[rows, cols, chosen]  # (P, 4)
            reg_map[rows, cols] = chosen_sides
            ctr_map[rows, cols] = centerness_from_sides(
                chosen_sides[:, 0], chosen_sides[:, 1], chosen_sides[:, 2], chosen_sides[:, 3]
            )

        class_maps.append(cls_map)
        reg_maps.append(reg_map)
        ctr_maps.append(ctr_map)

    return TargetMaps(levels=tuple(levels), class_maps=class_maps, reg_maps=reg_maps, ctr_maps=ctr_maps)
