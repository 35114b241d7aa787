"""Ground-truth keypoint heatmaps for supervising the hourglass stages.

One K-channel Gaussian stack at 1/8 input resolution is shared by all
stages. Each present keypoint drops an unnormalized Gaussian centered on
its nearest heatmap cell (so channel peaks are exactly 1.0); overlapping
persons combine by element-wise maximum, keeping targets in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ingest import NUM_KEYPOINTS, ImageSample, KeypointSet

HEATMAP_STRIDE = 8
DEFAULT_SIGMA = 2.0  # heatmap pixels


@dataclass
class KeypointHeatmapStack:
    """(K, H/8, W/8) float32 target maps plus the sigma they were drawn with."""

    maps: np.ndarray
    sigma: float

    @property
    def num_channels(self) -> int:
        return self.maps.shape[0]


def render_heatmaps(
    keypoints: list[KeypointSet],
    input_size: tuple[int, int],
    sigma: float = DEFAULT_SIGMA,
    num_keypoints: int = NUM_KEYPOINTS,
) -> KeypointHeatmapStack:
    """Render the K-channel ground-truth Gaussian stack at 1/8 resolution.

    Channel k is the pixel-wise max over all persons' present type-k
    keypoints of exp(-(dx^2 + dy^2) / (2 sigma^2)), with the Gaussian
    centered on the grid cell nearest to (x/8, y/8). Points whose nearest
    cell falls outside the grid contribute nothing.
    """
    w, h = input_size
    if w % HEATMAP_STRIDE or h % HEATMAP_STRIDE:
        raise ValueError(f"input size {w}x{h} not divisible by {HEATMAP_STRIDE}")
    hw, hh = w // HEATMAP_STRIDE, h // HEATMAP_STRIDE
    maps = np.zeros((num_keypoints, hh, hw), dtype=np.float32)

    cols = np.arange(hw, dtype=np.float64)
    rows = np.arange(hh, dtype=np.float64)
    inv = 1.0 / (2.0 * sigma * sigma)

    for ks in keypoints:
        for k in range(min(num_keypoints, ks.num_keypoints)):
            if not ks.present[k]:
                continue
            cx = int(np.floor(ks.xy[k, 0] / HEATMAP_STRIDE + 0.5))
            cy = int(np.floor(ks.xy[k, 1] / HEATMAP_STRIDE + 0.5))
            if not (0 <= cx < hw and 0 <= cy < hh):
                continue
            g = np.exp(-((cols[None, :] - cx) ** 2 + (rows[:, None] - cy) ** 2) * inv)
            np.maximum(maps[k], g.astype(np.float32), out=maps[k])

    return KeypointHeatmapStack(maps=maps, sigma=sigma)


def mask_for_missing(sample: ImageSample) -> bool:
    """True iff the sample carries at least one present keypoint.

    Samples returning False are masked out of the keypoint loss.
    """
    return any(bool(ks.present.any()) for ks in sample.keypoints)
