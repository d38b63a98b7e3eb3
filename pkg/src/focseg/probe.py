"""Local-variation maps for inspecting where feature space is sparse.

For each pixel the map holds the mean Euclidean distance between its feature
vector and those of its (up to 8) neighbours, after resampling the features
to the image size. High values mark low-density regions; under the cluster
assumption they should line up with building outlines.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

NEIGHBOUR_OFFSETS = tuple((dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0))


@dataclass
class VariationMap:
    values: np.ndarray  # (H, W), nonnegative
    source_depth: int | None = None


def resample(features, target_size: tuple[int, int]) -> np.ndarray:
    """Bilinear resampling of a (C, h, w) array to (C, H, W), float64."""
    t = torch.as_tensor(np.asarray(features), dtype=torch.float64)
    if t.dim() != 3:
        raise ValueError(f"features must be (C, h, w), got {tuple(t.shape)}")
    if tuple(t.shape[1:]) == tuple(target_size):
        return t.numpy().copy()
    out = F.interpolate(t[None], size=tuple(target_size), mode="bilinear", align_corners=False)
    return out[0].numpy()


def neighbour_distance_mean(f: np.ndarray) -> np.ndarray:
    c, h, w = f.shape
    total = np.zeros((h, w))
    count = np.zeros((h, w))
    for dy, dx in NEIGHBOUR_OFFSETS:
        # pixel region whose neighbour at (dy, dx) lies inside the grid
        ys = slice(max(-dy, 0), h - max(dy, 0))
        xs = slice(max(-dx, 0), w - max(dx, 0))
        ny = slice(max(dy, 0), h - max(-dy, 0))
        nx = slice(max(dx, 0), w - max(-dx, 0))
        d = np.sqrt(((f[:, ys, xs] - f[:, ny, nx]) ** 2).sum(axis=0))
        total[ys, xs] += d
        count[ys, xs] += 1
    return total / count


def local_variation_map(features, target_size: tuple[int, int], source_depth: int | None = None) -> VariationMap:
    h, w = (int(v) for v in target_size)
    # a single row or column still has neighbours; only a lone pixel has none
    if h < 1 or w < 1 or h * w < 2:
        raise ValueError(f"target size {target_size} too small for a neighbourhood")
    f = resample(features, (h, w))
    if not np.isfinite(f).all():
        raise ValueError("features must be finite")
    return VariationMap(neighbour_distance_mean(f), source_depth)


def boundary_band(mask: np.ndarray, width: int = 2) -> np.ndarray:
    """Pixels within ``width`` of a building outline (both sides)."""
    m = np.asarray(mask).astype(bool)
    st = np.ones((3, 3), bool)
    grown = ndimage.binary_dilation(m, st, iterations=width)
    shrunk = ndimage.binary_erosion(m, st, iterations=width, border_value=1)
    return grown & ~shrunk


def band_contrast(vmap: VariationMap, mask: np.ndarray, width: int = 2) -> tuple[float, float]:
    """Mean variation on the boundary band and off it."""
    band = boundary_band(mask, width)
    v = vmap.values
    on = float(v[band].mean()) if band.any() else float("nan")
    off = float(v[~band].mean()) if (~band).any() else float("nan")
    return on, off


def normalise(values: np.ndarray) -> np.ndarray:
    """Per-patch min-max scaling to 8-bit."""
    lo, hi = float(values.min()), float(values.max())
    scaled = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    return np.round(scaled * 255).astype(np.uint8)
