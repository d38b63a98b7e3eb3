"""Building length statistics and perturbation-depth selection.

The perturbation depth is the encoder stage whose receptive field (in metres)
best matches the typical building size:

    d = floor(log2((l_min + l_max) / (2 r)))

where ``r`` is the ground resolution in metres per pixel and ``l_min`` /
``l_max`` are the mean short and long side lengths of individual buildings.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy import ndimage

# values this close to an integer are snapped before flooring
_INT_SNAP = 1e-9
_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class DepthClampWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ResolutionSpec:
    r: float  # metres per pixel

    def __post_init__(self):
        if not (math.isfinite(self.r) and self.r > 0):
            raise ValueError(f"resolution must be > 0, got {self.r}")


@dataclass(frozen=True)
class BuildingLengthStats:
    l_min_mean: float
    l_max_mean: float
    building_count: int

    def __post_init__(self):
        if self.building_count < 0:
            raise ValueError("building_count must be nonnegative")
        if self.building_count > 0 and not (0 < self.l_min_mean <= self.l_max_mean):
            raise ValueError(
                f"need 0 < l_min_mean <= l_max_mean, got {self.l_min_mean}, {self.l_max_mean}"
            )


def _as_resolution(r) -> ResolutionSpec:
    return r if isinstance(r, ResolutionSpec) else ResolutionSpec(float(r))


def depth_log_argument(r, stats: BuildingLengthStats) -> float:
    """Unfloored ``log2((l_min + l_max) / (2r))``."""
    r = _as_resolution(r)
    if stats.building_count <= 0:
        raise ValueError("no buildings in statistics")
    ratio = (stats.l_min_mean + stats.l_max_mean) / (2.0 * r.r)
    if ratio < 1.0:
        raise ValueError(
            f"mean building size {ratio:.4g} px is below one pixel; depth would be negative"
        )
    value = math.log2(ratio)
    nearest = round(value)
    if abs(value - nearest) <= _INT_SNAP:
        value = float(nearest)
    return value


def select_perturbation_depth(
    r, stats: BuildingLengthStats, max_depth: int | None = None
) -> int:
    """Encoder depth at which to inject the feature perturbation.

    If ``max_depth`` is given the result is clamped to ``[1, max_depth]``
    and a :class:`DepthClampWarning` is emitted when clamping happens.
    """
    depth = int(math.floor(depth_log_argument(r, stats)))
    if max_depth is not None:
        clamped = min(max(depth, 1), max_depth)
        if clamped != depth:
            warnings.warn(
                f"perturbation depth {depth} clamped to {clamped} (encoder has {max_depth} stages)",
                DepthClampWarning,
                stacklevel=2,
            )
        depth = clamped
    return depth


def component_boxes(mask: np.ndarray) -> np.ndarray:
    """Bounding-box (height, width) in pixels of every 8-connected component."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must be binary")
    labels, n = ndimage.label(mask.astype(bool), structure=_EIGHT_CONNECTED)
    if n == 0:
        return np.zeros((0, 2), dtype=np.int64)
    slices = ndimage.find_objects(labels)
    return np.array([(s[0].stop - s[0].start, s[1].stop - s[1].start) for s in slices], dtype=np.int64)


def building_length_stats(masks: Iterable[np.ndarray], r) -> BuildingLengthStats:
    """Mean short/long bounding-box side (metres) over all buildings in ``masks``."""
    r = _as_resolution(r)
    boxes = [component_boxes(m) for m in masks]
    boxes = np.concatenate(boxes) if boxes else np.zeros((0, 2), dtype=np.int64)
    if len(boxes) == 0:
        raise ValueError("no foreground pixels in any mask")
    short = boxes.min(axis=1) * r.r
    long_ = boxes.max(axis=1) * r.r
    return BuildingLengthStats(float(short.mean()), float(long_.mean()), int(len(boxes)))
