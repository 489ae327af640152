"""Input conditioning for depth frames and radar traces.

Depth goes through a fixed pipeline: optional area-average downsample to
the training grid, zero-hole filling, then mean-centering scaled by the
max absolute value. Radar traces are scaled by their global max absolute
value. All functions are pure; degenerate inputs (all-zero or constant
frames) pass through unchanged with a flag instead of raising.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .engine import ShapeError

RADAR_SAMPLES = 256
RADAR_CHANNELS = 4


@dataclass(frozen=True)
class DepthFrame:
    """One depth image, (H, W) float array plus a degeneracy flag.

    ``degenerate`` marks frames a preprocessing step could not condition
    (all-zero at hole-fill, constant at standardization); they flow through
    the pipeline unchanged so batch code can drop or zero them explicitly.
    """

    values: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2 or v.size == 0:
            raise ShapeError(f"DepthFrame wants a non-empty (H, W) array, got {v.shape}")
        object.__setattr__(self, "values", v)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class RadarTrace:
    """One radar frame: (1, 256, 4) fast-time samples by channel."""

    samples: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float32)
        if s.shape != (1, RADAR_SAMPLES, RADAR_CHANNELS):
            raise ShapeError(
                f"RadarTrace wants shape (1, {RADAR_SAMPLES}, {RADAR_CHANNELS}), got {s.shape}"
            )
        object.__setattr__(self, "samples", s)


def fill_depth_holes(frame: DepthFrame) -> DepthFrame:
    """Replace zero pixels by the frame's minimum non-zero value.

    An all-zero frame has no donor value; it comes back unchanged with the
    degenerate flag set.
    """
    v = frame.values
    holes = v == 0.0
    if not holes.any():
        return frame
    nonzero = v[~holes]
    if nonzero.size == 0:
        return replace(frame, degenerate=True)
    filled = v.copy()
    filled[holes] = nonzero.min()
    return replace(frame, values=filled)


def standardize_depth(frame: DepthFrame) -> DepthFrame:
    """Center on the mean, then scale by the max absolute deviation.

    Output lands in [-1, 1] with at least one pixel at magnitude 1. A
    constant frame has zero deviation everywhere; it becomes all zeros with
    the degenerate flag set.
    """
    centered = frame.values - frame.values.mean(dtype=np.float64).astype(np.float32)
    peak = np.abs(centered).max()
    if peak == 0.0:
        return replace(frame, values=np.zeros_like(frame.values), degenerate=True)
    return replace(frame, values=centered / peak)


def normalize_radar(trace: RadarTrace) -> RadarTrace:
    """Scale the whole trace by its max absolute sample.

    Non-negative traces land in [0, 1]; traces with negative samples land
    in [-1, 1]. An all-zero trace comes back unchanged and flagged.
    """
    peak = np.abs(trace.samples).max()
    if peak == 0.0:
        return replace(trace, degenerate=True)
    return replace(trace, samples=trace.samples / peak)


def downsample_depth(frame: DepthFrame, target) -> DepthFrame:
    """Area-average pool a frame down to the ``(rows, cols)`` target grid.

    Source dimensions must be integer multiples of the target so every
    output pixel averages an equal block.
    """
    th, tw = int(target[0]), int(target[1])
    h, w = frame.values.shape
    if th <= 0 or tw <= 0 or th > h or tw > w:
        raise ShapeError(f"cannot downsample {h}x{w} to {th}x{tw}")
    if h % th or w % tw:
        raise ShapeError(f"target {th}x{tw} does not evenly divide {h}x{w}")
    if (th, tw) == (h, w):
        return frame
    bh, bw = h // th, w // tw
    pooled = (
        frame.values.reshape(th, bh, tw, bw)
        .mean(axis=(1, 3), dtype=np.float64)
        .astype(np.float32)
    )
    return replace(frame, values=pooled)


def preprocess_depth(frame: DepthFrame, target=None) -> DepthFrame:
    """Full depth pipeline in its fixed order: downsample, fill, standardize."""
    if target is not None:
        frame = downsample_depth(frame, target)
    return standardize_depth(fill_depth_holes(frame))


def preprocess_radar(trace: RadarTrace) -> RadarTrace:
    """Full radar pipeline (max-scaling)."""
    return normalize_radar(trace)
