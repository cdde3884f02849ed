"""Space-time video volumes: slicing, reassembly, pixel permutation and
overlapping-segment planning for videos longer than the denoiser geometry."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np


class VolumeError(ValueError):
    pass


class Axis(str, Enum):
    XY = "XY"  # a frame, indexed by t
    YT = "YT"  # spatiotemporal slice, indexed by x
    XT = "XT"  # spatiotemporal slice, indexed by y


class Space(str, Enum):
    PIXEL = "pixel"
    LATENT = "latent"


# position of the axis each slice kind is indexed along, in (t, y, x, c) layout
_SLICED_DIM = {Axis.XY: 0, Axis.YT: 2, Axis.XT: 1}


@dataclass(frozen=True)
class VideoVolume:
    """Frame-major (t, y, x, c) float32 tensor. Read-only after construction."""

    data: np.ndarray
    space: Space = Space.LATENT

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim == 3:
            data = data[..., None]
        if data.ndim != 4:
            raise VolumeError(f"expected (t, y, x, c) data, got shape {data.shape}")
        if data.shape[0] < 1:
            raise VolumeError("a volume needs at least one frame")
        if not np.all(np.isfinite(data)):
            raise VolumeError("volume contains non-finite values")
        space = Space(self.space)
        if space is Space.PIXEL and data.size and (data.min() < -1.0 - 1e-6 or data.max() > 1.0 + 1e-6):
            raise VolumeError("pixel-space values must lie in [-1, 1]")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "space", space)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    def replace(self, data: np.ndarray, space: Space | None = None) -> "VideoVolume":
        return VideoVolume(data, self.space if space is None else space)


@dataclass(frozen=True)
class Slice2D:
    data: np.ndarray
    axis: Axis
    index: int

    def __post_init__(self):
        object.__setattr__(self, "axis", Axis(self.axis))
        if self.data.ndim != 3:
            raise VolumeError(f"slice data must be (rows, cols, c), got {self.data.shape}")


def slice_volume(vol: VideoVolume, axis: Axis | str, index: int) -> Slice2D:
    """Extract one plane. XY -> (h, w, c), YT -> (t, h, c), XT -> (t, w, c)."""
    axis = Axis(axis)
    dim = _SLICED_DIM[axis]
    extent = vol.data.shape[dim]
    if not 0 <= index < extent:
        raise IndexError(f"{axis.value} slice index {index} outside [0, {extent})")
    data = np.take(vol.data, index, axis=dim)
    return Slice2D(np.array(data), axis, int(index))


def slice_all(vol: VideoVolume, axis: Axis | str) -> list[Slice2D]:
    axis = Axis(axis)
    return [slice_volume(vol, axis, i) for i in range(vol.data.shape[_SLICED_DIM[axis]])]


def slice_stack(vol: VideoVolume | np.ndarray, axis: Axis | str) -> np.ndarray:
    """All slices along `axis` as one (n_slices, rows, cols, c) batch."""
    data = vol.data if isinstance(vol, VideoVolume) else vol
    axis = Axis(axis)
    if axis is Axis.XY:
        return data
    if axis is Axis.YT:
        return np.ascontiguousarray(data.transpose(2, 0, 1, 3))
    return np.ascontiguousarray(data.transpose(1, 0, 2, 3))


def unstack_slices(batch: np.ndarray, axis: Axis | str) -> np.ndarray:
    """Inverse of `slice_stack`, returning (t, y, x, c) data."""
    axis = Axis(axis)
    if axis is Axis.XY:
        return batch
    if axis is Axis.YT:
        return np.ascontiguousarray(batch.transpose(1, 2, 0, 3))
    return np.ascontiguousarray(batch.transpose(1, 0, 2, 3))


def assemble(
    slices: Sequence[Slice2D],
    axis: Axis | str,
    dims: tuple[int, int, int, int],
    space: Space | str = Space.LATENT,
) -> VideoVolume:
    """Rebuild a volume of shape `dims` = (t, y, x, c) from a complete slice set."""
    axis = Axis(axis)
    dim = _SLICED_DIM[axis]
    expected_shape = tuple(d for i, d in enumerate(dims) if i != dim)
    extent = dims[dim]
    by_index: dict[int, np.ndarray] = {}
    for s in slices:
        if s.axis is not axis:
            raise VolumeError(f"slice along {s.axis.value} given to a {axis.value} assembly")
        if s.data.shape != expected_shape:
            raise VolumeError(f"slice {s.index} has shape {s.data.shape}, expected {expected_shape}")
        if s.index in by_index:
            raise VolumeError(f"duplicate slice index {s.index}")
        by_index[s.index] = s.data
    missing = sorted(set(range(extent)) - set(by_index))
    if missing or len(by_index) != extent:
        raise VolumeError(f"missing slice indices {missing[:8]}")
    data = np.stack([by_index[i] for i in range(extent)], axis=dim)
    return VideoVolume(data, Space(space))


def permute_pixels(frame: Slice2D, seed: int) -> Slice2D:
    """Shuffle spatial positions of a frame; channels at a pixel move together."""
    if frame.axis is not Axis.XY:
        raise VolumeError("pixel permutation applies to XY frames")
    h, w, c = frame.data.shape
    perm = np.random.default_rng(seed).permutation(h * w)
    flat = frame.data.reshape(h * w, c)[perm]
    return Slice2D(flat.reshape(h, w, c), Axis.XY, frame.index)


class BlendMode(str, Enum):
    MEAN = "mean"
    INDEPENDENT = "independent"


@dataclass(frozen=True)
class SegmentPlan:
    segments: tuple[tuple[int, int], ...]
    weights_mode: BlendMode = BlendMode.INDEPENDENT
    n_frames: int = field(default=0)

    def __post_init__(self):
        object.__setattr__(self, "weights_mode", BlendMode(self.weights_mode))
        if not self.n_frames:
            start, length = self.segments[-1]
            object.__setattr__(self, "n_frames", start + length)

    def __len__(self) -> int:
        return len(self.segments)

    def weights(self) -> np.ndarray:
        """(n_segments, n_frames) per-frame blend weights; zero outside a segment."""
        n = self.n_frames
        k = len(self.segments)
        raw = np.zeros((k, n), dtype=np.float64)
        for i, (start, length) in enumerate(self.segments):
            end = start + length
            f = np.arange(start, end, dtype=np.float64)
            w = np.ones(length, dtype=np.float64)
            if i > 0:
                prev_end = sum(self.segments[i - 1])
                ov = prev_end - start
                if ov > 0:
                    w *= np.where(f < prev_end, (f - start + 1) / (ov + 1), 1.0)
            if i < k - 1:
                next_start = self.segments[i + 1][0]
                ov = end - next_start
                if ov > 0:
                    w *= np.where(f >= next_start, (end - f) / (ov + 1), 1.0)
            raw[i, start:end] = w
        if self.weights_mode is BlendMode.MEAN:
            return raw / raw.sum(axis=0, keepdims=True)
        return raw / np.sqrt((raw**2).sum(axis=0, keepdims=True))


def segment_plan(n_frames: int, seg_len: int = 64, mode: BlendMode | str = BlendMode.INDEPENDENT) -> SegmentPlan:
    """Fewest `seg_len` windows covering [0, n_frames), overlaps spread evenly."""
    if seg_len < 2:
        raise VolumeError("segment length must be at least 2")
    if n_frames < seg_len:
        raise VolumeError(f"{n_frames} frames is shorter than one segment ({seg_len}); interpolate first")
    k = max(1, math.ceil((n_frames - 1) / (seg_len - 1)))
    if k == 1:
        starts = [0]
    else:
        span = n_frames - seg_len
        starts = [int(round(i * span / (k - 1))) for i in range(k)]
    return SegmentPlan(tuple((s, seg_len) for s in starts), BlendMode(mode), n_frames)


def blend_segments(per_segment_preds: Sequence[np.ndarray], plan: SegmentPlan) -> np.ndarray:
    """Weighted per-frame combination of per-segment (seg_len, h, w, c) arrays."""
    preds = [p.data if isinstance(p, VideoVolume) else np.asarray(p) for p in per_segment_preds]
    if len(preds) != len(plan):
        raise VolumeError(f"{len(preds)} predictions for {len(plan)} segments")
    tail = preds[0].shape[1:]
    for p, (_, length) in zip(preds, plan.segments):
        if p.shape[0] != length or p.shape[1:] != tail:
            raise VolumeError(f"prediction shape {p.shape} does not match segment length {length}")
    if len(preds) == 1:
        return preds[0]
    w = plan.weights()
    out = np.zeros((plan.n_frames,) + tail, dtype=np.float64)
    for i, (p, (start, length)) in enumerate(zip(preds, plan.segments)):
        out[start : start + length] += w[i, start : start + length, None, None, None] * p
    return out.astype(preds[0].dtype)
