"""Temporal-consistency evaluation.

Flow error compares the motion of an edited video with the motion of its
source: dense flow between consecutive frames of both, masked to source
pixels whose forward and backward flows agree, averaged as an L2 distance.
Horn-Schunck stands in for a learned flow network.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import ndimage

from .stvolume import VideoVolume

log = logging.getLogger(__name__)

_NEIGHBOUR_MEAN = np.array([[0.0, 0.25, 0.0], [0.25, 0.0, 0.25], [0.0, 0.25, 0.0]])


@dataclass(frozen=True)
class FlowField:
    u: np.ndarray  # horizontal displacement, pixels
    v: np.ndarray  # vertical displacement, pixels

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


def to_gray(frame: np.ndarray) -> np.ndarray:
    """(h, w, c) frame in [-1, 1] -> (h, w) intensity on a 0..255 scale."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 3:
        frame = frame.mean(axis=2)
    return (frame + 1.0) * 127.5


def _derivatives(a: np.ndarray, b: np.ndarray):
    Iy, Ix = np.gradient(0.5 * (a + b))
    return Ix, Iy, b - a


def flow_energy(a, b, flow: FlowField, alpha: float = 10.0) -> float:
    """Data term plus alpha^2/4 times squared differences over 4-neighbour edges,
    the functional the Jacobi update below descends."""
    Ix, Iy, It = _derivatives(to_gray(a), to_gray(b))
    data = np.sum((Ix * flow.u + Iy * flow.v + It) ** 2)
    smooth = 0.0
    for f in (flow.u, flow.v):
        smooth += np.sum(np.diff(f, axis=0) ** 2) + np.sum(np.diff(f, axis=1) ** 2)
    return float(data + alpha**2 / 4.0 * smooth)


def optical_flow(
    frame_a: np.ndarray,
    frame_b: np.ndarray,
    alpha: float = 10.0,
    iters: int = 200,
    callback: Callable[[FlowField], None] | None = None,
) -> FlowField:
    a, b = to_gray(frame_a), to_gray(frame_b)
    if a.shape != b.shape:
        raise ValueError(f"frame sizes differ: {a.shape} vs {b.shape}")
    Ix, Iy, It = _derivatives(a, b)
    denom = alpha**2 + Ix**2 + Iy**2
    u = np.zeros_like(a)
    v = np.zeros_like(a)
    for _ in range(iters):
        u_bar = ndimage.convolve(u, _NEIGHBOUR_MEAN, mode="nearest")
        v_bar = ndimage.convolve(v, _NEIGHBOUR_MEAN, mode="nearest")
        r = (Ix * u_bar + Iy * v_bar + It) / denom
        u = u_bar - Ix * r
        v = v_bar - Iy * r
        if callback is not None:
            callback(FlowField(u, v))
    return FlowField(u, v)


def lr_mask(flow_fwd: FlowField, flow_bwd: FlowField, threshold: float = 1.0) -> np.ndarray:
    """Keep p iff |fwd(p) + bwd(p + fwd(p))| <= threshold; targets that land
    outside the frame are dropped. `bwd` is sampled bilinearly."""
    if flow_fwd.u.shape != flow_bwd.u.shape:
        raise ValueError("forward and backward flows differ in size")
    h, w = flow_fwd.u.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    tx = xx + flow_fwd.u
    ty = yy + flow_fwd.v
    inside = (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    coords = np.stack([ty, tx])
    bu = ndimage.map_coordinates(flow_bwd.u, coords, order=1, mode="nearest")
    bv = ndimage.map_coordinates(flow_bwd.v, coords, order=1, mode="nearest")
    disparity = np.hypot(flow_fwd.u + bu, flow_fwd.v + bv)
    return inside & (disparity <= threshold)


def _frames(video) -> np.ndarray:
    return video.data if isinstance(video, VideoVolume) else np.asarray(video, dtype=np.float32)


def flow_error(src_video, edit_video, alpha: float = 10.0, iters: int = 200, per_pair: list | None = None) -> float:
    """Mean L2 distance between source and edit flows over left-right
    consistent source pixels of every consecutive frame pair."""
    src, edt = _frames(src_video), _frames(edit_video)
    if src.shape != edt.shape:
        raise ValueError(f"videos differ in geometry: {src.shape} vs {edt.shape}")
    total, count = 0.0, 0
    for t in range(src.shape[0] - 1):
        fwd = optical_flow(src[t], src[t + 1], alpha, iters)
        bwd = optical_flow(src[t + 1], src[t], alpha, iters)
        mask = lr_mask(fwd, bwd)
        fe = optical_flow(edt[t], edt[t + 1], alpha, iters)
        dist = np.hypot(fwd.u - fe.u, fwd.v - fe.v)[mask]
        pair_err, n = float(dist.sum()), int(dist.size)
        total += pair_err
        count += n
        if per_pair is not None:
            per_pair.append(pair_err / n if n else float("nan"))
    if count == 0:
        log.warning("no left-right consistent pixels; flow error taken as 0")
        return 0.0
    return total / count


class RandomProjectionEmbedder:
    """Frame -> unit vector: block-average to `grid` x `grid`, append a bias
    feature, project with a seeded Gaussian matrix, normalise."""

    def __init__(self, dim: int = 64, grid: int = 8, seed: int = 0):
        self.dim, self.grid, self.seed = dim, grid, seed
        self._proj: dict[int, np.ndarray] = {}

    def _matrix(self, n_in: int) -> np.ndarray:
        if n_in not in self._proj:
            self._proj[n_in] = np.random.default_rng(self.seed).standard_normal((n_in, self.dim))
        return self._proj[n_in]

    def __call__(self, frame: np.ndarray) -> np.ndarray:
        frame = np.asarray(frame, dtype=np.float64)
        h, w, c = frame.shape
        g = self.grid
        zoom = (g / h, g / w, 1.0)
        small = ndimage.zoom(frame, zoom, order=1) if (h, w) != (g, g) else frame
        feats = np.concatenate([small.ravel(), [1.0]])
        e = feats @ self._matrix(feats.size)
        return e / np.linalg.norm(e)


def embed_consistency(video, embedder: Callable[[np.ndarray], np.ndarray] | None = None) -> float:
    """Mean cosine similarity between embeddings of consecutive frames."""
    frames = _frames(video)
    if frames.shape[0] == 0:
        raise ValueError("empty video")
    if frames.shape[0] == 1:
        return 1.0
    embedder = embedder or RandomProjectionEmbedder()
    embs = [np.asarray(embedder(f), dtype=np.float64) for f in frames]
    sims = []
    for a, b in zip(embs[:-1], embs[1:]):
        sims.append(float(np.clip(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)), -1.0, 1.0)))
    return float(np.mean(sims))
