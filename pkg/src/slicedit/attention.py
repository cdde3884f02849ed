"""Reference attention math, key-frame selection for extended attention, and
the query/key cache used to carry source-video attention into editing.

The numpy functions here are the readable reference; the toy U-Net runs the
same math in torch and is tested against them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

WINDOW = 6
# 1-based positions 2 and 5 inside each processing window
LOCAL_OFFSETS = (1, 4)


class CacheMiss(KeyError):
    pass


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass(frozen=True)
class AttentionTensors:
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    W_Q: np.ndarray | None = None
    W_K: np.ndarray | None = None
    W_V: np.ndarray | None = None


def attention_weights(Q: np.ndarray, K: np.ndarray) -> np.ndarray:
    if Q.shape[-1] != K.shape[-1]:
        raise ValueError(f"query dim {Q.shape[-1]} != key dim {K.shape[-1]}")
    d = Q.shape[-1]
    return softmax(Q @ K.T / np.sqrt(d))


def self_attention(at: AttentionTensors) -> np.ndarray:
    if at.K.shape[0] != at.V.shape[0]:
        raise ValueError(f"{at.K.shape[0]} keys but {at.V.shape[0]} values")
    return attention_weights(at.Q, at.K) @ at.V


def project(latent: np.ndarray, W_Q: np.ndarray, W_K: np.ndarray, W_V: np.ndarray) -> AttentionTensors:
    """Tokens (n, c) -> queries, keys and values through (c, d) projections."""
    return AttentionTensors(latent @ W_Q, latent @ W_K, latent @ W_V, W_Q, W_K, W_V)


def extended_attention(
    frame_latent: np.ndarray,
    keyframe_latents: Sequence[np.ndarray],
    weights: tuple[np.ndarray, np.ndarray, np.ndarray],
) -> np.ndarray:
    """Queries from one frame; keys and values from the concatenated key-frames.

    `frame_latent` and each key-frame are (n_tokens, c) token matrices;
    `weights` are the (W_Q, W_K, W_V) projections.
    """
    if len(keyframe_latents) == 0:
        raise ValueError("extended attention needs at least one key-frame")
    shapes = {np.shape(k) for k in keyframe_latents} | {np.shape(frame_latent)}
    if len(shapes) != 1:
        raise ValueError(f"key-frame geometries differ: {sorted(shapes)}")
    W_Q, W_K, W_V = weights
    stacked = np.concatenate(list(keyframe_latents), axis=0)
    return self_attention(AttentionTensors(frame_latent @ W_Q, stacked @ W_K, stacked @ W_V, W_Q, W_K, W_V))


@dataclass(frozen=True)
class KeyFramePlan:
    global_frame: int
    local_frames: tuple[int, int]
    window: tuple[int, int]  # (start, length)


def select_keyframes(window_start: int, n_frames: int, window: int = WINDOW) -> KeyFramePlan:
    if n_frames < 1 or not 0 <= window_start < n_frames:
        raise ValueError(f"window start {window_start} outside a {n_frames}-frame video")
    length = min(window, n_frames - window_start)
    last = window_start + length - 1
    locals_ = tuple(min(window_start + off, last) for off in LOCAL_OFFSETS)
    return KeyFramePlan(n_frames // 2, locals_, (window_start, length))


def window_starts(n_frames: int, window: int = WINDOW) -> range:
    return range(0, n_frames, window)


def keyframe_sets(n_frames: int, window: int = WINDOW) -> list[list[int]]:
    """Per frame, the ordered unique frames its keys/values come from:
    the frame itself, the global key-frame, then the two local key-frames."""
    sets: list[list[int]] = []
    for start in window_starts(n_frames, window):
        plan = select_keyframes(start, n_frames, window)
        for f in range(start, start + plan.window[1]):
            sets.append(list(dict.fromkeys([f, plan.global_frame, *plan.local_frames])))
    return sets


class AttentionCache:
    """Write-once store of (Q, K) per (timestep, layer, frame)."""

    def __init__(self):
        self._store: dict[tuple[int, str, int], tuple[np.ndarray, np.ndarray]] = {}

    def capture(self, tau: int, layer: str, frame: int, Q: np.ndarray, K: np.ndarray) -> None:
        key = (int(tau), str(layer), int(frame))
        if key in self._store:
            raise ValueError(f"attention for {key} already captured")
        q = np.array(Q, copy=True)
        k = np.array(K, copy=True)
        q.flags.writeable = False
        k.flags.writeable = False
        self._store[key] = (q, k)

    def lookup(self, tau: int, layer: str, frame: int) -> tuple[np.ndarray, np.ndarray]:
        key = (int(tau), str(layer), int(frame))
        try:
            return self._store[key]
        except KeyError:
            raise CacheMiss(f"no captured attention for step {tau}, layer {layer!r}, frame {frame}") from None

    inject = lookup

    def __contains__(self, key) -> bool:
        return key in self._store

    def __len__(self) -> int:
        return len(self._store)

    def __iter__(self) -> Iterator[tuple[int, str, int]]:
        return iter(self._store)

    def items(self):
        return self._store.items()

    def nbytes(self) -> int:
        return sum(q.nbytes + k.nbytes for q, k in self._store.values())

    def to_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for (tau, layer, frame), (q, k) in self._store.items():
            out[f"cache/{tau}/{layer}/{frame}/Q"] = q
            out[f"cache/{tau}/{layer}/{frame}/K"] = k
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> "AttentionCache":
        cache = cls()
        pending: dict[tuple[int, str, int], dict[str, np.ndarray]] = {}
        for name, value in tensors.items():
            if not name.startswith("cache/"):
                continue
            _, tau, rest = name.split("/", 2)
            layer, frame, part = rest.rsplit("/", 2)
            pending.setdefault((int(tau), layer, int(frame)), {})[part] = value
        for (tau, layer, frame), parts in pending.items():
            cache.capture(tau, layer, frame, parts["Q"], parts["K"])
        return cache


@dataclass
class AttentionControl:
    """Per-call routing for a network's named self-attention layers.

    `frames` are the absolute frame ids of the batch items and `keysets` the
    batch indices each item draws keys/values from (None = plain
    self-attention). In "capture" mode the listed `layers` store their
    per-frame Q and K into `cache`; in "inject" mode they read them back.
    """

    tau: int
    frames: Sequence[int]
    keysets: list[list[int]] | None = None
    cache: AttentionCache | None = None
    mode: str | None = None
    layers: frozenset[str] = frozenset()
    scope: str = ""

    def __post_init__(self):
        if self.mode not in (None, "capture", "inject"):
            raise ValueError(f"unknown attention mode {self.mode!r}")
        if self.mode is not None and self.cache is None:
            raise ValueError(f"attention {self.mode} requested without a cache")

    def active(self, layer: str) -> bool:
        return self.mode is not None and layer in self.layers

    def layer_key(self, layer: str) -> str:
        return f"{self.scope}{layer}"
