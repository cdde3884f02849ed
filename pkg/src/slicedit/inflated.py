"""The inflated video denoiser.

Frames go through the image denoiser with extended attention and
prompt guidance; y-t slices (optionally also x-t slices) go through the
plain denoiser with the empty prompt. The two noise volumes are mixed with
sqrt(gamma) / sqrt(1 - gamma) weights so unit-variance inputs stay unit
variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionCache, AttentionControl, keyframe_sets
from .denoisers import NULL_PROMPT, Denoiser, PromptEmbedding, cfg, predict_noise
from .denoisers.unet import UP_ATTN_LAYERS, GeometryError
from .schedule import NoiseSchedule
from .stvolume import Axis, VideoVolume, slice_stack, unstack_slices


@dataclass(frozen=True)
class InflationConfig:
    gamma: float = 0.8
    cfg_strength_EA: float = 10.0
    cfg_strength_S: float = 1.0
    use_xt_slices: bool = False
    p_src: PromptEmbedding = field(default=NULL_PROMPT)
    p_tar: PromptEmbedding = field(default=NULL_PROMPT)

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.cfg_strength_EA < 0 or self.cfg_strength_S < 0:
            raise ValueError("guidance strengths must be non-negative")


def _data(volume) -> np.ndarray:
    return volume.data if isinstance(volume, VideoVolume) else np.asarray(volume, dtype=np.float32)


def combine_weights(gamma: float) -> tuple[float, float]:
    return math.sqrt(gamma), math.sqrt(1.0 - gamma)


def epsilon_EA(
    denoiser: Denoiser,
    latent_volume,
    tau: int,
    sched: NoiseSchedule,
    prompt: PromptEmbedding,
    strength: float = 10.0,
    cache: AttentionCache | None = None,
    mode: str | None = None,
    layers=UP_ATTN_LAYERS,
    frame_offset: int = 0,
    scope: str = "",
) -> np.ndarray:
    """Per-frame noise prediction with extended attention over each frame's
    key-frames, guided against the empty prompt.

    `mode` is None, "capture" or "inject"; only the conditional branch
    captures or injects.
    """
    frames = _data(latent_volume)
    if mode is not None and cache is None:
        raise ValueError(f"attention {mode} needs a cache")
    n = frames.shape[0]
    keysets = keyframe_sets(n)
    ids = [frame_offset + i for i in range(n)]
    cond_ctl = AttentionControl(tau, ids, keysets, cache, mode, frozenset(layers), scope)
    eps_cond = predict_noise(denoiser, frames, tau, prompt, sched, cond_ctl)
    if strength == 1:
        return eps_cond
    eps_uncond = predict_noise(denoiser, frames, tau, NULL_PROMPT, sched, AttentionControl(tau, ids, keysets))
    return cfg(eps_cond, eps_uncond, strength)


def _slice_branch(denoiser, data, axis, tau, sched, strength):
    batch = slice_stack(data, axis)
    eps = predict_noise(denoiser, batch, tau, NULL_PROMPT, sched)
    # conditional and unconditional branches coincide under the empty prompt
    eps = cfg(eps, eps, strength)
    return unstack_slices(eps, axis)


def epsilon_S(
    denoiser: Denoiser,
    latent_volume,
    tau: int,
    sched: NoiseSchedule,
    use_xt_slices: bool = False,
    strength: float = 1.0,
    seg_len: int | None = None,
) -> np.ndarray:
    data = _data(latent_volume)
    if seg_len is not None and data.shape[0] != seg_len:
        raise GeometryError(f"slice denoising expects {seg_len} frames, got {data.shape[0]}")
    eps_yt = _slice_branch(denoiser, data, Axis.YT, tau, sched, strength)
    if not use_xt_slices:
        return eps_yt
    eps_xt = _slice_branch(denoiser, data, Axis.XT, tau, sched, strength)
    return ((eps_yt.astype(np.float64) + eps_xt) / math.sqrt(2.0)).astype(np.float32)


def combine(eps_ea, eps_s, gamma: float) -> np.ndarray:
    a, b = combine_weights(gamma)
    if eps_s is None:
        return np.asarray(eps_ea) if a == 1.0 else (a * np.asarray(eps_ea, np.float64)).astype(np.float32)
    if eps_ea is None:
        return np.asarray(eps_s) if b == 1.0 else (b * np.asarray(eps_s, np.float64)).astype(np.float32)
    if np.shape(eps_ea) != np.shape(eps_s):
        raise ValueError(f"branch shapes differ: {np.shape(eps_ea)} vs {np.shape(eps_s)}")
    out = a * np.asarray(eps_ea, np.float64) + b * np.asarray(eps_s, np.float64)
    return out.astype(np.result_type(eps_ea, np.float32))


def epsilon_V(
    denoiser: Denoiser,
    latent_volume,
    tau: int,
    sched: NoiseSchedule,
    config: InflationConfig,
    prompt: PromptEmbedding | None = None,
    cache: AttentionCache | None = None,
    mode: str | None = None,
    layers=UP_ATTN_LAYERS,
    frame_offset: int = 0,
    scope: str = "",
    seg_len: int | None = None,
) -> np.ndarray:
    """sqrt(gamma) * frame branch + sqrt(1 - gamma) * slice branch.

    A branch with zero weight is not evaluated.
    """
    prompt = config.p_src if prompt is None else prompt
    eps_ea = eps_s = None
    if config.gamma > 0.0:
        eps_ea = epsilon_EA(
            denoiser, latent_volume, tau, sched, prompt, config.cfg_strength_EA,
            cache, mode, layers, frame_offset, scope,
        )
    if config.gamma < 1.0:
        eps_s = epsilon_S(denoiser, latent_volume, tau, sched, config.use_xt_slices, config.cfg_strength_S, seg_len)
    return combine(eps_ea, eps_s, config.gamma)
