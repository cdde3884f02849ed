"""Noise predictors behind one interface.

Any object with ``predict(x, alpha_bar, prompt, control=None)`` taking a
(B, rows, cols, c) float32 batch and returning a same-shape noise estimate
can drive the pipeline. ``kind`` names the implementation.
"""

from __future__ import annotations

from typing import Protocol

import numpy as np

from ..schedule import NoiseSchedule
from ..stvolume import Slice2D
from .analytic import AnalyticDenoiser, GaussianPrior, analytic_mmse, expected_mse, linear_predictor_mse
from .prompts import NULL_PROMPT, PromptEmbedding, embed_prompt
from .unet import GeometryError, ToyUNet, toy_unet


class Denoiser(Protocol):
    kind: str

    def predict(self, x: np.ndarray, alpha_bar: float, prompt: PromptEmbedding, control=None) -> np.ndarray: ...


def predict_noise(
    d: Denoiser,
    x: Slice2D | np.ndarray,
    tau: int,
    p: PromptEmbedding,
    sched: NoiseSchedule,
    control=None,
) -> np.ndarray:
    """Noise estimate for one slice (rows, cols, c) or a batch of them at step `tau`."""
    sched.check_step(tau)
    data = x.data if isinstance(x, Slice2D) else np.asarray(x)
    single = data.ndim == 3
    batch = data[None] if single else data
    out = d.predict(batch.astype(np.float32, copy=False), float(sched.alpha_bar[tau]), p, control)
    if out.shape != batch.shape:
        raise GeometryError(f"denoiser returned {out.shape} for input {batch.shape}")
    return out[0] if single else out


def cfg(eps_cond, eps_uncond, s: float):
    """Classifier-free guidance. s == 1 returns the conditional branch as is."""
    if np.shape(eps_cond) != np.shape(eps_uncond):
        raise ValueError(f"guidance branches differ in shape: {np.shape(eps_cond)} vs {np.shape(eps_uncond)}")
    if s == 1:
        return eps_cond
    return eps_uncond + s * (eps_cond - eps_uncond)


__all__ = [
    "AnalyticDenoiser",
    "Denoiser",
    "GaussianPrior",
    "GeometryError",
    "NULL_PROMPT",
    "PromptEmbedding",
    "ToyUNet",
    "analytic_mmse",
    "cfg",
    "embed_prompt",
    "expected_mse",
    "linear_predictor_mse",
    "predict_noise",
    "toy_unet",
]
