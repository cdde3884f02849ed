"""How well does an image denoiser predict noise added to video frames,
to y-t slices, and to pixel-permuted frames, across noise levels?

Synthetic separable AR(1) Gaussian videos stand in for encoded natural
videos, so a closed-form denoiser with an image prior plays the role of a
pretrained image model.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .denoisers import NULL_PROMPT, Denoiser
from .denoisers.analytic import _ar1_cholesky
from .schedule import NoiseSchedule
from .stvolume import Axis, Slice2D, VideoVolume, permute_pixels

KINDS = ("frame", "yt_slice", "permuted")


@dataclass(frozen=True)
class MseRow:
    alpha_bar: float
    kind: str
    mse: float
    n: int


@dataclass
class MseReport:
    rows: list[MseRow] = field(default_factory=list)

    @property
    def alphas(self) -> list[float]:
        return sorted({r.alpha_bar for r in self.rows}, reverse=True)

    def mse(self, kind: str, alpha_bar: float) -> float:
        for r in self.rows:
            if r.kind == kind and np.isclose(r.alpha_bar, alpha_bar, rtol=0, atol=1e-12):
                return r.mse
        raise KeyError((kind, alpha_bar))

    def series(self, kind: str) -> tuple[np.ndarray, np.ndarray]:
        pts = sorted((r.alpha_bar, r.mse) for r in self.rows if r.kind == kind)
        return np.array([p[0] for p in pts]), np.array([p[1] for p in pts])

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["alpha_bar", "kind", "mse", "n"])
            for r in self.rows:
                writer.writerow([repr(r.alpha_bar), r.kind, repr(r.mse), r.n])

    @classmethod
    def read_csv(cls, path: str | Path) -> "MseReport":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            return cls([MseRow(float(r["alpha_bar"]), r["kind"], float(r["mse"]), int(r["n"])) for r in reader])


def synthetic_videos(
    n_videos: int,
    n_frames: int = 16,
    height: int = 16,
    width: int = 16,
    channels: int = 1,
    rho_t: float = 0.9,
    rho_s: float = 0.6,
    seed: int = 0,
) -> np.ndarray:
    """Unit-variance Gaussian videos with correlation rho_t^|dt| rho_s^|dy| rho_s^|dx|."""
    rng = np.random.default_rng(seed)
    white = rng.standard_normal((n_videos, n_frames, height, width, channels))
    Lt = _ar1_cholesky(n_frames, rho_t)
    Ly = _ar1_cholesky(height, rho_s)
    Lx = _ar1_cholesky(width, rho_s)
    out = np.einsum("ai,nijkc->najkc", Lt, white)
    out = np.einsum("bj,najkc->nabkc", Ly, out)
    out = np.einsum("ck,nabkd->nabcd", Lx, out)
    return out.astype(np.float32)


def default_alphas(sched: NoiseSchedule, n: int = 10) -> list[float]:
    """alpha_bar at `n` evenly spaced steps of `sched`, cleanest first."""
    taus = np.unique(np.round(np.linspace(1, sched.T, n)).astype(int))
    return [float(sched.alpha_bar[t]) for t in taus]


def slice_mse_experiment(
    videos: np.ndarray | Sequence[VideoVolume],
    denoiser: Denoiser,
    alphas: Sequence[float],
    n_samples: int,
    seed: int = 0,
) -> MseReport:
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    if isinstance(videos, np.ndarray):
        data = videos if videos.ndim == 5 else videos[None]
    else:
        data = np.stack([v.data if isinstance(v, VideoVolume) else np.asarray(v) for v in videos])
    n_videos, n_frames, h, w, c = data.shape

    rng = np.random.default_rng(seed)
    vid = rng.integers(0, n_videos, n_samples)
    t_idx = rng.integers(0, n_frames, n_samples)
    x_idx = rng.integers(0, w, n_samples)
    perm_seeds = rng.integers(0, 2**31 - 1, n_samples)

    frames = data[vid, t_idx]  # (n, h, w, c)
    yt = data[vid, :, :, x_idx]  # (n, t, h, c)
    permuted = np.stack(
        [permute_pixels(Slice2D(frames[i], Axis.XY, int(t_idx[i])), int(perm_seeds[i])).data for i in range(n_samples)]
    )
    inputs = {"frame": frames, "yt_slice": yt, "permuted": permuted}

    report = MseReport()
    for a_idx, ab in enumerate(alphas):
        noise_rng = np.random.default_rng([seed, a_idx])
        eps_frame = noise_rng.standard_normal(frames.shape).astype(np.float32)
        # common noise across kinds wherever shapes allow, to sharpen comparisons
        eps_yt = eps_frame if yt.shape == frames.shape else noise_rng.standard_normal(yt.shape).astype(np.float32)
        noises = {"frame": eps_frame, "yt_slice": eps_yt, "permuted": eps_frame}
        for kind in KINDS:
            x0, eps = inputs[kind], noises[kind]
            x_t = (np.sqrt(ab) * x0.astype(np.float64) + np.sqrt(1.0 - ab) * eps).astype(np.float32)
            pred = denoiser.predict(x_t, float(ab), NULL_PROMPT)
            err = (pred.astype(np.float64) - eps) ** 2
            report.rows.append(MseRow(float(ab), kind, float(err.mean()), n_samples))
    return report
