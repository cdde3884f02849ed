"""End-to-end video editing: volume inversion into per-step noise volumes,
attention capture, guided sampling with attention injection, and the
codec / interpolation / segmentation plumbing around them."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .attention import AttentionCache
from .denoisers import Denoiser, PromptEmbedding, embed_prompt, toy_unet
from .formats import read_stw1, write_stw1
from .inflated import InflationConfig, epsilon_V
from .schedule import NoiseSchedule, ScheduleError, forward_noise, ddim_invert_step, mu_hat, make_schedule
from .stvolume import BlendMode, Space, VideoVolume, blend_segments, segment_plan

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


CODECS = ("identity", "pool2")


@dataclass(frozen=True)
class EditConfig:
    T: int = 50
    T_skip: int = 8
    gamma: float = 0.8
    inject_fraction: float = 0.85
    cfg_strength_EA: float = 10.0
    cfg_strength_S: float = 1.0
    seg_len: int = 64
    eta: float = 1.0
    seed: int = 0
    codec: str = "identity"
    train_steps: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012
    xt_slices: bool = False
    blend_mode: str = "independent"
    inject_layers: str = "up1.attn"

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError("T must be at least 1")
        if not 0 <= self.T_skip < self.T:
            raise ConfigError(f"need 0 <= T_skip < T, got T_skip={self.T_skip}, T={self.T}")
        if not 0.0 <= self.inject_fraction <= 1.0:
            raise ConfigError("inject_fraction must lie in [0, 1]")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError("eta must lie in [0, 1]")
        if self.cfg_strength_EA < 0 or self.cfg_strength_S < 0:
            raise ConfigError("guidance strengths must be non-negative")
        if self.seg_len < 2:
            raise ConfigError("seg_len must be at least 2")
        if self.codec not in CODECS:
            raise ConfigError(f"codec must be one of {CODECS}")
        if self.blend_mode not in {m.value for m in BlendMode}:
            raise ConfigError(f"blend_mode must be 'mean' or 'independent'")
        if self.train_steps and self.train_steps < self.T:
            raise ConfigError("train_steps must be 0 (no striding) or >= T")

    # -- config text ---------------------------------------------------
    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    def replace(self, **changes) -> "EditConfig":
        return dataclasses.replace(self, **changes)

    def with_overrides(self, pairs: dict[str, str]) -> "EditConfig":
        types = {f.name: f.type for f in dataclasses.fields(self)}
        changes = {}
        for key, raw in pairs.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            changes[key] = _coerce(key, types[key], raw)
        return self.replace(**changes)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in dataclasses.asdict(self).items())

    @classmethod
    def from_text(cls, text: str, base: "EditConfig | None" = None) -> "EditConfig":
        return (base or cls()).with_overrides(parse_config_text(text))

    @classmethod
    def from_file(cls, path: str | Path, base: "EditConfig | None" = None) -> "EditConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), base)

    # -- derived objects ------------------------------------------------
    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end, self.eta, self.train_steps or None)

    def inflation(self, p_src: PromptEmbedding, p_tar: PromptEmbedding | None = None) -> InflationConfig:
        return InflationConfig(
            gamma=self.gamma,
            cfg_strength_EA=self.cfg_strength_EA,
            cfg_strength_S=self.cfg_strength_S,
            use_xt_slices=self.xt_slices,
            p_src=p_src,
            p_tar=p_tar if p_tar is not None else p_src,
        )

    @property
    def layers(self) -> frozenset[str]:
        return frozenset(s.strip() for s in self.inject_layers.split(",") if s.strip())


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        short = f"{v:g}"
        return short if float(short) == v else repr(v)
    return str(v)


def _coerce(key: str, typ, raw: str):
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None
    return raw


def parse_config_text(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in stripped.split("=", 1))
        if key not in EditConfig.field_names():
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        pairs[key] = value
    return pairs


# -- step planning ---------------------------------------------------------


def sampling_plan(config: EditConfig) -> list[tuple[int, bool]]:
    """(tau, inject?) for every executed sampling step, noisiest first."""
    start = config.T - config.T_skip
    n_inject = math.ceil(round(config.inject_fraction * start, 9))
    return [(tau, i < n_inject) for i, tau in enumerate(range(start, 0, -1))]


def capture_steps(config: EditConfig) -> set[int]:
    if config.gamma == 0.0:
        return set()
    return {tau for tau, inject in sampling_plan(config) if inject}


# -- codec and interpolation -------------------------------------------------


def encode(video, codec: str = "identity") -> np.ndarray:
    data = video.data if isinstance(video, VideoVolume) else np.asarray(video, dtype=np.float32)
    if codec == "identity":
        return np.array(data, dtype=np.float32)
    if codec == "pool2":
        n, h, w, c = data.shape
        if h % 2 or w % 2:
            raise InputError(f"pool2 codec needs even frame size, got {h}x{w}")
        return data.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4), dtype=np.float64).astype(np.float32)
    raise ConfigError(f"unknown codec {codec!r}")


def decode(latent, codec: str = "identity") -> np.ndarray:
    data = latent.data if isinstance(latent, VideoVolume) else np.asarray(latent, dtype=np.float32)
    if codec == "identity":
        return np.array(data, dtype=np.float32)
    if codec == "pool2":
        return np.repeat(np.repeat(data, 2, axis=1), 2, axis=2)
    raise ConfigError(f"unknown codec {codec!r}")


def interpolate_frames(video) -> np.ndarray:
    """Midpoint interpolation to 2n frames (2n - 1 plus a repeated last frame)."""
    data = video.data if isinstance(video, VideoVolume) else np.asarray(video, dtype=np.float32)
    n = data.shape[0]
    if n < 2:
        raise InputError("interpolation needs at least two frames")
    out = np.empty((2 * n,) + data.shape[1:], dtype=data.dtype)
    out[0::2] = data
    out[1:-1:2] = (0.5 * (data[:-1].astype(np.float64) + data[1:])).astype(data.dtype)
    out[-1] = data[-1]
    return out


def subsample_frames(data: np.ndarray, n: int) -> np.ndarray:
    return np.ascontiguousarray(data[::2][:n])


# -- inversion and sampling --------------------------------------------------


class VideoDenoiser:
    """Inflated denoiser over a whole latent volume, segmenting and blending
    when the video is longer than the slice geometry."""

    def __init__(self, denoiser: Denoiser, config: EditConfig, sched: NoiseSchedule | None = None):
        self.denoiser = denoiser
        self.config = config
        self.sched = sched or config.schedule()

    def __call__(self, volume: np.ndarray, tau: int, prompt: PromptEmbedding, cache=None, mode=None) -> np.ndarray:
        cfg = self.config
        plan = segment_plan(volume.shape[0], cfg.seg_len, cfg.blend_mode)
        inflation = cfg.inflation(prompt)
        preds = []
        for start, length in plan.segments:
            preds.append(
                epsilon_V(
                    self.denoiser, volume[start : start + length], tau, self.sched, inflation, prompt,
                    cache=cache, mode=mode, layers=cfg.layers, frame_offset=start,
                    scope="" if len(plan) == 1 else f"seg{start}:", seg_len=cfg.seg_len,
                )
            )
        return blend_segments(preds, plan)


@dataclass
class InversionRecord:
    xs: np.ndarray  # (T + 1, n, h, w, c): clean volume, then the noisy trajectory
    Z: np.ndarray | None  # (T, n, h, w, c); Z[tau - 1] is the noise extracted at tau
    cache: AttentionCache
    config: EditConfig
    p_src: PromptEmbedding
    kind: str = "ddpm"
    denoiser: Denoiser | None = field(default=None, repr=False, compare=False)

    @property
    def x_T(self) -> np.ndarray:
        return self.xs[-1]

    @property
    def T(self) -> int:
        return self.xs.shape[0] - 1

    def z(self, tau: int) -> np.ndarray:
        if self.Z is None:
            raise ValueError("a DDIM record carries no extracted noise")
        return self.Z[tau - 1]

    def save(self, path: str | Path) -> None:
        tensors = {f"xs/{t}": self.xs[t] for t in range(self.xs.shape[0])}
        if self.Z is not None:
            tensors.update({f"Z/{t + 1}": self.Z[t] for t in range(self.Z.shape[0])})
        tensors.update(self.cache.to_tensors())
        write_stw1(path, tensors)
        meta = {"kind": self.kind, "p_src": self.p_src.source_text, "config": dataclasses.asdict(self.config)}
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "InversionRecord":
        tensors = read_stw1(path)
        meta = json.loads(Path(str(path) + ".json").read_text(encoding="utf-8"))
        config = EditConfig(**meta["config"])
        xs = np.stack([tensors[f"xs/{t}"] for t in range(config.T + 1)])
        Z = None
        if meta["kind"] == "ddpm":
            Z = np.stack([tensors[f"Z/{t}"] for t in range(1, config.T + 1)])
        return cls(xs, Z, AttentionCache.from_tensors(tensors), config, embed_prompt(meta["p_src"]), meta["kind"])


def default_denoiser(channels: int, seed: int = 0) -> Denoiser:
    return toy_unet(channels, seed)


def _latent_array(latent) -> np.ndarray:
    data = latent.data if isinstance(latent, VideoVolume) else np.asarray(latent)
    if data.ndim != 4:
        raise InputError(f"expected a (t, y, x, c) latent volume, got shape {data.shape}")
    return np.array(data, dtype=np.float32)


def invert(
    latent_volume,
    p_src: PromptEmbedding,
    config: EditConfig,
    denoiser: Denoiser | None = None,
    progress: Callable[[str, int], None] | None = None,
) -> InversionRecord:
    """Edit-friendly DDPM inversion of the whole volume.

    Builds independently noised volumes I_tau, then extracts
    z_tau = (I_{tau-1} - mu_hat(I_tau)) / sigma_tau with the inflated denoiser,
    capturing attention at the steps sampling will inject into. Where
    sigma_tau = 0 (tau = 1) the residual itself is stored.
    """
    if config.eta == 0.0:
        raise ScheduleError("DDPM inversion needs eta > 0; use invert_ddim for the deterministic sampler")
    I0 = _latent_array(latent_volume)
    if I0.shape[0] < config.seg_len:
        raise InputError(f"{I0.shape[0]} frames is shorter than seg_len={config.seg_len}")
    denoiser = denoiser or default_denoiser(I0.shape[-1], config.seed)
    sched = config.schedule()
    vd = VideoDenoiser(denoiser, config, sched)
    rng = np.random.default_rng(config.seed)
    T = config.T
    xs = np.empty((T + 1,) + I0.shape, dtype=np.float32)
    xs[0] = I0
    for tau in range(1, T + 1):
        xs[tau] = forward_noise(I0, tau, rng.standard_normal(I0.shape).astype(np.float32), sched)
    Z = np.empty((T,) + I0.shape, dtype=np.float32)
    cache = AttentionCache()
    to_capture = capture_steps(config)
    for tau in range(1, T + 1):
        mode = "capture" if tau in to_capture else None
        eps = vd(xs[tau], tau, p_src, cache=cache if mode else None, mode=mode)
        mu = mu_hat(xs[tau], eps, tau, sched)
        Z[tau - 1] = ((xs[tau - 1].astype(np.float64) - mu) / sched.noise_scale(tau)).astype(np.float32)
        if progress:
            progress("invert", tau)
    log.debug("inversion done: %d steps, %d cached attention entries", T, len(cache))
    return InversionRecord(xs, Z, cache, config, p_src, "ddpm", denoiser)


def invert_ddim(
    latent_volume,
    p_src: PromptEmbedding,
    config: EditConfig,
    denoiser: Denoiser | None = None,
    progress: Callable[[str, int], None] | None = None,
) -> InversionRecord:
    """Deterministic DDIM inversion (ablation path); no noise is extracted."""
    I0 = _latent_array(latent_volume)
    if I0.shape[0] < config.seg_len:
        raise InputError(f"{I0.shape[0]} frames is shorter than seg_len={config.seg_len}")
    denoiser = denoiser or default_denoiser(I0.shape[-1], config.seed)
    sched = config.schedule()
    vd = VideoDenoiser(denoiser, config, sched)
    T = config.T
    xs = np.empty((T + 1,) + I0.shape, dtype=np.float32)
    xs[0] = I0
    for tau in range(1, T + 1):
        xs[tau] = ddim_invert_step(xs[tau - 1], vd(xs[tau - 1], tau, p_src), tau, sched)
        if progress:
            progress("invert", tau)
    cache = AttentionCache()
    for tau in sorted(capture_steps(config)):
        vd(xs[tau], tau, p_src, cache=cache, mode="capture")
    return InversionRecord(xs, None, cache, config, p_src, "ddim", denoiser)


def sample(
    record: InversionRecord,
    p_tar: PromptEmbedding,
    config: EditConfig | None = None,
    denoiser: Denoiser | None = None,
    progress: Callable[[str, int], None] | None = None,
) -> np.ndarray:
    """Sample from the inversion trajectory at T - T_skip down to 0, reusing
    the extracted noise and injecting source attention on the earliest steps."""
    config = config or record.config
    if config.T != record.T:
        raise ConfigError(f"record has {record.T} steps, config asks for {config.T}")
    denoiser = denoiser or record.denoiser or default_denoiser(record.xs.shape[-1], config.seed)
    sched = config.schedule()
    vd = VideoDenoiser(denoiser, config, sched)
    plan = sampling_plan(config)
    J = np.array(record.xs[config.T - config.T_skip], dtype=np.float32)
    deterministic = record.kind == "ddim" or config.eta == 0.0
    for tau, inject in plan:
        inject = inject and config.gamma > 0.0
        eps = vd(J, tau, p_tar, cache=record.cache if inject else None, mode="inject" if inject else None)
        mu = mu_hat(J, eps, tau, sched)
        if deterministic:
            J = mu
        else:
            J = (mu.astype(np.float64) + sched.noise_scale(tau) * record.z(tau).astype(np.float64)).astype(np.float32)
        if progress:
            progress("sample", tau)
    return J


def edit(
    video: VideoVolume | np.ndarray,
    p_src_text: str,
    p_tar_text: str,
    config: EditConfig,
    denoiser: Denoiser | None = None,
    interpolator: Callable[[np.ndarray], np.ndarray] = interpolate_frames,
    progress: Callable[[str, int], None] | None = None,
    record_path: str | Path | None = None,
) -> VideoVolume:
    vol = video if isinstance(video, VideoVolume) else VideoVolume(video, Space.PIXEL)
    n = vol.n_frames
    min_frames = math.ceil(config.seg_len / 2)
    if n < min_frames:
        raise InputError(f"need at least {min_frames} frames, got {n}")
    frames = vol.data
    interpolated = n < config.seg_len
    if interpolated:
        frames = interpolator(frames)
        log.info("interpolated %d frames to %d", n, frames.shape[0])
    latent = encode(frames, config.codec)
    denoiser = denoiser or default_denoiser(latent.shape[-1], config.seed)
    p_src, p_tar = embed_prompt(p_src_text), embed_prompt(p_tar_text)
    log.info("segments: %s", segment_plan(latent.shape[0], config.seg_len, config.blend_mode).segments)
    if config.eta == 0.0:
        record = invert_ddim(latent, p_src, config, denoiser, progress)
    else:
        record = invert(latent, p_src, config, denoiser, progress)
    if record_path is not None:
        record.save(record_path)
    out = decode(sample(record, p_tar, config, denoiser, progress), config.codec)
    if interpolated:
        out = subsample_frames(out, n)
    if vol.space is Space.PIXEL:
        out = np.clip(out, -1.0, 1.0)
    return VideoVolume(out, vol.space)
