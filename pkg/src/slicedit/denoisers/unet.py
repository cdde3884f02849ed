"""A small untrained U-Net noise predictor.

Two 2x down/up levels, group-normalised residual blocks and transformer
blocks (self-attention then cross-attention to the prompt tokens) at the
bottleneck and on the half-resolution up block. Each self-attention layer is
named so that extended attention, capture and injection can be routed to it
through an `AttentionControl`.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ..attention import AttentionControl
from ..formats import read_stw1, write_stw1
from .prompts import TOKEN_DIM, PromptEmbedding

INIT_SCALE = 0.02
DOWN_FACTOR = 4
ATTN_LAYERS = ("mid.attn", "up1.attn")
UP_ATTN_LAYERS = ("up1.attn",)


class GeometryError(ValueError):
    pass


def _timestep_embedding(level: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = level[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


def _attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    return torch.softmax(scores, dim=-1) @ v


class SelfAttention(nn.Module):
    def __init__(self, channels: int, dim: int, name: str):
        super().__init__()
        self.name = name
        self.to_q = nn.Linear(channels, dim, bias=False)
        self.to_k = nn.Linear(channels, dim, bias=False)
        self.to_v = nn.Linear(channels, dim, bias=False)
        self.to_out = nn.Linear(dim, channels)

    def forward(self, tokens: torch.Tensor, control: AttentionControl | None) -> torch.Tensor:
        q, k, v = self.to_q(tokens), self.to_k(tokens), self.to_v(tokens)
        if control is not None and control.active(self.name):
            q, k = self._route(q, k, control)
        keysets = control.keysets if control is not None else None
        if keysets is None:
            out = _attend(q, k, v)
        else:
            d, dv = k.shape[-1], v.shape[-1]
            out = torch.stack(
                [_attend(q[b], k[ks].reshape(-1, d), v[ks].reshape(-1, dv)) for b, ks in enumerate(keysets)]
            )
        return self.to_out(out)

    def _route(self, q, k, control: AttentionControl):
        layer = control.layer_key(self.name)
        if control.mode == "capture":
            for b, frame in enumerate(control.frames):
                control.cache.capture(control.tau, layer, frame, q[b].numpy(), k[b].numpy())
            return q, k
        # inject: source queries and per-frame keys replace the target ones;
        # extended keys are then rebuilt from the source keys of each key-frame
        pairs = [control.cache.lookup(control.tau, layer, frame) for frame in control.frames]
        q_src = torch.from_numpy(np.stack([p[0] for p in pairs]))
        k_src = torch.from_numpy(np.stack([p[1] for p in pairs]))
        if q_src.shape != q.shape or k_src.shape != k.shape:
            raise GeometryError(f"cached attention for {layer!r} has shape {tuple(q_src.shape)}, expected {tuple(q.shape)}")
        return q_src, k_src


class CrossAttention(nn.Module):
    def __init__(self, channels: int, dim: int, context_dim: int):
        super().__init__()
        self.to_q = nn.Linear(channels, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, channels)

    def forward(self, tokens, context):
        return self.to_out(_attend(self.to_q(tokens), self.to_k(context), self.to_v(context)))


class TransformerBlock(nn.Module):
    def __init__(self, channels: int, dim: int, groups: int, name: str):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.ln1 = nn.LayerNorm(channels)
        self.attn1 = SelfAttention(channels, dim, name)
        self.ln2 = nn.LayerNorm(channels)
        self.attn2 = CrossAttention(channels, dim, TOKEN_DIM)

    def forward(self, x, context, control):
        B, C, H, W = x.shape
        t = self.norm(x).reshape(B, C, H * W).transpose(1, 2)
        t = t + self.attn1(self.ln1(t), control)
        t = t + self.attn2(self.ln2(t), context)
        return x + t.transpose(1, 2).reshape(B, C, H, W)


class ToyUNet(nn.Module):
    kind = "toy_unet"

    def __init__(self, channels: int = 4, base: int = 32, groups: int = 8, attn_dim: int = 32, seed: int = 0):
        super().__init__()
        self.channels = channels
        self.seed = seed
        temb = 4 * base
        c0, c1 = base, 2 * base
        self.temb_dim = base
        self.time_mlp = nn.Sequential(nn.Linear(base, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(channels, c0, 3, padding=1)
        self.down0 = ResBlock(c0, c0, temb, groups)
        self.pool0 = nn.Conv2d(c0, c0, 3, stride=2, padding=1)
        self.down1 = ResBlock(c0, c1, temb, groups)
        self.pool1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.mid0 = ResBlock(c1, c1, temb, groups)
        self.mid_attn = TransformerBlock(c1, attn_dim, groups, "mid.attn")
        self.mid1 = ResBlock(c1, c1, temb, groups)
        self.up1_conv = nn.Conv2d(c1, c1, 3, padding=1)
        self.up1 = ResBlock(2 * c1, c1, temb, groups)
        self.up1_attn = TransformerBlock(c1, attn_dim, groups, "up1.attn")
        self.up0_conv = nn.Conv2d(c1, c1, 3, padding=1)
        self.up0 = ResBlock(c1 + c0, c0, temb, groups)
        self.norm_out = nn.GroupNorm(groups, c0)
        self.conv_out = nn.Conv2d(c0, channels, 3, padding=1)
        self._init_weights(seed)
        self.eval()
        self.requires_grad_(False)

    def _init_weights(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, (nn.Conv2d, nn.Linear)):
                    module.weight.copy_(torch.randn(module.weight.shape, generator=gen) * INIT_SCALE)
                    if module.bias is not None:
                        module.bias.zero_()

    @property
    def attention_layers(self) -> tuple[str, ...]:
        return ATTN_LAYERS

    @property
    def geometry(self) -> tuple[int, int]:
        """(channels, required spatial divisor)."""
        return (self.channels, DOWN_FACTOR)

    def check_geometry(self, shape) -> None:
        if len(shape) != 4:
            raise GeometryError(f"expected a (B, rows, cols, c) batch, got {tuple(shape)}")
        _, h, w, c = shape
        if c != self.channels:
            raise GeometryError(f"network takes {self.channels} channels, got {c}")
        if h % DOWN_FACTOR or w % DOWN_FACTOR or h == 0 or w == 0:
            raise GeometryError(f"spatial size {h}x{w} must be a positive multiple of {DOWN_FACTOR}")

    def forward(self, x, level, context, control=None):
        emb = self.time_mlp(_timestep_embedding(level, self.temb_dim))
        h0 = self.down0(self.conv_in(x), emb)
        h1 = self.down1(self.pool0(h0), emb)
        h = self.mid0(self.pool1(h1), emb)
        h = self.mid_attn(h, context, control)
        h = self.mid1(h, emb)
        h = self.up1_conv(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.up1(torch.cat([h, h1], dim=1), emb)
        h = self.up1_attn(h, context, control)
        h = self.up0_conv(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.up0(torch.cat([h, h0], dim=1), emb)
        return self.conv_out(F.silu(self.norm_out(h)))

    def predict(self, x: np.ndarray, alpha_bar: float, prompt: PromptEmbedding, control: AttentionControl | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        self.check_geometry(x.shape)
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite denoiser input")
        B = x.shape[0]
        with torch.inference_mode():
            xt = torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))
            level = torch.full((B,), 1000.0 * (1.0 - float(alpha_bar)), dtype=torch.float32)
            context = torch.from_numpy(np.array(prompt.tokens, dtype=np.float32))[None].expand(B, -1, -1)
            out = self.forward(xt, level, context, control)
        return np.ascontiguousarray(out.numpy().transpose(0, 2, 3, 1))

    def weights(self) -> dict[str, np.ndarray]:
        return {k: v.detach().numpy().copy() for k, v in self.state_dict().items()}

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, value in sorted(self.weights().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(value, dtype="<f4").tobytes())
        return h.hexdigest()

    def save_weights(self, path: str | Path) -> None:
        tensors = self.weights()
        tensors["meta/channels"] = np.array([self.channels], dtype=np.float32)
        write_stw1(path, tensors)

    def load_weights(self, tensors: dict[str, np.ndarray]) -> None:
        state = {k: torch.from_numpy(np.array(v)) for k, v in tensors.items() if not k.startswith("meta/")}
        self.load_state_dict(state, strict=True)


def toy_unet(geometry: tuple[int, int, int] | int = 4, seed_or_weights: int | str | Path | dict = 0) -> ToyUNet:
    """Build a toy U-Net for (rows, cols, channels) slices (or a channel count).

    `seed_or_weights` is an init seed, an STW1 path, or a name -> array dict.
    """
    if isinstance(geometry, int):
        channels = geometry
    else:
        h, w, channels = geometry
        if h % DOWN_FACTOR or w % DOWN_FACTOR:
            raise GeometryError(f"geometry {h}x{w} is not divisible by {DOWN_FACTOR}")
    if channels < 1:
        raise GeometryError("need at least one channel")
    if isinstance(seed_or_weights, (int, np.integer)):
        return ToyUNet(channels=channels, seed=int(seed_or_weights))
    tensors = read_stw1(seed_or_weights) if isinstance(seed_or_weights, (str, Path)) else seed_or_weights
    net = ToyUNet(channels=channels, seed=0)
    net.load_weights(tensors)
    return net
