"""Fast invariant checks run by ``slicedit selfcheck``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attention import AttentionTensors, extended_attention, self_attention
from .denoisers import embed_prompt
from .inflated import combine
from .pipeline import EditConfig, invert, sample
from .stvolume import BlendMode, blend_segments, segment_plan


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def check_reconstruction(seed: int = 0) -> CheckResult:
    cfg = EditConfig(T=10, T_skip=0, inject_fraction=1.0, seg_len=16, seed=seed)
    I0 = np.random.default_rng(seed).uniform(-1, 1, (16, 8, 8, 4)).astype(np.float32)
    p = embed_prompt("a man walking")
    J = sample(invert(I0, p, cfg), p, cfg)
    err = float(np.abs(J - I0).max())
    return CheckResult("reconstruction", err < 1e-3, f"max-abs error {err:.2e} (< 1e-3)")


def check_variance(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for gamma in (0.2, 0.5, 0.8):
        a = rng.standard_normal(1_000_000)
        b = rng.standard_normal(1_000_000)
        worst = max(worst, abs(float(combine(a, b, gamma).var()) - 1.0))
    return CheckResult("variance", worst < 0.01, f"worst |var - 1| = {worst:.4f} (< 0.01)")


def check_attention(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(100):
        x = rng.standard_normal((16, 8))
        W = tuple(rng.standard_normal((8, 4)) for _ in range(3))
        ref = self_attention(AttentionTensors(x @ W[0], x @ W[1], x @ W[2]))
        worst = max(worst, float(np.abs(extended_attention(x, [x], W) - ref).max()))
    return CheckResult("attention", worst < 1e-6, f"extended({{self}}) vs self-attention max diff {worst:.1e}")


def check_blend(seed: int = 0) -> CheckResult:
    plan = segment_plan(96, 64, BlendMode.INDEPENDENT)
    rng = np.random.default_rng(seed)
    preds = [rng.standard_normal((64, 128, 128, 1)).astype(np.float32) for _ in plan.segments]
    overlap = blend_segments(preds, plan)[32:64]
    var = float(overlap.var())
    ok = plan.segments == ((0, 64), (32, 64)) and abs(var - 1.0) < 0.01
    return CheckResult("segments", ok, f"plan {list(plan.segments)}, overlap variance {var:.4f}")


CHECKS: list[Callable[[int], CheckResult]] = [check_reconstruction, check_variance, check_attention, check_blend]


def run_selfcheck(seed: int = 0) -> list[CheckResult]:
    return [check(seed) for check in CHECKS]
