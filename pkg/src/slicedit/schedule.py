"""Noise schedules and the per-step DDPM/DDIM arithmetic used by inversion
and sampling. Schedule quantities are float64; tensors stay float32."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays are indexed by step tau = 0..T; entry 0 is the clean-signal
    convention (alpha_bar[0] = 1, beta[0] = sigma[0] = 0)."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    eta: float

    def __post_init__(self):
        for name in ("beta", "alpha", "alpha_bar", "sigma"):
            getattr(self, name).flags.writeable = False

    def check_step(self, tau: int) -> None:
        if not 1 <= tau <= self.T:
            raise ScheduleError(f"step {tau} outside [1, {self.T}]")

    def noise_scale(self, tau: int) -> float:
        """Divisor used when extracting noise at `tau`.

        Equal to sigma_tau, except at a step with sigma_tau == 0 under a
        stochastic sampler (tau = 1 with alpha_bar_0 = 1), where the raw
        residual is stored instead so reconstruction stays exact.
        """
        s = float(self.sigma[tau])
        if s > 0.0:
            return s
        if self.eta == 0.0:
            raise ScheduleError("deterministic (eta = 0) schedules carry no extractable noise")
        return 1.0


def make_schedule(
    T: int,
    beta_start: float = 0.00085,
    beta_end: float = 0.012,
    eta: float = 1.0,
    train_steps: int | None = None,
) -> NoiseSchedule:
    """Linear-beta schedule.

    With ``train_steps=None`` beta is spaced linearly over the T steps
    themselves. With ``train_steps=N`` the linear betas span N training steps
    and the T sampling steps use every (N // T)-th cumulative product, the way
    latent-diffusion samplers subsample their training schedule.
    """
    if T < 1:
        raise ScheduleError("T must be at least 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if not 0.0 <= eta <= 1.0:
        raise ScheduleError(f"eta must lie in [0, 1], got {eta}")
    if train_steps is None:
        alpha_bar = np.cumprod(1.0 - np.linspace(beta_start, beta_end, T, dtype=np.float64))
    else:
        if train_steps < T:
            raise ScheduleError("train_steps must be >= T")
        train_ab = np.cumprod(1.0 - np.linspace(beta_start, beta_end, train_steps, dtype=np.float64))
        stride = train_steps // T
        # offset by one training step, as latent-diffusion samplers do, when it fits
        offset = 1 if stride * (T - 1) + 1 < train_steps else 0
        alpha_bar = train_ab[np.arange(T) * stride + offset]
    ab = np.concatenate([[1.0], alpha_bar])
    if np.any(np.diff(ab) >= 0):
        raise ScheduleError("alpha_bar must be strictly decreasing")
    alpha = np.concatenate([[1.0], ab[1:] / ab[:-1]])
    beta = 1.0 - alpha
    var = np.zeros(T + 1)
    var[1:] = eta**2 * (1.0 - ab[:-1]) / (1.0 - ab[1:]) * beta[1:]
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=ab, sigma=np.sqrt(var), eta=float(eta))


def forward_noise(x0: np.ndarray, tau: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    if np.shape(x0) != np.shape(eps):
        raise ValueError(f"noise shape {np.shape(eps)} != signal shape {np.shape(x0)}")
    sched.check_step(tau)
    ab = sched.alpha_bar[tau]
    out = np.sqrt(ab) * np.asarray(x0, dtype=np.float64) + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)
    return out.astype(np.result_type(x0, np.float32))


def predicted_x0(x_t: np.ndarray, eps_pred: np.ndarray, tau: int, sched: NoiseSchedule) -> np.ndarray:
    ab = sched.alpha_bar[tau]
    return (np.asarray(x_t, np.float64) - np.sqrt(1.0 - ab) * np.asarray(eps_pred, np.float64)) / np.sqrt(ab)


def mu_hat(x_t: np.ndarray, eps_pred: np.ndarray, tau: int, sched: NoiseSchedule) -> np.ndarray:
    """Posterior mean: sqrt(ab_{tau-1}) * predicted x0 + direction toward x_tau."""
    if np.shape(x_t) != np.shape(eps_pred):
        raise ValueError(f"prediction shape {np.shape(eps_pred)} != input shape {np.shape(x_t)}")
    sched.check_step(tau)
    ab_prev = sched.alpha_bar[tau - 1]
    radicand = 1.0 - ab_prev - sched.sigma[tau] ** 2
    if radicand < -1e-12:
        raise ScheduleError(f"negative direction radicand {radicand:.3e} at step {tau}; eta/beta inconsistent")
    direction = np.sqrt(max(radicand, 0.0)) * np.asarray(eps_pred, np.float64)
    out = np.sqrt(ab_prev) * predicted_x0(x_t, eps_pred, tau, sched) + direction
    return out.astype(np.result_type(x_t, np.float32))


def extract_noise(x_prev: np.ndarray, mu: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0.0:
        raise ZeroDivisionError("cannot extract noise at a step with sigma = 0")
    out = (np.asarray(x_prev, np.float64) - np.asarray(mu, np.float64)) / sigma
    return out.astype(np.result_type(x_prev, np.float32))


def ddim_invert_step(x_prev: np.ndarray, eps_pred: np.ndarray, tau: int, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic step x_{tau-1} -> x_tau using a prediction made at x_{tau-1}."""
    sched.check_step(tau)
    ab_prev, ab = sched.alpha_bar[tau - 1], sched.alpha_bar[tau]
    eps = np.asarray(eps_pred, np.float64)
    x0 = (np.asarray(x_prev, np.float64) - np.sqrt(1.0 - ab_prev) * eps) / np.sqrt(ab_prev)
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(np.result_type(x_prev, np.float32))
