import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from slicedit.schedule import (
    ScheduleError,
    ddim_invert_step,
    extract_noise,
    forward_noise,
    make_schedule,
    mu_hat,
    predicted_x0,
)


def test_single_step_formula():
    s = make_schedule(1, 0.1, 0.1, eta=1.0)
    assert math.isclose(s.alpha_bar[1], 0.9)
    # sigma^2 = (1 - 1)/(1 - 0.9) * 0.1 = 0 under alpha_bar_0 = 1
    assert s.sigma[1] == 0.0


def test_two_step_sigma_against_direct_formula():
    s = make_schedule(2, 0.1, 0.2, eta=1.0)
    ab1, ab2 = 0.9, 0.9 * 0.8
    assert math.isclose(s.alpha_bar[2], ab2)
    assert math.isclose(s.sigma[2] ** 2, (1 - ab1) / (1 - ab2) * 0.2)


def test_ddim_sigma_zero():
    s = make_schedule(50, eta=0.0)
    assert np.all(s.sigma == 0)
    with pytest.raises(ScheduleError):
        s.noise_scale(5)


def test_default_schedule_monotone():
    s = make_schedule(50, train_steps=1000)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.beta[1:] > 0) & (s.beta[1:] < 1))
    np.testing.assert_allclose(s.alpha_bar + (1 - s.alpha_bar), 1.0, atol=1e-12)
    # strided training schedule: step tau reads training index 20*(tau-1) + 1
    train = np.cumprod(1 - np.linspace(0.00085, 0.012, 1000))
    np.testing.assert_allclose(s.alpha_bar[1:], train[np.arange(50) * 20 + 1])


@pytest.mark.parametrize("kw", [dict(T=0), dict(T=5, beta_start=0.0), dict(T=5, beta_start=0.2, beta_end=0.1), dict(T=5, eta=1.5)])
def test_invalid_schedules(kw):
    with pytest.raises(ScheduleError):
        make_schedule(**kw)


def test_schedule_arrays_frozen():
    s = make_schedule(5)
    with pytest.raises(ValueError):
        s.alpha_bar[1] = 0.5


def test_forward_noise_examples():
    s = make_schedule(10)
    x0 = np.array([1.0, -2.0], np.float32)
    ab = s.alpha_bar[4]
    np.testing.assert_allclose(forward_noise(x0, 4, np.zeros(2, np.float32), s), np.sqrt(ab) * x0, rtol=1e-6)
    eps = np.array([0.5, 3.0], np.float32)
    np.testing.assert_allclose(forward_noise(np.zeros(2, np.float32), 4, eps, s), np.sqrt(1 - ab) * eps, rtol=1e-6)
    with pytest.raises(ValueError):
        forward_noise(x0, 4, np.zeros(3), s)
    with pytest.raises(ScheduleError):
        forward_noise(x0, 11, eps, s)


def _manual(alpha_bar, sigma=None):
    """Schedule stub with hand-chosen alpha_bar values (index 0 = 1)."""
    ab = np.asarray(alpha_bar, float)
    s = make_schedule(len(ab) - 1)
    object.__setattr__(s, "alpha_bar", ab)
    object.__setattr__(s, "sigma", np.zeros_like(ab) if sigma is None else np.asarray(sigma, float))
    return s


def test_forward_noise_hand_value():
    s = _manual([1.0, 0.36])
    assert math.isclose(float(forward_noise(np.array(1.0), 1, np.array(1.0), s)), 1.4, rel_tol=1e-6)


def test_mu_hat_hand_value():
    s = _manual([1.0, 0.5, 0.25])
    P = (1 - math.sqrt(0.75) * 0.5) / 0.5
    D = math.sqrt(0.5) * 0.5
    got = float(mu_hat(np.array(1.0), np.array(0.5), 2, s))
    assert math.isclose(got, math.sqrt(0.5) * P + D, rel_tol=1e-6)


def test_mu_hat_exact_noise_recovers_x0():
    s = make_schedule(10)
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal(16)
    eps = rng.standard_normal(16)
    xt = forward_noise(x0, 1, eps, s)
    np.testing.assert_allclose(mu_hat(xt, eps, 1, s), x0, atol=1e-10)


def test_mu_hat_zero_prediction():
    s = make_schedule(10)
    x = np.linspace(-1, 1, 5)
    np.testing.assert_allclose(mu_hat(x, np.zeros(5), 6, s), np.sqrt(s.alpha_bar[5] / s.alpha_bar[6]) * x)


def test_mu_hat_negative_radicand():
    s = _manual([1.0, 0.5, 0.25], sigma=[0.0, 0.0, 0.9])
    with pytest.raises(ScheduleError):
        mu_hat(np.ones(2), np.ones(2), 2, s)


def test_extract_noise_examples():
    assert float(extract_noise(np.array(3.0), np.array(0.0), 2.0)) == 1.5
    np.testing.assert_array_equal(extract_noise(np.ones(3), np.ones(3), 0.3), np.zeros(3))
    with pytest.raises(ZeroDivisionError):
        extract_noise(np.ones(3), np.ones(3), 0.0)


@given(st.integers(2, 50), st.integers(0, 2**32 - 1))
def test_mu_plus_sigma_z_reproduces_prev(tau, seed):
    s = make_schedule(50, train_steps=1000)
    rng = np.random.default_rng(seed)
    x_prev, x_t, eps = rng.standard_normal((3, 32))
    mu = mu_hat(x_t, eps, tau, s)
    z = extract_noise(x_prev, mu, s.sigma[tau])
    np.testing.assert_allclose(mu + s.sigma[tau] * z, x_prev, atol=1e-12)


def test_ddim_step_roundtrip():
    s = make_schedule(20, eta=0.0)
    rng = np.random.default_rng(3)
    x_prev, eps = rng.standard_normal((2, 64))
    x_t = ddim_invert_step(x_prev, eps, 7, s)
    np.testing.assert_allclose(mu_hat(x_t, eps, 7, s), x_prev, atol=1e-10)
    # both ends of a DDIM step share one predicted clean signal
    x0_prev = (x_prev - np.sqrt(1 - s.alpha_bar[6]) * eps) / np.sqrt(s.alpha_bar[6])
    np.testing.assert_allclose(predicted_x0(x_t, eps, 7, s), x0_prev, atol=1e-10)


def test_noise_scale_at_first_step():
    s = make_schedule(10, eta=1.0)
    assert s.sigma[1] == 0.0 and s.noise_scale(1) == 1.0
    assert s.noise_scale(2) == s.sigma[2] > 0
