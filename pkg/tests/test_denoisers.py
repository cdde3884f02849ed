import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from slicedit.attention import AttentionCache, AttentionControl, keyframe_sets
from slicedit.denoisers import (
    NULL_PROMPT,
    AnalyticDenoiser,
    GaussianPrior,
    GeometryError,
    analytic_mmse,
    cfg,
    embed_prompt,
    expected_mse,
    linear_predictor_mse,
    predict_noise,
    toy_unet,
)
from slicedit.denoisers.analytic import ar1_covariance
from slicedit.schedule import make_schedule
from slicedit.stvolume import Axis, Slice2D


# -- prompts ------------------------------------------------------------------

def test_null_prompt_zero():
    assert NULL_PROMPT.is_null and not NULL_PROMPT.tokens.any()
    assert NULL_PROMPT.tokens.shape == (8, 64)


def test_prompt_deterministic_and_distinct():
    assert embed_prompt("a cat") == embed_prompt("a cat")
    a, b = embed_prompt("a cat"), embed_prompt("a dog")
    assert not np.array_equal(a.tokens, b.tokens)
    assert a.tokens.shape == (8, 64) and np.isfinite(a.tokens).all()
    assert np.array_equal(embed_prompt("über").tokens, embed_prompt("über").tokens)


# -- guidance -----------------------------------------------------------------

def test_cfg_examples():
    c, u = np.array([0.3, -1.0]), np.array([0.1, 2.0])
    assert cfg(c, u, 1) is c
    np.testing.assert_array_equal(cfg(c, c, 7.5), c)
    assert cfg(np.array(0.1), np.array(0.0), 10) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        cfg(np.zeros(2), np.zeros(3), 2)


@given(st.floats(-20, 20), st.floats(-20, 20))
def test_cfg_affine_in_strength(s1, s2):
    c, u = np.array([0.3, -1.0]), np.array([0.1, 2.0])
    mid = cfg(c, u, 0.5 * (s1 + s2))
    np.testing.assert_allclose(mid, 0.5 * (cfg(c, u, s1) + cfg(c, u, s2)), atol=1e-9)


# -- analytic prior -------------------------------------------------------------

def test_identity_prior_closed_form():
    eye = np.eye(1)
    assert float(analytic_mmse(eye, np.array([2.0]), 0.5)[0]) == pytest.approx(math.sqrt(0.5) * 2, rel=1e-12)
    x = np.random.default_rng(0).standard_normal(5)
    np.testing.assert_allclose(analytic_mmse(np.eye(5), x, 0.3), math.sqrt(0.7) * x)


def test_mmse_zero_input_and_limit():
    prior = GaussianPrior.ar1(0.7, 0.4)
    assert not analytic_mmse(prior, np.zeros((2, 4, 4, 1)), 0.5).any()
    x = np.ones((4, 4, 1))
    assert np.abs(analytic_mmse(prior, x, 1 - 1e-10)).max() < 1e-3


def test_dense_matches_ar1_spectral(rng):
    prior = GaussianPrior.ar1(0.8, 0.3)
    geom = (5, 4, 2)
    S = prior.matrix(geom)
    x = rng.standard_normal((3,) + geom)
    dense = np.stack([analytic_mmse(S, xi.ravel(), 0.4).reshape(geom) for xi in x])
    np.testing.assert_allclose(analytic_mmse(prior, x, 0.4), dense, atol=1e-10)
    np.testing.assert_allclose(np.sort(prior.eigenvalues(geom)), np.linalg.eigvalsh(S), atol=1e-10)
    dp = GaussianPrior(S, geom)
    np.testing.assert_allclose(analytic_mmse(dp, x, 0.4), dense, atol=1e-10)


def test_dense_prior_rejects_non_spd():
    with pytest.raises(np.linalg.LinAlgError):
        GaussianPrior(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(np.linalg.LinAlgError):
        GaussianPrior(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(np.linalg.LinAlgError):
        GaussianPrior.ar1(1.0)
    with pytest.raises(ValueError):
        GaussianPrior(np.eye(4), (3, 1, 1))


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.01, 0.99))
def test_mmse_linear(a, b, ab):
    rng = np.random.default_rng(5)
    prior = GaussianPrior.ar1(0.9, 0.5)
    x, y = rng.standard_normal((2, 1, 6, 5, 2))
    np.testing.assert_allclose(
        analytic_mmse(prior, a * x + b * y, ab), a * analytic_mmse(prior, x, ab) + b * analytic_mmse(prior, y, ab), atol=1e-6
    )


def test_expected_mse_trace_formula():
    S = ar1_covariance(6, 0.9)
    ab = 0.3
    direct = np.trace(np.eye(6) - (1 - ab) * np.linalg.inv(ab * S + (1 - ab) * np.eye(6))) / 6
    assert expected_mse(GaussianPrior(S), ab, (6, 1, 1)) == pytest.approx(direct, rel=1e-12)
    prior = GaussianPrior.ar1(0.9, 0.0)
    assert linear_predictor_mse(prior, prior.matrix((6, 1, 1)), ab, (6, 1, 1)) == pytest.approx(direct, rel=1e-10)


def test_mismatched_predictor_is_worse():
    geom = (6, 6, 1)
    matched = GaussianPrior.ar1(0.8, 0.8)
    wrong = GaussianPrior.ar1(0.2, 0.2)
    truth = matched.matrix(geom)
    assert linear_predictor_mse(wrong, truth, 0.5, geom) > expected_mse(matched, 0.5, geom)


def test_prior_sample_covariance():
    prior = GaussianPrior.ar1(0.7, 0.0)
    x = prior.sample(40000, (4, 1, 1), np.random.default_rng(2))
    emp = np.cov(x.reshape(40000, -1).T)
    np.testing.assert_allclose(emp, ar1_covariance(4, 0.7), atol=0.03)


def test_predict_noise_wrappers(rng):
    d = AnalyticDenoiser(GaussianPrior.ar1(0.5))
    sched = make_schedule(10)
    s = Slice2D(rng.standard_normal((4, 4, 1)).astype(np.float32), Axis.XY, 0)
    single = predict_noise(d, s, 3, NULL_PROMPT, sched)
    assert single.shape == (4, 4, 1)
    batch = predict_noise(d, s.data[None], 3, NULL_PROMPT, sched)
    np.testing.assert_array_equal(batch[0], single)
    ident = AnalyticDenoiser(GaussianPrior(np.eye(16), (4, 4, 1)))
    ab = sched.alpha_bar[3]
    np.testing.assert_allclose(predict_noise(ident, s, 3, NULL_PROMPT, sched), np.sqrt(1 - ab) * s.data, rtol=1e-6)


# -- toy U-Net ------------------------------------------------------------------

@pytest.fixture(scope="module")
def net():
    return toy_unet(4, 0)


def test_unet_shape_and_determinism(net):
    x = np.random.default_rng(0).standard_normal((2, 32, 32, 4)).astype(np.float32)
    a = net.predict(x, 0.5, embed_prompt("a cat"))
    b = net.predict(x, 0.5, embed_prompt("a cat"))
    assert a.shape == x.shape and a.dtype == np.float32
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, net.predict(x, 0.5, embed_prompt("a dog")))
    assert not np.array_equal(a, net.predict(x, 0.9, embed_prompt("a cat")))


def test_unet_seeded_checksum():
    assert toy_unet(4, 3).checksum() == toy_unet(4, 3).checksum()
    assert toy_unet(4, 3).checksum() != toy_unet(4, 4).checksum()
    w = toy_unet(4, 3).weights()["conv_in.weight"]
    assert abs(w.std() - 0.02) < 0.004 and not toy_unet(4, 3).weights()["conv_in.bias"].any()


def test_unet_weights_roundtrip(tmp_path, net):
    net.save_weights(tmp_path / "w.stw")
    assert toy_unet(4, tmp_path / "w.stw").checksum() == net.checksum()
    assert toy_unet(4, net.weights()).checksum() == net.checksum()


def test_unet_geometry_errors(net):
    with pytest.raises(GeometryError):
        net.predict(np.zeros((1, 6, 8, 4), np.float32), 0.5, NULL_PROMPT)
    with pytest.raises(GeometryError):
        net.predict(np.zeros((1, 8, 8, 3), np.float32), 0.5, NULL_PROMPT)
    with pytest.raises(GeometryError):
        toy_unet((10, 8, 4))
    with pytest.raises(ValueError):
        net.predict(np.full((1, 8, 8, 4), np.nan, np.float32), 0.5, NULL_PROMPT)


def test_unet_lipschitz_probe(net):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 32, 32, 4)).astype(np.float32)
    p = embed_prompt("a cat")
    base = net.predict(x, 0.5, p).astype(np.float64)
    for _ in range(3):
        delta = 1e-2 * rng.standard_normal(x.shape).astype(np.float32)
        ratio = np.linalg.norm(net.predict(x + delta, 0.5, p) - base) / np.linalg.norm(delta)
        assert ratio < 1e3


def test_unet_self_attention_matches_numpy_reference(net):
    block = net.up1_attn.attn1
    rng = np.random.default_rng(2)
    tokens = rng.standard_normal((3, 16, 64)).astype(np.float32)
    W = tuple(m.weight.numpy().T.astype(np.float64) for m in (block.to_q, block.to_k, block.to_v))
    Wo, bo = block.to_out.weight.numpy().T, block.to_out.bias.numpy()
    from slicedit.attention import extended_attention, self_attention, project

    with torch.inference_mode():
        plain = block(torch.from_numpy(tokens), None).numpy()
        ks = [[0, 2], [1], [2, 0, 1]]
        ext = block(torch.from_numpy(tokens), AttentionControl(1, [0, 1, 2], ks)).numpy()
    t64 = tokens.astype(np.float64)
    for b in range(3):
        ref = self_attention(project(t64[b], *W)) @ Wo + bo
        assert np.abs(plain[b] - ref).max() < 1e-4
        ref = extended_attention(t64[b], [t64[i] for i in ks[b]], W) @ Wo + bo
        assert np.abs(ext[b] - ref).max() < 1e-4


def test_unet_capture_inject_noop(net):
    x = np.random.default_rng(3).standard_normal((6, 8, 8, 4)).astype(np.float32)
    p = embed_prompt("a cat")
    ks = keyframe_sets(6)
    cache = AttentionCache()
    layers = frozenset({"mid.attn", "up1.attn"})
    plain = net.predict(x, 0.4, p, AttentionControl(2, range(6), ks))
    captured = net.predict(x, 0.4, p, AttentionControl(2, list(range(6)), ks, cache, "capture", layers))
    injected = net.predict(x, 0.4, p, AttentionControl(2, list(range(6)), ks, cache, "inject", layers))
    np.testing.assert_array_equal(plain, captured)
    assert np.abs(injected - plain).max() < 1e-6
    assert len(cache) == 12
    # injecting source attention into a different input changes the output
    other = net.predict(x[::-1].copy(), 0.4, p, AttentionControl(2, list(range(6)), ks, cache, "inject", layers))
    assert not np.allclose(other, net.predict(x[::-1].copy(), 0.4, p, AttentionControl(2, range(6), ks)))
    from slicedit.attention import CacheMiss

    with pytest.raises(CacheMiss):
        net.predict(x, 0.4, p, AttentionControl(3, list(range(6)), ks, cache, "inject", layers))
