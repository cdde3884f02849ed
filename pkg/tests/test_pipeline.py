import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from slicedit.attention import CacheMiss
from slicedit.denoisers import AnalyticDenoiser, GaussianPrior, embed_prompt, toy_unet
from slicedit.pipeline import (
    ConfigError,
    EditConfig,
    InputError,
    InversionRecord,
    VideoDenoiser,
    capture_steps,
    decode,
    edit,
    encode,
    interpolate_frames,
    invert,
    invert_ddim,
    parse_config_text,
    sample,
    sampling_plan,
    subsample_frames,
)
from slicedit.schedule import ScheduleError
from slicedit.stvolume import Space, VideoVolume

SMALL = EditConfig(T=5, T_skip=0, inject_fraction=1.0, seg_len=8, train_steps=0)


@pytest.fixture(scope="module")
def net():
    return toy_unet(2, 0)


@pytest.fixture
def latent(rng):
    return rng.uniform(-1, 1, (8, 8, 8, 2)).astype(np.float32)


# -- config ---------------------------------------------------------------------

def test_defaults():
    c = EditConfig()
    assert (c.T, c.T_skip, c.gamma, c.inject_fraction, c.cfg_strength_EA, c.cfg_strength_S, c.seg_len) == (50, 8, 0.8, 0.85, 10, 1, 64)
    assert c.eta == 1.0 and c.codec == "identity"


def test_config_text_roundtrip():
    c = EditConfig(gamma=0.35, xt_slices=True, codec="pool2", seed=9, beta_end=0.0123456789)
    assert EditConfig.from_text(c.to_text()) == c


def test_config_parse(tmp_path):
    text = "# comment\nT = 20\n\ngamma=0.5\nxt_slices = yes\n"
    assert parse_config_text(text) == {"T": "20", "gamma": "0.5", "xt_slices": "yes"}
    (tmp_path / "c.cfg").write_text(text, encoding="utf-8")
    c = EditConfig.from_file(tmp_path / "c.cfg")
    assert (c.T, c.gamma, c.xt_slices, c.T_skip) == (20, 0.5, True, 8)


@pytest.mark.parametrize("text", ["bogus = 1", "T 5", "T = five", "xt_slices = maybe"])
def test_config_parse_errors(text):
    with pytest.raises(ConfigError):
        EditConfig.from_text(text)


@pytest.mark.parametrize(
    "kw",
    [dict(T=0), dict(T_skip=50), dict(T_skip=-1), dict(inject_fraction=1.5), dict(gamma=-0.1), dict(eta=2.0),
     dict(seg_len=1), dict(codec="vae"), dict(blend_mode="max"), dict(train_steps=10)],
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        EditConfig(**kw)


# -- step planning ----------------------------------------------------------------

def test_default_plan_42_36():
    plan = sampling_plan(EditConfig())
    assert len(plan) == 42
    assert [t for t, _ in plan] == list(range(42, 0, -1))
    assert sum(i for _, i in plan) == 36
    assert all(i for _, i in plan[:36]) and not any(i for _, i in plan[36:])
    assert capture_steps(EditConfig()) == set(range(42, 6, -1))
    assert capture_steps(EditConfig(gamma=0.0)) == set()


@given(st.integers(1, 80), st.data(), st.floats(0, 1))
def test_plan_property(T, data, frac):
    skip = data.draw(st.integers(0, T - 1))
    plan = sampling_plan(EditConfig(T=T, T_skip=skip, inject_fraction=frac, train_steps=0))
    n = T - skip
    assert len(plan) == n
    n_inj = sum(i for _, i in plan)
    assert n_inj == math.ceil(round(frac * n, 9))
    assert [i for _, i in plan] == [True] * n_inj + [False] * (n - n_inj)


# -- codec and interpolation ----------------------------------------------------------

def test_codecs(rng):
    v = rng.uniform(-1, 1, (2, 4, 6, 3)).astype(np.float32)
    np.testing.assert_array_equal(decode(encode(v)), v)
    const = np.full((2, 4, 6, 3), 0.25, np.float32)
    enc = encode(const, "pool2")
    assert enc.shape == (2, 2, 3, 3)
    np.testing.assert_array_equal(decode(enc, "pool2"), const)
    checker = ((np.indices((4, 6)).sum(0) % 2) * 2 - 1).astype(np.float32)[None, :, :, None]
    assert not encode(checker, "pool2").any()
    with pytest.raises(InputError):
        encode(np.zeros((1, 3, 4, 1)), "pool2")
    with pytest.raises(ConfigError):
        encode(v, "jpeg")


def test_interpolation(rng):
    same = np.ones((2, 2, 2, 1), np.float32)
    assert np.all(interpolate_frames(same) == 1)
    two = np.stack([np.zeros((2, 2, 1)), np.ones((2, 2, 1))]).astype(np.float32)
    out = interpolate_frames(two)
    assert out.shape[0] == 4
    np.testing.assert_array_equal(out[:, 0, 0, 0], [0, 0.5, 1, 1])
    v = rng.standard_normal((5, 2, 2, 1)).astype(np.float32)
    np.testing.assert_array_equal(subsample_frames(interpolate_frames(v), 5), v)
    with pytest.raises(InputError):
        interpolate_frames(v[:1])


# -- inversion and sampling --------------------------------------------------------------

def test_reconstruction_exact(net, latent):
    p = embed_prompt("a man")
    rec = invert(latent, p, SMALL, net)
    assert rec.Z.shape == (5,) + latent.shape and np.isfinite(rec.Z).all()
    assert rec.xs.shape == (6,) + latent.shape
    out = sample(rec, p, SMALL, net)
    assert np.abs(out - latent).max() < 1e-3


def test_reconstruction_holds_for_analytic_denoiser(latent):
    d = AnalyticDenoiser(GaussianPrior.ar1(0.9, 0.6))
    p = embed_prompt("x")
    cfg = SMALL.replace(seg_len=8)
    out = sample(invert(latent, p, cfg, d), p, cfg, d)
    assert np.abs(out - latent).max() < 1e-3


def test_inversion_deterministic(net, latent):
    p = embed_prompt("a man")
    a, b = invert(latent, p, SMALL, net), invert(latent, p, SMALL, net)
    np.testing.assert_array_equal(a.Z, b.Z)
    np.testing.assert_array_equal(a.xs, b.xs)
    c = invert(latent, p, SMALL.replace(seed=1), net)
    assert not np.array_equal(a.Z, c.Z)


def test_injection_changes_edit(net, latent):
    p, q = embed_prompt("a man"), embed_prompt("a robot")
    rec = invert(latent, p, SMALL, net)
    with_inj = sample(rec, q, SMALL, net)
    without = sample(rec, q, SMALL.replace(inject_fraction=0.0), net)
    assert not np.allclose(with_inj, without)
    assert not np.allclose(with_inj, latent)


def test_tskip_starts_from_trajectory(net, latent):
    p = embed_prompt("a man")
    cfg = SMALL.replace(T_skip=2)
    rec = invert(latent, p, cfg, net)
    assert np.abs(sample(rec, p, cfg, net) - latent).max() < 1e-3


def test_cache_miss_when_capture_schedule_differs(net, latent):
    p = embed_prompt("a man")
    rec = invert(latent, p, SMALL.replace(inject_fraction=0.2), net)
    with pytest.raises(CacheMiss):
        sample(rec, p, SMALL, net)


def test_invert_errors(net, latent):
    with pytest.raises(ScheduleError):
        invert(latent, embed_prompt(""), SMALL.replace(eta=0.0), net)
    with pytest.raises(InputError):
        invert(latent[:4], embed_prompt(""), SMALL, net)
    with pytest.raises(InputError):
        invert(latent[0], embed_prompt(""), SMALL, net)
    rec = invert(latent, embed_prompt(""), SMALL, net)
    with pytest.raises(ConfigError):
        sample(rec, embed_prompt(""), SMALL.replace(T=6), net)


def test_ddim_path_deterministic(net, latent):
    p, q = embed_prompt("a man"), embed_prompt("a robot")
    cfg = SMALL.replace(eta=0.0, T_skip=1, inject_fraction=0.85)
    a = sample(invert_ddim(latent, p, cfg, net), q, cfg, net)
    b = sample(invert_ddim(latent, p, cfg, net), q, cfg, net)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        invert_ddim(latent, p, cfg, net).z(1)


def test_record_save_load(tmp_path, net, latent):
    p = embed_prompt("a man")
    rec = invert(latent, p, SMALL, net)
    rec.save(tmp_path / "r.stw")
    back = InversionRecord.load(tmp_path / "r.stw")
    np.testing.assert_array_equal(back.Z, rec.Z)
    np.testing.assert_array_equal(back.xs, rec.xs)
    assert back.config == rec.config and back.p_src == p and set(back.cache) == set(rec.cache)
    np.testing.assert_array_equal(sample(back, p, SMALL, net), sample(rec, p, SMALL, net))


def test_segmented_volume_denoiser(net, rng):
    cfg = SMALL.replace(seg_len=8)
    vol = rng.standard_normal((12, 8, 8, 2)).astype(np.float32)
    vd = VideoDenoiser(net, cfg)
    out = vd(vol, 2, embed_prompt("a"))
    assert out.shape == vol.shape
    # frames covered by one segment match that segment's own prediction
    first = VideoDenoiser(net, cfg)(vol[:8], 2, embed_prompt("a"))
    np.testing.assert_allclose(out[:4], first[:4], atol=1e-6)


def test_segmented_reconstruction(net, rng):
    vol = rng.uniform(-1, 1, (12, 8, 8, 2)).astype(np.float32)
    p = embed_prompt("a")
    rec = invert(vol, p, SMALL, net)
    assert any(k[1].startswith("seg4:") for k in rec.cache)
    assert np.abs(sample(rec, p, SMALL, net) - vol).max() < 1e-3


def test_edit_geometry_and_interpolation(net, rng):
    cfg = SMALL.replace(T=3)
    calls = []

    def interp(frames):
        calls.append(frames.shape[0])
        return interpolate_frames(frames)

    vid = VideoVolume(rng.uniform(-1, 1, (5, 8, 8, 2)), Space.PIXEL)
    out = edit(vid, "a", "b", cfg, net, interpolator=interp)
    assert calls == [5] and out.shape == vid.shape and out.space is Space.PIXEL
    assert out.data.min() >= -1 and out.data.max() <= 1
    vid8 = VideoVolume(rng.uniform(-1, 1, (8, 8, 8, 2)), Space.PIXEL)
    edit(vid8, "a", "b", cfg, net, interpolator=interp)
    assert calls == [5]
    with pytest.raises(InputError):
        edit(VideoVolume(np.zeros((3, 8, 8, 2)), Space.PIXEL), "a", "b", cfg, net)


def test_edit_reconstruction_pool2(rng):
    cfg = SMALL.replace(T=3, codec="pool2")
    frames = np.repeat(np.repeat(rng.uniform(-0.9, 0.9, (8, 4, 4, 2)), 2, 1), 2, 2)
    vid = VideoVolume(frames, Space.PIXEL)
    out = edit(vid, "a man", "a man", cfg, toy_unet(2, 0))
    assert np.abs(out.data - vid.data).max() < 1e-3
