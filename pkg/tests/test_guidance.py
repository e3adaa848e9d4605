import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import affine_operator, affine_sample
from scenegraft.backend import CallCounter, LatentTensor, make_schedule
from scenegraft.errors import ConfigError, ScheduleError, ShapeError
from scenegraft.guidance import (
    Blending,
    BlendingConfig,
    GuidanceConfig,
    blend_latent,
    combine_guidance,
    guided_prediction,
    sample,
)
from scenegraft.inversion import InversionConfig, invert_latent
from scenegraft.masks import build_pyramid

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite))
def test_combine_exact_at_zero_and_one(u, c):
    np.testing.assert_array_equal(combine_guidance(u, c, 0.0), u)
    np.testing.assert_array_equal(combine_guidance(u, c, 1.0), c)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (5,), elements=finite), arrays(np.float64, (5,), elements=finite),
       st.floats(0, 20), st.floats(0, 20))
def test_combine_is_affine_in_weight(u, c, w1, w2):
    mid = combine_guidance(u, c, (w1 + w2) / 2)
    avg = (combine_guidance(u, c, w1) + combine_guidance(u, c, w2)) / 2
    np.testing.assert_allclose(mid, avg, atol=1e-9 * (1 + np.abs(u).max() + np.abs(c).max()) * (1 + w1 + w2))


def test_combine_matches_textbook_form(rng):
    u, c = rng.normal(size=(2, 6))
    np.testing.assert_allclose(combine_guidance(u, c, 7.5), u + 7.5 * (c - u), atol=1e-13)


def test_guided_prediction_calls_unconditional_then_conditional(toy, sched10, rng):
    counter = CallCounter(toy)
    z = LatentTensor(rng.normal(size=(12, 8, 8)), 4)
    gcfg = GuidanceConfig(7.5, toy.encode_text("a person"), toy.null_condition())
    guided_prediction(z, gcfg, counter, sched10)
    t = sched10.model_timestep(4)
    assert counter.calls == [(t, "unconditional"), (t, "conditional")]


@pytest.mark.parametrize("w", [0.0, 1.0])
def test_guided_endpoints_bitwise(toy, rng, w):
    z = LatentTensor(rng.normal(size=(12, 8, 8)), 3)
    cond, null = toy.encode_text("a person"), toy.null_condition()
    got = guided_prediction(z, GuidanceConfig(w, cond, null), toy)
    expected = toy.predict(z.data, 3, cond if w == 1.0 else null)
    np.testing.assert_array_equal(got, expected)


def test_negative_weight_rejected(toy):
    with pytest.raises(ConfigError):
        GuidanceConfig(-1.0, toy.encode_text("a"), toy.null_condition())


def test_sample_w1_matches_dense_oracle(toy, sched10, rng):
    cond = toy.encode_text("a road")
    A, c = affine_operator(toy, cond)
    zT = rng.normal(size=(12, 8, 8))
    traj = sample(LatentTensor(zT, 10), GuidanceConfig(1.0, cond, toy.null_condition()), toy, sched10)
    np.testing.assert_allclose(traj.final.data, affine_sample(zT, A, c, sched10.alpha_schedule), atol=1e-10)
    assert traj.direction == "sampling"
    assert [z.timestep for z in traj.latents] == list(range(10, -1, -1))


def test_sample_call_budget(toy, sched10, rng):
    counter = CallCounter(toy)
    sample(LatentTensor(rng.normal(size=(12, 8, 8)), 10),
           GuidanceConfig(7.5, toy.encode_text("a"), toy.null_condition()), counter, sched10)
    assert len(counter.calls) == 20
    assert [t for t, _ in counter.calls[::2]] == [sched10.model_timestep(i) for i in range(10, 0, -1)]


def test_sample_must_start_at_top(toy, sched10, rng):
    with pytest.raises(ScheduleError):
        sample(LatentTensor(rng.normal(size=(12, 8, 8)), 9),
               GuidanceConfig(1.0, toy.encode_text("a"), toy.null_condition()), toy, sched10)


def _scene_setup(toy, sched, rng):
    cond = toy.encode_text("a road")
    scene = invert_latent(rng.normal(size=(12, 8, 8)) * 0.3, cond, toy, sched, InversionConfig(2))
    fg = np.zeros((8, 8), dtype=np.uint8)
    fg[2:5, 3:6] = 1
    return scene, build_pyramid(fg, [(8, 8)]), fg


def test_blending_replaces_background_inside_window(toy, rng):
    sched = make_schedule(10)
    scene, pyr, fg = _scene_setup(toy, sched, rng)
    gcfg = GuidanceConfig(7.5, toy.encode_text("a person"), toy.null_condition())
    bcfg = BlendingConfig((3, 6))
    traj = sample(scene.at(10), gcfg, toy, sched, Blending(scene, pyr, bcfg))
    plain = sample(scene.at(10), gcfg, toy, sched)
    assert traj.blended == [6, 5, 4, 3]
    bg = ~fg.astype(bool)
    for i in range(3, 7):
        np.testing.assert_array_equal(traj.at(i).data[:, bg], scene.at(i).data[:, bg])
    for i in range(7, 11):
        np.testing.assert_array_equal(traj.at(i).data, plain.at(i).data)


def test_blend_latent_is_identity_outside_window(rng):
    z = LatentTensor(rng.normal(size=(2, 4, 4)), 5)
    s = LatentTensor(rng.normal(size=(2, 4, 4)), 5)
    pyr = build_pyramid(np.zeros((4, 4), dtype=np.uint8), [(4, 4)])
    assert blend_latent(z, s, pyr, 5, BlendingConfig((10, 20))) is z
    assert blend_latent(z, s, pyr, 5, BlendingConfig((0, 20), enabled=False)) is z
    np.testing.assert_array_equal(blend_latent(z, s, pyr, 5, BlendingConfig((5, 5))).data, s.data)


def test_blend_latent_full_mask_keeps_generation(rng):
    z = LatentTensor(rng.normal(size=(2, 4, 4)), 5)
    s = LatentTensor(rng.normal(size=(2, 4, 4)), 5)
    pyr = build_pyramid(np.ones((4, 4), dtype=np.uint8), [(4, 4)])
    np.testing.assert_array_equal(blend_latent(z, s, pyr, 5, BlendingConfig((0, 10))).data, z.data)


def test_blend_latent_checks(rng):
    pyr = build_pyramid(np.ones((4, 4), dtype=np.uint8), [(4, 4)])
    z = LatentTensor(rng.normal(size=(2, 4, 4)), 5)
    with pytest.raises(ScheduleError):
        blend_latent(z, LatentTensor(z.data, 4), pyr, 5, BlendingConfig())
    with pytest.raises(ShapeError):
        blend_latent(z, LatentTensor(np.zeros((2, 3, 3)), 5), pyr, 5, BlendingConfig())


@pytest.mark.parametrize("window", [(5, 3), (-1, 2)])
def test_bad_windows(window):
    with pytest.raises(ConfigError):
        BlendingConfig(window)


def test_window_beyond_schedule(toy, rng):
    sched = make_schedule(10)
    scene, pyr, _ = _scene_setup(toy, sched, rng)
    with pytest.raises(ConfigError):
        sample(scene.at(10), GuidanceConfig(1, toy.encode_text("a"), toy.null_condition()), toy, sched,
               Blending(scene, pyr, BlendingConfig((5, 11))))
