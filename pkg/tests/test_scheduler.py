import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import scaled_linear_alphas_cumprod_loop, trailing_timesteps
from scenegraft.backend import LatentTensor, constant_schedule, ddim_inverse_step, ddim_step, make_schedule
from scenegraft.backend.scheduler import SchedulerState, ddim_transfer, scaled_linear_alphas_cumprod
from scenegraft.errors import ScheduleError, ShapeError


@pytest.mark.parametrize("num_steps", [1, 10, 50, 100])
def test_trailing_timesteps_match_formula(num_steps):
    assert list(make_schedule(num_steps).timestep_sequence) == trailing_timesteps(num_steps)


def test_fifty_step_sequence_endpoints():
    s = make_schedule(50)
    assert s.timestep_sequence[0] == 999
    assert s.timestep_sequence[-1] == 19
    assert s.model_timestep(50) == 999
    assert s.model_timestep(1) == 19
    assert s.model_timestep(0) == 0


def test_alphas_cumprod_matches_loop():
    ref = scaled_linear_alphas_cumprod_loop()
    np.testing.assert_allclose(scaled_linear_alphas_cumprod(), ref, rtol=1e-12)


def test_alpha_schedule_indexing():
    s = make_schedule(10)
    ac = scaled_linear_alphas_cumprod()
    assert s.alpha(0) == 1.0
    for i in range(1, 11):
        assert s.alpha(i) == ac[s.model_timestep(i)]
    assert all(a >= b for a, b in zip(s.alpha_schedule, s.alpha_schedule[1:]))


@pytest.mark.parametrize("bad", [0, 1001])
def test_make_schedule_rejects_step_counts(bad):
    with pytest.raises(ScheduleError):
        make_schedule(bad)


def test_schedule_state_validation():
    with pytest.raises(ScheduleError):
        SchedulerState(2, (10, 20), (1.0, 0.9, 0.8))
    with pytest.raises(ScheduleError):
        SchedulerState(2, (20, 10), (1.0, 0.9))
    with pytest.raises(ScheduleError):
        SchedulerState(2, (20, 10), (1.0, 0.8, 0.9))
    with pytest.raises(ScheduleError):
        make_schedule(10).alpha(11)


def test_step_then_inverse_with_same_eps_is_identity(rng):
    s = make_schedule(10)
    z = LatentTensor(rng.normal(size=(4, 5, 5)), 6)
    eps = rng.normal(size=z.shape)
    down = ddim_step(z, eps, s)
    assert down.timestep == 5
    back = ddim_inverse_step(down, eps, s)
    assert back.timestep == 6
    np.testing.assert_allclose(back.data, z.data, atol=1e-12)


def test_constant_schedule_step_is_identity(rng):
    s = constant_schedule(5, alpha=0.7)
    z = LatentTensor(rng.normal(size=(3, 4, 4)), 3)
    out = ddim_step(z, rng.normal(size=z.shape), s)
    np.testing.assert_allclose(out.data, z.data, atol=1e-14)


def test_step_boundaries_raise(rng):
    s = make_schedule(4)
    eps = np.zeros((1, 2, 2))
    with pytest.raises(ScheduleError):
        ddim_step(LatentTensor(eps, 0), eps, s)
    with pytest.raises(ScheduleError):
        ddim_inverse_step(LatentTensor(eps, 4), eps, s)
    with pytest.raises(ShapeError):
        ddim_step(LatentTensor(eps, 2), np.zeros((1, 3, 3)), s)


def test_transfer_to_clean_recovers_x0():
    x0, eps, a = 0.3, -1.2, 0.4
    z = math.sqrt(a) * x0 + math.sqrt(1 - a) * eps
    assert ddim_transfer(np.array(z), np.array(eps), a, 1.0) == pytest.approx(x0, abs=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 1.0), st.floats(0.01, 1.0), st.floats(-5, 5), st.floats(-5, 5))
def test_transfer_round_trip(a_from, a_to, z, eps):
    there = ddim_transfer(np.array(z), np.array(eps), a_from, a_to)
    back = ddim_transfer(there, np.array(eps), a_to, a_from)
    assert float(back) == pytest.approx(z, abs=1e-8 * (1 + abs(z) + abs(eps)) / min(a_from, a_to))


def test_matches_diffusers_ddim_trailing(rng):
    torch = pytest.importorskip("torch")
    diffusers = pytest.importorskip("diffusers")
    ref = diffusers.DDIMScheduler(num_train_timesteps=1000, beta_start=0.00085, beta_end=0.012,
                                  beta_schedule="scaled_linear", timestep_spacing="trailing",
                                  set_alpha_to_one=True, clip_sample=False, steps_offset=0)
    ref.set_timesteps(50)
    s = make_schedule(50)
    assert [int(t) for t in ref.timesteps] == list(s.timestep_sequence)
    ref.alphas_cumprod = ref.alphas_cumprod.double()
    ref.final_alpha_cumprod = ref.final_alpha_cumprod.double()
    z = LatentTensor(rng.normal(size=(4, 4, 4)), 50)
    while z.timestep > 0:
        eps = rng.normal(size=z.shape)
        t = s.model_timestep(z.timestep)
        expected = ref.step(torch.from_numpy(eps), t, torch.from_numpy(z.data), eta=0.0).prev_sample.numpy()
        z = ddim_step(z, eps, s)
        np.testing.assert_allclose(z.data, expected, rtol=1e-6, atol=1e-6)
