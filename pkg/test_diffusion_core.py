import numpy as np
import pytest

from diffusion_core import (
    CFGGuidance,
    DataPoint,
    NoiseSchedule,
    NoisyState,
    ScheduleKind,
    check_unique_ids,
    ddim_invert,
    ddim_invert_trajectory,
    ddim_roundtrip_errors,
    ddim_sample,
    ddim_step,
    dsm_loss,
    forward_noise,
    guided_eps,
    predict_x0,
    sampling_steps,
    uniform_steps,
)
from errors import InvalidArgumentError, ScheduleError
from toy_fixtures import ConstantEpsModel, run_tests, tiny_model, tiny_schedule


def test_schedules_start_at_one_and_decrease():
    for sched in (NoiseSchedule.linear_beta(100), NoiseSchedule.cosine(100)):
        assert sched.alpha_bar[0] == 1.0
        assert np.all(np.diff(sched.alpha_bar) < 0)
        assert sched.alpha_bar[-1] > 0
        assert sched.T == 100
    assert NoiseSchedule.cosine(10).kind == ScheduleKind.COSINE


def test_schedule_validation():
    with pytest.raises(InvalidArgumentError):
        NoiseSchedule(np.array([0.9, 0.5]))
    with pytest.raises(InvalidArgumentError):
        NoiseSchedule(np.array([1.0, 0.5, 0.7]))
    with pytest.raises(ScheduleError):
        NoiseSchedule(np.array([1.0, 0.5, 0.0]))


def test_timestep_checks():
    sched = tiny_schedule()
    with pytest.raises(InvalidArgumentError):
        sched.check_t(1.5)
    with pytest.raises(InvalidArgumentError):
        sched.check_t(sched.T + 1)
    with pytest.raises(InvalidArgumentError):
        sched.check_t(0, allow_zero=False)


def test_forward_noise_at_zero_is_identity():
    sched = tiny_schedule()
    x0 = np.linspace(-1, 1, 6)
    eps = np.random.default_rng(0).standard_normal(6)
    state = forward_noise(x0, 0, eps, sched)
    assert state.t == 0
    np.testing.assert_array_equal(state.xt, x0)


def test_predict_x0_inverts_forward_noise():
    sched = tiny_schedule()
    rng = np.random.default_rng(1)
    x0 = rng.uniform(-1, 1, size=(3, 6))
    eps = rng.standard_normal((3, 6))
    t = np.array([1, 7, 20])
    state = forward_noise(x0, t, eps, sched)
    np.testing.assert_allclose(predict_x0(state, eps, sched), x0, atol=1e-10)


def test_forward_noise_dimension_mismatch():
    with pytest.raises(InvalidArgumentError):
        forward_noise(np.zeros(4), 3, np.zeros(5), tiny_schedule())


def test_ddim_step_to_zero_returns_x0_prediction():
    sched = tiny_schedule()
    rng = np.random.default_rng(2)
    state = NoisyState(rng.standard_normal(6), 10)
    eps = rng.standard_normal(6)
    out = ddim_step(state, eps, 0, sched)
    assert out.t == 0
    np.testing.assert_allclose(out.xt, predict_x0(state, eps, sched))
    assert ddim_step(state, eps, 10, sched) is state


def test_uniform_steps_endpoints():
    assert uniform_steps(0, 5) == [0]
    assert uniform_steps(3, 50) == [0, 1, 2, 3]
    steps = uniform_steps(1000, 50)
    assert steps[0] == 0 and steps[-1] == 1000
    assert len(steps) == 51
    assert sampling_steps(tiny_schedule(), 5) == uniform_steps(20, 5)[::-1]


def test_ddim_sample_requires_full_trajectory():
    sched = tiny_schedule()
    model = ConstantEpsModel(np.zeros(6), sched)
    with pytest.raises(InvalidArgumentError):
        ddim_sample(model, (0,), np.zeros(6), [20, 10, 5])
    with pytest.raises(InvalidArgumentError):
        ddim_sample(model, (0,), np.zeros(6), [20, 10, 10, 0])


def test_constant_eps_roundtrip_is_exact():
    # with an input-independent eps every DDIM step is exactly invertible
    sched = tiny_schedule()
    rng = np.random.default_rng(3)
    model = ConstantEpsModel(rng.standard_normal(6), sched)
    x0 = rng.uniform(-1, 1, size=6)
    latent = ddim_invert(model, (0,), x0, sched.T, steps=uniform_steps(sched.T, 5))
    np.testing.assert_allclose(latent.xt, forward_noise(x0, sched.T, model.e, sched).xt, atol=1e-10)
    recon = ddim_sample(model, (0,), latent.xt, sampling_steps(sched, 5))[-1].xt
    np.testing.assert_allclose(recon, x0, atol=1e-10)
    errors = ddim_roundtrip_errors(model, [(0,)], x0[None, :], [2, 5])
    assert set(errors) == {2, 5}
    assert max(errors.values()) < 1e-9


def test_invert_trajectory_shape_and_validation():
    model = tiny_model()
    traj = ddim_invert_trajectory(model, (0,), np.zeros(6), [0, 5, 10])
    assert [s.t for s in traj] == [0, 5, 10]
    with pytest.raises(InvalidArgumentError):
        ddim_invert_trajectory(model, (0,), np.zeros(6), [1, 5])
    with pytest.raises(InvalidArgumentError):
        ddim_invert(model, (0,), np.zeros(6), 10, steps=[0, 5])


def test_dsm_loss_vanishes_for_exact_predictor():
    sched = tiny_schedule()
    eps = np.random.default_rng(4).standard_normal(6)
    model = ConstantEpsModel(eps, sched)
    assert dsm_loss(model, np.zeros(6), (0,), 5, eps) == 0.0
    assert dsm_loss(model, np.zeros(6), (0,), 5, -eps) > 0.0


def test_guidance_scale_zero_is_conditional():
    model = tiny_model()
    x = np.random.default_rng(5).standard_normal(6)
    np.testing.assert_array_equal(guided_eps(model, x, 4, (1,), CFGGuidance(0.0)), model.eps(x, 4, (1,)))
    eps_c, eps_u = model.eps(x, 4, (1,)), model.eps(x, 4, model.null_condition)
    np.testing.assert_allclose(guided_eps(model, x, 4, (1,), CFGGuidance(2.0)), 3 * eps_c - 2 * eps_u)


def test_datapoint_validation():
    with pytest.raises(InvalidArgumentError):
        DataPoint(np.array([0.0, 1.5]), 0, 0, 0)
    with pytest.raises(InvalidArgumentError):
        DataPoint(np.zeros((2, 2)), 0, 0, 0)
    points = [DataPoint(np.zeros(2), 0, 0, 1), DataPoint(np.zeros(2), 1, 0, 1)]
    with pytest.raises(InvalidArgumentError):
        check_unique_ids(points)


def test_forward_noise_moments():
    sched = tiny_schedule()
    x0 = np.array([0.8, -0.3, 0.0])
    n = 100_000
    for t in (3, 20):
        eps = np.random.default_rng(t).standard_normal((n, 3))
        xt = forward_noise(np.broadcast_to(x0, eps.shape), np.full(n, t), eps, sched).xt
        a, s = np.sqrt(sched.alpha_bar[t]), np.sqrt(1.0 - sched.alpha_bar[t])
        assert np.all(np.abs(xt.mean(axis=0) - a * x0) < 3.0 * s / np.sqrt(n))
        np.testing.assert_allclose(xt.var(axis=0), s * s, rtol=5.0 * np.sqrt(2.0 / n))


def main():
    """Run diffusion core tests"""
    print("🧪 Diffusion core tests\n")
    ok = run_tests([
        test_schedules_start_at_one_and_decrease,
        test_schedule_validation,
        test_timestep_checks,
        test_forward_noise_at_zero_is_identity,
        test_predict_x0_inverts_forward_noise,
        test_forward_noise_dimension_mismatch,
        test_ddim_step_to_zero_returns_x0_prediction,
        test_uniform_steps_endpoints,
        test_ddim_sample_requires_full_trajectory,
        test_constant_eps_roundtrip_is_exact,
        test_invert_trajectory_shape_and_validation,
        test_dsm_loss_vanishes_for_exact_predictor,
        test_guidance_scale_zero_is_conditional,
        test_datapoint_validation,
        test_forward_noise_moments,
    ])
    raise SystemExit(0 if ok else 1)


if __name__ == "__main__":
    main()
