import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fmdt.analysis import pairwise_distance_matrix, psnr_curve
from fmdt.closedform import gaussian_denoiser, gaussian_field
from fmdt.core import Dataset, Denoiser, VelocityField, identity_denoiser, velocity_from_denoiser
from fmdt.datasets import k_points
from fmdt.io import read_csv
from fmdt.net import NetModel, ParametrizedDenoiser
from fmdt.sampling import (IntegrationError, IntegratorSpec, PerturbationSpec,
                           calibrate_level, calibrate_schedule, make_direction, paired_sample,
                           perturb_denoiser, sample, write_trajectory)
from fmdt.training import TrainConfig, WeightingScheme, train

DECAY = VelocityField(lambda x, t: -x, lambda x, t, u: -u, lambda x, t, w: -w, name="decay")


# -- integrators ----------------------------------------------------------------

@given(steps=st.integers(1, 200), c=st.floats(-5, 5))
def test_constant_field_is_integrated_exactly(steps, c):
    v = VelocityField(lambda x, t: np.full_like(x, c))
    x0 = np.array([0.3, -1.0])
    rec = sample(v, x0, IntegratorSpec("euler", steps))
    np.testing.assert_allclose(rec.state(), x0 + (1 - 1e-3) * c, rtol=1e-13, atol=1e-13)
    np.testing.assert_allclose(rec.final, x0 + c, rtol=1e-13, atol=1e-13)


def test_rk4_solves_linear_decay():
    x0 = np.array([[1.0, -2.0, 0.5]])
    rec = sample(DECAY, x0, IntegratorSpec("rk4", 100, terminal_jump=False))
    t = rec.times[:, None, None]
    np.testing.assert_allclose(rec.states, x0[None] * np.exp(-t), rtol=1e-6)


@pytest.mark.parametrize("scheme,ratio", [("euler", 2.0), ("heun", 4.0), ("rk4", 16.0)])
def test_convergence_orders(scheme, ratio):
    x0 = np.array([1.0])
    exact = np.exp(-1.0)

    def err(n):
        spec = IntegratorSpec(scheme, n, eps_end=0.0, terminal_jump=False)
        return abs(sample(DECAY, x0, spec).state()[0] - exact)

    observed = err(16) / err(32)
    assert abs(observed - ratio) <= 0.2 * ratio


def test_adaptive_agrees_with_fine_rk4():
    ds = k_points(10, 2, seed=3)
    v = gaussian_field(ds)
    x0 = np.random.default_rng(0).standard_normal((20, 2))
    spec45 = IntegratorSpec("rk45", rtol=1e-5, atol=1e-7, eps_end=0.01, terminal_jump=False)
    adaptive = sample(v, x0, spec45).final
    fine = sample(v, x0, IntegratorSpec("rk4", 10_000, eps_end=0.01, terminal_jump=False)).final
    tol = np.maximum(1e-7, 1e-5 * np.linalg.norm(fine, axis=1)) * 10
    assert np.all(np.linalg.norm(adaptive - fine, axis=1) <= tol)


def test_closed_form_sampling_memorizes():
    ds = k_points(10, 2, seed=1)
    x0 = np.random.default_rng(1).standard_normal((200, 2))
    end = sample(gaussian_field(ds), x0, IntegratorSpec("euler", 1000)).final
    dist = np.linalg.norm(end[:, None, :] - ds.points[None], axis=2).min(axis=1)
    assert np.all(dist < 1e-2)


def test_record_layout_and_flags():
    rec = sample(DECAY, np.zeros((4, 3)), IntegratorSpec("heun", 10))
    assert rec.states.shape == (11, 4, 3)
    assert rec.velocity_norm.shape == (11, 4)
    assert np.all(np.diff(rec.times) > 0) and rec.times[-1] == 1 - 1e-3
    assert not rec.perturbed.any()


def test_non_finite_state_aborts_with_partial_record():
    v = VelocityField(lambda x, t: x * np.inf if t > 0.5 else x)
    with pytest.raises(IntegrationError) as info:
        sample(v, np.ones(2), IntegratorSpec("euler", 10))
    rec = info.value.record
    assert 0.5 < rec.times[-1] < 1 and len(rec.times) == len(rec.states)
    assert np.all(np.isfinite(rec.states[:-1]))


def test_non_finite_start_rejected():
    with pytest.raises(ValueError):
        sample(DECAY, np.array([np.nan]))


def test_invalid_integrator_spec():
    with pytest.raises(ValueError):
        IntegratorSpec("midpoint")
    with pytest.raises(ValueError):
        IntegratorSpec(steps=0)


def test_spectral_tracking_on_linear_field():
    rec = sample(DECAY, np.ones((2, 2)), IntegratorSpec("euler", 5, terminal_jump=False),
                 track_spectral=True)
    np.testing.assert_allclose(rec.spectral_norm, 1.0, rtol=1e-12)


def test_trajectory_dump(tmp_path):
    rec = sample(DECAY, np.array([[1.0, 2.0], [3.0, 4.0]]), IntegratorSpec("rk4", 8),
                 track_spectral=True)
    write_trajectory(tmp_path / "traj", rec, index=1)
    back = read_csv(tmp_path / "traj.csv")
    np.testing.assert_allclose(back.points, np.column_stack([rec.times, rec.states[:, 1]]),
                               rtol=1e-15)
    side = json.loads((tmp_path / "traj.json").read_text())
    assert len(side["velocity_norm"]) == 9 and len(side["spectral_norm"]) == 9
    np.testing.assert_allclose(side["endpoint"], rec.final[1])


# -- directions -----------------------------------------------------------------

def test_checkerboard_unit_patches():
    np.testing.assert_array_equal(make_direction("checkerboard", (1, 2, 2), patch_size=1),
                                  [1, -1, -1, 1])


def test_checkerboard_two_by_two_blocks():
    board = make_direction("checkerboard", (1, 4, 4), patch_size=2).reshape(4, 4)
    np.testing.assert_array_equal(board[:2, :2], 1)
    np.testing.assert_array_equal(board[:2, 2:], -1)
    np.testing.assert_array_equal(board[2:, :2], -1)
    assert (board == 1).sum() == 8 and (board == -1).sum() == 8


def test_checkerboard_truncates_and_repeats_over_channels():
    board = make_direction("checkerboard", (3, 5, 5), patch_size=2).reshape(3, 5, 5)
    assert board[0, 4, 4] == 1 and board[0, 0, 4] == 1 and board[0, 4, 2] == -1
    np.testing.assert_array_equal(board[0], board[2])


def test_shift_directions():
    np.testing.assert_array_equal(make_direction("posshift", d=3), [1, 1, 1])
    np.testing.assert_array_equal(make_direction("negshift", shape=(1, 2, 2)), -np.ones(4))


@pytest.mark.parametrize("kind,kwargs", [("checkerboard", dict(d=4)), ("residual", dict(d=2)),
                                         ("stripes", dict(d=2))])
def test_direction_errors(kind, kwargs):
    with pytest.raises(ValueError):
        make_direction(kind, **kwargs)


# -- perturbations --------------------------------------------------------------

def _base():
    ds = k_points(5, 3, seed=2)
    return ds, gaussian_denoiser(ds)


def test_zero_level_is_a_no_op():
    ds, D = _base()
    Dt = perturb_denoiser(D, PerturbationSpec("posshift", 0.0, 1.0, level=((0.0, 0.0), (1.0, 0.0))),
                          d=3)
    x = np.random.default_rng(0).standard_normal((6, 3))
    for t in (0.0, 0.4, 1.0):
        np.testing.assert_array_equal(Dt(x, t), D(x, t))


def test_residual_unit_level_is_identity():
    _, D = _base()
    Dt = perturb_denoiser(D, PerturbationSpec("residual", 0.2, 0.6, level=((0.2, 1.0), (0.6, 1.0))))
    x = np.random.default_rng(1).standard_normal((6, 3))
    np.testing.assert_allclose(Dt(x, 0.4), x, rtol=1e-14, atol=1e-14)
    np.testing.assert_allclose(Dt.jvp(x, 0.4, x), x, rtol=1e-14, atol=1e-14)


def test_posshift_adds_constant():
    _, D = _base()
    Dt = perturb_denoiser(D, PerturbationSpec("posshift", 0.0, 0.5, level=((0.0, 0.3), (0.5, 0.3))),
                          d=3)
    x = np.random.default_rng(2).standard_normal((6, 3))
    np.testing.assert_allclose(Dt(x, 0.25), D(x, 0.25) + 0.3, rtol=1e-15)
    np.testing.assert_array_equal(Dt.jvp(x, 0.25, x), D.jvp(x, 0.25, x))


def test_level_is_interpolated_between_nodes():
    _, D = _base()
    Dt = perturb_denoiser(D, PerturbationSpec("negshift", 0.0, 1.0, level=((0.0, 0.0), (1.0, 2.0))),
                          d=3)
    assert Dt.sigma(0.25) == pytest.approx(0.5)


@given(t=st.floats(0.0, 1.0))
def test_perturbation_is_local(t):
    _, D = _base()
    spec = PerturbationSpec("posshift", 0.3, 0.6, level=((0.3, 0.7), (0.6, 0.1)))
    Dt = perturb_denoiser(D, spec, d=3)
    x = np.random.default_rng(3).standard_normal((4, 3))
    if t < 0.3 or t > 0.6:
        np.testing.assert_array_equal(Dt(x, t), D(x, t))
    else:
        assert not np.array_equal(Dt(x, t), D(x, t))


def test_perturbation_is_local_per_row():
    _, D = _base()
    spec = PerturbationSpec("residual", 0.3, 0.6, level=((0.3, 0.5), (0.6, 0.5)))
    Dt = perturb_denoiser(D, spec)
    x = np.random.default_rng(4).standard_normal((4, 3))
    t = np.array([0.1, 0.4, 0.7, 0.5])
    out, ref = Dt(x, t), D(x, t)
    np.testing.assert_array_equal(out[[0, 2]], ref[[0, 2]])
    assert not np.array_equal(out[[1, 3]], ref[[1, 3]])


def test_unresolved_level_rejected():
    _, D = _base()
    with pytest.raises(ValueError):
        perturb_denoiser(D, PerturbationSpec("posshift"), d=3)


def test_invalid_perturbation_specs():
    with pytest.raises(ValueError):
        PerturbationSpec("posshift", 0.5, 0.2)
    with pytest.raises(ValueError):
        PerturbationSpec("posshift", ratio=0.0)


# -- calibration ----------------------------------------------------------------

def test_calibration_unit_ratio_gives_zero():
    ds, D = _base()
    assert calibrate_level(D, ds, "posshift", 0.5, 1.0) == 0.0


@pytest.mark.parametrize("ratio", [0.9, 0.5, 0.25])
def test_calibration_matches_constant_offset_closed_form(ratio):
    # identity denoiser at t = 1: the estimate equals the clean point, so the
    # baseline sits at the cap and PSNR(sigma) = 20 log10(peak / sigma)
    ds = k_points(20, 4, seed=5)
    peak = 2.0
    sig = calibrate_level(identity_denoiser(), ds, "posshift", 1.0, ratio, data_max=peak)
    assert sig == pytest.approx(peak * 10 ** (-ratio * 99.0 / 20.0), rel=1e-6)


@pytest.mark.parametrize("direction", ["posshift", "negshift", "residual"])
def test_calibrated_ratio_is_re_measured(direction):
    ds = k_points(40, 3, seed=6)
    test = Dataset(ds.points + 0.1 * np.random.default_rng(7).standard_normal(ds.points.shape))
    D = gaussian_denoiser(ds)
    spec = calibrate_schedule(D, test, PerturbationSpec(direction, 0.2, 0.8, ratio=0.9), nodes=4,
                              seed=3)
    Dt = perturb_denoiser(D, spec, d=3)
    nodes = [p[0] for p in spec.level]
    _, diff = psnr_curve(Dt, test, nodes, seed=3, baseline=D)
    base = psnr_curve(D, test, nodes, seed=3)
    achieved = (base.values - diff.values) / base.values
    np.testing.assert_allclose(achieved, 0.9, atol=1e-2)


def test_calibration_needs_finite_baseline():
    ds = k_points(3, 2, seed=0)
    D = Denoiser(lambda x, t: np.full_like(x, np.nan))
    with pytest.raises(ValueError):
        calibrate_level(D, ds, "posshift", 0.5, 0.9)


def test_calibration_bracket_failure():
    ds = k_points(3, 2, seed=0)
    with pytest.raises(RuntimeError):
        calibrate_level(identity_denoiser(), ds, "posshift", 1.0, 0.5, max_doublings=1,
                        data_max=1e30)


def test_calibration_without_ratio_rejected():
    ds, D = _base()
    with pytest.raises(ValueError):
        calibrate_schedule(D, ds, PerturbationSpec("posshift", ratio=None))


# -- paired sampling ------------------------------------------------------------

def test_paired_sample_same_model_twice():
    v = gaussian_field(k_points(4, 2, seed=0))
    x0 = np.random.default_rng(8).standard_normal((7, 2))
    ends = paired_sample([v, v], x0, IntegratorSpec("rk4", 20))
    assert ends.shape == (2, 7, 2)
    np.testing.assert_array_equal(ends[0], ends[1])


def test_paired_sample_with_zero_perturbation():
    ds = k_points(4, 2, seed=0)
    D = gaussian_denoiser(ds)
    Dt = perturb_denoiser(D, PerturbationSpec("posshift", 0, 1, level=((0, 0.0), (1, 0.0))), d=2)
    x0 = np.random.default_rng(9).standard_normal((5, 2))
    ends = paired_sample([velocity_from_denoiser(D), velocity_from_denoiser(Dt)], x0,
                         IntegratorSpec("heun", 30))
    np.testing.assert_array_equal(ends[0], ends[1])


def test_paired_sample_threads_match_serial():
    fields = [gaussian_field(k_points(4, 2, seed=s)) for s in range(3)]
    x0 = np.random.default_rng(10).standard_normal((5, 2))
    spec = IntegratorSpec("rk4", 20)
    np.testing.assert_array_equal(paired_sample(fields, x0, spec, threads=3),
                                  paired_sample(fields, x0, spec))


def test_paired_distance_against_row_loop():
    ds = k_points(10, 2, seed=4)
    pd = ParametrizedDenoiser(NetModel.init(2, (16, 16), "gelu", seed=0), "C_IplusNN")
    model = train(ds, pd, WeightingScheme("fm"), TrainConfig(steps=200, batch_size=64)).model
    x0 = np.random.default_rng(11).standard_normal((50, 2))
    ends = paired_sample([gaussian_field(ds), model.as_velocity()], x0, IntegratorSpec("rk4", 50))
    direct = np.mean([np.linalg.norm(ends[0, i] - ends[1, i]) for i in range(50)])
    assert pairwise_distance_matrix(ends)[0, 1] == pytest.approx(direct, rel=1e-12)
