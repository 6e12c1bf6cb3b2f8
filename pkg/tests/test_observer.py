import numpy as np
import pytest

from lyodry.model import ControlInput, ModelParameters, ProductState, ShelfSchedule, rhs
from lyodry.observer import (BOTTOM_POINT_GAINS, FULL_FIELD_GAINS, EstimateTrajectory,
                             GainSchedule, MisalignmentError, Observer, ObserverGains,
                             ShapeMismatchError, convergence_time, correction,
                             estimation_errors, innovation, observer_rhs, run_observer)
from lyodry.simulate import (BOTTOM, FULL, IntegratorSettings, Trajectory, integrate,
                             sample_measurements)

HOUR = 3600.0
TIGHT = IntegratorSettings(rel_tol=1e-9, abs_tol_T=1e-9, abs_tol_c=1e-12)


@pytest.fixture(scope="module")
def tight_truth():
    p = ModelParameters()
    t = np.arange(0.0, 10 * HOUR + 5.0, 10.0)
    truth = integrate(p, ShelfSchedule(), t_span=(0.0, t[-1]), t_eval=t, settings=TIGHT)
    return truth, sample_measurements(truth, 10.0)


def test_zero_gains_reduce_to_model():
    p = ModelParameters()
    est = ProductState.uniform(20, 250.0, 0.15)
    u = ControlInput(260.0)
    y = np.full(20, 255.0)
    d = observer_rhs(est, y, ObserverGains(0.0, 0.0), u, p)
    ref = rhs(est, u, p)
    np.testing.assert_array_equal(d.T, ref.T)
    np.testing.assert_array_equal(d.c_s, ref.c_s)


def test_perfect_output_gives_no_correction():
    p = ModelParameters()
    est = ProductState.uniform(20, 250.0, 0.15)
    u = ControlInput(260.0)
    d = observer_rhs(est, est.T.copy(), FULL_FIELD_GAINS, u, p)
    np.testing.assert_array_equal(d.c_s, rhs(est, u, p).c_s)


def test_ones_matrix_correction_two_cells():
    corr = correction(innovation(np.array([251.0, 251.0]), np.array([250.0, 250.0]), FULL),
                      ObserverGains(-1e-6, 5e-7), 2)
    np.testing.assert_allclose(corr[2:], 1e-6, rtol=1e-15)
    np.testing.assert_allclose(corr[:2], -2e-6, rtol=1e-15)


def test_bottom_point_correction_uses_last_cell():
    T_hat = np.array([240.0, 250.0, 262.0])
    innov = innovation(T_hat, 260.0, BOTTOM)
    assert innov == 2.0
    corr = correction(innov, ObserverGains(-5e-3, 1e-4, BOTTOM), 3)
    np.testing.assert_allclose(corr, [-1e-2] * 3 + [2e-4] * 3)


def test_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        innovation(np.zeros(20) + 250, np.zeros(19) + 250, FULL)
    with pytest.raises(ShapeMismatchError):
        innovation(np.zeros(20) + 250, np.zeros(3) + 250, BOTTOM)


def test_gain_sign_warning():
    with pytest.warns(UserWarning):
        ObserverGains(1e-6, 5e-7)


def test_gain_schedule_switches_once():
    g = GainSchedule(ObserverGains(-1e-6, 5e-7), ObserverGains(-1e-6, 1e-7), 100.0)
    assert g.at(99.9).L_c == 5e-7 and g.at(100.0).L_c == 1e-7 and g.at(1e6).L_c == 1e-7
    with pytest.raises(ValueError):
        GainSchedule(ObserverGains(-1e-6, 5e-7), ObserverGains(-1e-6, 1e-7), 0.0)
    with pytest.raises(ValueError):
        GainSchedule(FULL_FIELD_GAINS, BOTTOM_POINT_GAINS, 10.0)


def test_default_observer_converges(default_truth, default_meas):
    est = run_observer(default_meas, FULL_FIELD_GAINS, ModelParameters(), ShelfSchedule())
    err = estimation_errors(est, default_truth)
    assert err.ec_avg[0] == pytest.approx(0.2059 - 0.0314)
    assert 1 * HOUR <= err.convergence_time() <= 3 * HOUR


def test_exact_initial_estimate_stays_exact(tight_truth):
    truth, meas = tight_truth
    p = ModelParameters()
    est = run_observer(meas, FULL_FIELD_GAINS, p, ShelfSchedule(), settings=TIGHT,
                       init_est=ProductState.uniform(20, p.T_0, p.c_s0))
    err = estimation_errors(est, truth)
    assert err.ec_avg.max() < 1e-6
    assert err.eT_avg.max() < 1e-4


def test_zero_gain_observer_is_open_loop(tight_truth):
    _, meas = tight_truth
    p = ModelParameters()
    init = ProductState.uniform(20, p.T_0, 0.1)
    est = run_observer(meas, ObserverGains(0.0, 0.0), p, ShelfSchedule(), init_est=init,
                       settings=TIGHT)
    open_loop = integrate(p, ShelfSchedule(), t_span=(0, meas.times[-1]),
                          x0=init.to_vector(), t_eval=meas.times, settings=TIGHT)
    assert np.abs(est.T - open_loop.T).max() < 1e-3
    assert np.abs(est.c_s - open_loop.c_s).max() < 1e-6


def test_innovation_decays_after_first_hour(default_truth, default_meas):
    est = run_observer(default_meas, FULL_FIELD_GAINS, ModelParameters(), ShelfSchedule())
    norm = np.linalg.norm(est.innovations, axis=1)
    hourly = [norm[(est.times >= h * HOUR) & (est.times < (h + 1) * HOUR)].max() for h in range(10)]
    # never returns to the first-hour level; strictly shrinking once the shelf holds (5 h)
    assert max(hourly[1:]) < hourly[0]
    assert all(b < a for a, b in zip(hourly[5:], hourly[6:]))


def test_streaming_requires_time_order():
    p = ModelParameters()
    obs = Observer(p, FULL_FIELD_GAINS, ProductState.uniform(20, p.T_0, 0.03))
    obs.update(0.0, np.full(20, p.T_0))
    obs.update(10.0, np.full(20, p.T_0))
    with pytest.raises(ValueError):
        obs.update(10.0, np.full(20, p.T_0))


def test_concentration_estimate_clamped():
    p = ModelParameters()
    obs = Observer(p, ObserverGains(0.0, 1e-3), ProductState.uniform(20, 250.0, 0.0))
    obs.update(0.0, np.full(20, 260.0))   # innovation -200 K drives c_hat down hard
    obs.update(10.0, np.full(20, 260.0))
    assert obs.estimate.c_s.min() >= 0.0


def test_mismatched_sensor_kind(default_meas):
    with pytest.raises(ShapeMismatchError):
        run_observer(default_meas, BOTTOM_POINT_GAINS, ModelParameters())


def test_errors_identical_trajectories(default_truth):
    est = EstimateTrajectory(default_truth.times, default_truth.x,
                             np.zeros((len(default_truth), 20)))
    err = estimation_errors(est, default_truth)
    assert err.ec_avg.max() == 0 and err.eT_avg.max() == 0
    assert err.convergence_time() == 0.0


def test_errors_constant_offset(default_truth):
    x = default_truth.x.copy()
    x[:, 20:] += 0.003
    est = EstimateTrajectory(default_truth.times, x, np.zeros((len(default_truth), 20)))
    np.testing.assert_allclose(estimation_errors(est, default_truth).ec_avg, 0.003, rtol=1e-9)


def test_errors_misaligned(default_truth):
    est = EstimateTrajectory([0.0, 1e9], default_truth.x[:2], np.zeros((2, 20)))
    with pytest.raises(MisalignmentError):
        estimation_errors(est, default_truth)


def test_truth_resampled_linearly():
    truth = Trajectory([0.0, 10.0], np.array([[1.0, 1.0, 0.0, 0.0], [1.0, 1.0, 0.2, 0.4]]))
    est = EstimateTrajectory([5.0], np.array([[1.0, 1.0, 0.1, 0.2]]), np.zeros((1, 2)))
    assert estimation_errors(est, truth).ec_avg[0] == pytest.approx(0.0, abs=1e-15)


def test_convergence_time_rules():
    t = np.arange(6.0)
    assert convergence_time(t, [1.0, 0.5, 0.01, 0.03, 0.01, 0.0]) == 4.0
    assert convergence_time(t, [1.0, 0.5, 0.4, 0.3, 0.2, 0.1]) == float("inf")
    assert convergence_time(t, np.zeros(6)) == 0.0
    # a correct start stays "converged" even when solver noise appears later
    assert convergence_time(t, [0.0, 1e-9, 2e-9, 0.0, 1e-9, 1e-9]) == 0.0


def test_estimate_csv_columns(tmp_path, default_truth, default_meas):
    est = run_observer(sample_measurements(Trajectory(default_truth.times[:30],
                                                      default_truth.x[:30]), 10.0),
                       FULL_FIELD_GAINS, ModelParameters())
    est.to_csv(tmp_path / "e.csv", default_truth)
    header = (tmp_path / "e.csv").read_text().splitlines()[0].split(",")
    assert header[0] == "t_s" and header[1] == "That_1" and header[21] == "cshat_1"
    assert header[-2:] == ["ec_avg", "eT_avg"]
