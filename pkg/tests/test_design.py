import math

import numpy as np
import pytest
import scipy.linalg
from scipy.integrate import solve_ivp
from scipy.optimize import linear_sum_assignment

from lyodry.design import (DecompositionError, DegenerateTimeConstantError, ErrorDynamics,
                           SweepResult, convergence_estimate, design_space_sweep, error_dynamics,
                           finite_difference_jacobian, gain_matrix, jacobian, linearize,
                           modal_contributions, nominal_reference, output_matrix,
                           reference_state, scheduled_gains, sort_eigen, time_constant)
from lyodry.model import (ControlInput, ModelParameters, ProductState, ShelfSchedule,
                          build_grid, desorption_rate_constant, make_rhs)
from lyodry.observer import BOTTOM_POINT_GAINS, FULL_FIELD_GAINS, ObserverGains
from lyodry.simulate import BOTTOM, FULL, Trajectory

HOUR = 3600.0


@pytest.fixture(scope="module")
def reference():
    return nominal_reference(ModelParameters(), ShelfSchedule())


@pytest.fixture(scope="module")
def lin(reference):
    return linearize(ModelParameters(), reference)


def _states():
    rng = np.random.default_rng(0)
    return [ProductState.uniform(20, 241.15, 0.2059),
            ProductState.uniform(20, 290.0, 0.08),
            ProductState(rng.uniform(250, 310, 20), rng.uniform(0.0, 0.3, 20))]


@pytest.mark.parametrize("x_ref", _states())
def test_jacobian_matches_finite_differences(x_ref):
    p = ModelParameters()
    J = jacobian(p, build_grid(p), x_ref)
    Jfd = finite_difference_jacobian(p, x_ref, ControlInput(280.0))
    tol = max(1e-6 * np.abs(J).sum(axis=1).max(), 1e-8)
    assert np.abs(J - Jfd).max() <= tol


def test_jacobian_without_desorption():
    p = ModelParameters(A=0.0)
    J = jacobian(p, None, ProductState.uniform(20, 280.0, 0.1))
    assert np.all(J[20:] == 0)
    J_cond = jacobian(ModelParameters(dH_s=0.0, A=0.0), None, ProductState.uniform(20, 280.0, 0.1))
    np.testing.assert_array_equal(J[:20, :20], J_cond[:20, :20])
    assert np.all(J[:20, 20:] == 0)
    assert np.allclose(J[:20, :20].sum(axis=1)[:-1], 0.0)


def test_jacobian_desorption_entries():
    p = ModelParameters()
    x = _states()[2]
    J = jacobian(p, None, x)
    ks = desorption_rate_constant(x.T, p)
    np.testing.assert_allclose(np.diag(J[20:, 20:]), -ks, rtol=1e-14)
    off = J[20:, 20:] - np.diag(np.diag(J[20:, 20:]))
    assert np.all(off == 0)
    np.testing.assert_allclose(np.diag(J[20:, :20]), -x.c_s * ks * p.E_a / (p.R * x.T ** 2),
                               rtol=1e-13)


def test_reference_constant_trajectory():
    x = np.r_[np.full(3, 280.0), np.full(3, 0.05)]
    ref = reference_state(Trajectory([0.0, 5.0, 10.0], np.tile(x, (3, 1))))
    np.testing.assert_allclose(ref.T, 280.0)
    np.testing.assert_allclose(ref.c_s, 0.05)


def test_reference_two_snapshots():
    traj = Trajectory([0.0, 10.0], np.array([[250.0, 250.0, 0.2, 0.2], [270.0, 270.0, 0.0, 0.0]]))
    ref = reference_state(traj)
    assert ref.c_s[0] == pytest.approx(0.1) and ref.T[0] == pytest.approx(260.0)


def test_reference_default_run(reference):
    assert 241.15 < reference.T[0] < 313.15
    assert np.ptp(reference.T) == 0 and np.ptp(reference.c_s) == 0


def test_output_matrices():
    C = output_matrix(20, FULL)
    assert C.shape == (20, 40) and np.array_equal(C[:, :20], np.eye(20)) and not C[:, 20:].any()
    Cb = output_matrix(20, BOTTOM)
    assert Cb.shape == (1, 40) and Cb[0, 19] == 1 and Cb.sum() == 1


def test_zero_gains_give_open_loop_spectrum(lin):
    ed = error_dynamics(lin, ObserverGains(0.0, 0.0))
    ref = np.linalg.eigvals(lin.Fprime_ref)
    np.testing.assert_allclose(np.sort_complex(ed.eigenvalues), np.sort_complex(ref), rtol=1e-9)
    assert np.all(ed.eigenvalues.real <= 0)


def test_default_gains_stable(lin):
    ed = error_dynamics(lin, FULL_FIELD_GAINS)
    assert ed.eigenvalues.size == 40 and ed.stable


def test_positive_temperature_gain_destabilizes(lin):
    with pytest.warns(UserWarning):
        g = ObserverGains(1e-3, 5e-7)
    ed = error_dynamics(lin, g)
    assert not ed.stable and ed.eigenvalues.real.max() > 0


def test_sensor_kind_must_match(lin):
    with pytest.raises(ValueError):
        error_dynamics(lin, BOTTOM_POINT_GAINS)


def test_eigen_sort_order():
    lam = np.array([-1 + 2j, -10, -1 - 2j, -1 + 0j, -10 + 1j])
    out, _ = sort_eigen(lam)
    assert list(out) == [-10 + 1j, -10, -1 + 2j, -1 - 2j, -1 + 0j]


def test_time_constant_diagonal():
    ed = ErrorDynamics.from_matrix(np.diag([-1.0, -10.0]))
    assert time_constant(ed) == 1.0


def test_time_constant_degenerate():
    with pytest.raises(DegenerateTimeConstantError):
        time_constant(ErrorDynamics.from_matrix(np.diag([-1.0, 0.0])))


def test_default_convergence_estimate(lin):
    ed = error_dynamics(lin, FULL_FIELD_GAINS)
    assert 1 * HOUR <= convergence_estimate(ed) <= 3 * HOUR


def test_zero_gain_pure_desorption_time_constant():
    # dry reference: concentration rows decouple, slowest modes are -k_s
    p = ModelParameters()
    x = ProductState.uniform(20, 287.0, 0.0)
    ed = error_dynamics(linearize(p, x), ObserverGains(0.0, 0.0))
    assert time_constant(ed) == pytest.approx(1 / desorption_rate_constant(287.0, p), rel=1e-9)


def test_modal_single_eigenvector(lin):
    ed = error_dynamics(lin, FULL_FIELD_GAINS)
    real_modes = np.nonzero(np.abs(ed.eigenvalues.imag) == 0)[0]
    k = real_modes[0]
    mc = modal_contributions(ed, ed.U[:, k].real)
    weights = np.abs(ed.V @ ed.U[:, k].real)
    assert np.all(np.delete(weights, k) < 1e-10 * weights[k])
    assert np.abs(np.delete(mc.nu_ip, k, axis=1)).max() < 1e-10
    assert mc.reconstruction_error < 1e-8


def test_modal_reconstruction_and_dominance(lin, reference):
    ed = error_dynamics(lin, FULL_FIELD_GAINS)
    e0 = np.r_[np.zeros(20), np.full(20, 0.0314 - 0.2059)]
    mc = modal_contributions(ed, e0)
    assert mc.reconstruction_error < 1e-8
    dominant = np.abs(mc.nu_p[[19, 20]])
    rest = np.delete(np.abs(mc.nu_p), [19, 20])
    assert dominant.min() / rest.max() > 1e3


def test_defective_matrix_falls_back():
    ed = ErrorDynamics.from_matrix(np.array([[-1.0, 1.0], [0.0, -1.0]]))
    assert not ed.diagonalizable
    np.testing.assert_allclose(ed.eigenvalues, [-1, -1], atol=1e-7)
    with pytest.raises(DecompositionError):
        modal_contributions(ed, np.ones(2))


def test_eigenvalue_continuity(lin):
    base = error_dynamics(lin, FULL_FIELD_GAINS).eigenvalues
    for f in (0.99, 1.01):
        g = ObserverGains(FULL_FIELD_GAINS.L_T * f, FULL_FIELD_GAINS.L_c * f)
        lam = error_dynamics(lin, g).eigenvalues
        cost = np.abs(base[:, None] - lam[None, :])
        r, c = linear_sum_assignment(cost)
        assert np.all(cost[r, c] <= 0.05 * np.abs(base[r]) + 1e-12)


def test_linearization_fidelity(lin, reference):
    """Nonlinear error dynamics around the reference follow the linear prediction over 2 tau."""
    p = ModelParameters()
    ed = error_dynamics(lin, FULL_FIELD_GAINS)
    tau = time_constant(ed)
    f, jac = make_rhs(p)
    xr, Tb = reference.to_vector(), reference.T[0]
    L = gain_matrix(FULL_FIELD_GAINS, 20)
    LC = L @ lin.C
    e0 = np.r_[np.zeros(20), np.full(20, 0.01 * reference.c_s[0])]
    t = np.linspace(0, 2 * tau, 9)
    sol = solve_ivp(lambda _, e: f(xr + e, Tb) - f(xr, Tb) + LC @ e, (0, t[-1]), e0, t_eval=t,
                    method="Radau", rtol=1e-9, atol=1e-13, jac=lambda _, e: jac(xr + e) + LC)
    nonlinear = np.abs(sol.y[20:]).mean(axis=0)
    linear = np.array([np.abs(scipy.linalg.expm(ed.M * s) @ e0)[20:].mean() for s in t])
    np.testing.assert_allclose(nonlinear, linear, rtol=0.2)


def test_scheduled_switch_at_four_tau(lin):
    sched = scheduled_gains(FULL_FIELD_GAINS, ObserverGains(-1e-6, 1e-7), lin)
    assert sched.switch_time == pytest.approx(4 * time_constant(error_dynamics(lin, FULL_FIELD_GAINS)))


def test_eigen_sweep_flags_and_csv(tmp_path, reference):
    res = design_space_sweep([-1e-6, 1e-3], [5e-7], reference=reference)
    cells = res.table()
    assert cells[(-1e-6, 5e-7)].stable and 1 * HOUR <= cells[(-1e-6, 5e-7)].conv_time_s <= 3 * HOUR
    assert not cells[(1e-3, 5e-7)].stable and math.isinf(cells[(1e-3, 5e-7)].conv_time_s)
    res.to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "L_T,L_c,conv_time_s,stable,oscillatory,method"
    assert lines[1].endswith("true,false,eigen")


def test_simulation_sweep_single_cell(reference):
    res = design_space_sweep([-1e-6], [5e-7], reference=reference, method="simulation",
                             horizon=6 * HOUR)
    assert 1 * HOUR <= res.cells[0].conv_time_s <= 3 * HOUR


def test_sweep_rejects_unknown_method():
    with pytest.raises(ValueError):
        design_space_sweep([-1e-6], [5e-7], method="guess")
