"""Linearized observer error dynamics and gain design tools."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .model import ControlInput, Grid, ModelParameters, ProductState, ShelfSchedule, make_rhs
from .observer import (DEFAULT_INIT_CS, GainSchedule, ObserverGains, convergence_time,
                       estimation_errors, run_observer)
from .simulate import (BOTTOM, FULL, IntegratorSettings, Trajectory, integrate,
                       run_until_dry, sample_measurements, write_table)


class DecompositionError(RuntimeError):
    pass


class DegenerateTimeConstantError(ValueError):
    pass


def jacobian(params: ModelParameters, grid: Grid | None, x_ref: ProductState,
             u_ref: ControlInput | None = None) -> np.ndarray:
    """Analytic Jacobian of the model right-hand side at ``x_ref``.

    The inputs enter linearly, so ``u_ref`` does not affect the result.
    """
    _, jac = make_rhs(params, grid)
    return jac(x_ref.to_vector())


def finite_difference_jacobian(params: ModelParameters, x_ref: ProductState,
                               u_ref: ControlInput, rel_step: float = 1e-6) -> np.ndarray:
    f, _ = make_rhs(params)
    x = x_ref.to_vector()
    n = x.size
    J = np.empty((n, n))
    for j in range(n):
        h = rel_step * max(1.0, abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        J[:, j] = (f(xp, u_ref.T_b, u_ref.Q_v) - f(xm, u_ref.T_b, u_ref.Q_v)) / (2 * h)
    return J


def reference_state(traj: Trajectory) -> ProductState:
    """Uniform state at the time-and-space mean of the trajectory."""
    m = traj.m
    if len(traj) == 1:
        xbar = traj.x[0]
    else:
        span = traj.times[-1] - traj.times[0]
        xbar = np.trapezoid(traj.x, traj.times, axis=0) / span
    return ProductState.uniform(m, xbar[:m].mean(), xbar[m:].mean())


def nominal_reference(params: ModelParameters, sched: ShelfSchedule,
                      threshold: float = 0.01,
                      settings: IntegratorSettings | None = None) -> ProductState:
    traj, _ = run_until_dry(params, sched, threshold, settings)
    return reference_state(traj)


def output_matrix(m: int, sensor_kind: str = FULL) -> np.ndarray:
    if sensor_kind == FULL:
        return np.hstack([np.eye(m), np.zeros((m, m))])
    C = np.zeros((1, 2 * m))
    C[0, m - 1] = 1.0
    return C


def gain_matrix(gains: ObserverGains, m: int) -> np.ndarray:
    p = m if gains.sensor_kind == FULL else 1
    return np.vstack([np.full((m, p), gains.L_T), np.full((m, p), gains.L_c)])


@dataclass
class LinearizedSystem:
    F_ref: np.ndarray
    Fprime_ref: np.ndarray
    x_ref: ProductState
    C: np.ndarray

    @property
    def m(self) -> int:
        return self.x_ref.m

    @property
    def sensor_kind(self) -> str:
        return FULL if self.C.shape[0] == self.m else BOTTOM


def linearize(params: ModelParameters, x_ref: ProductState, u_ref: ControlInput | None = None,
              sensor_kind: str = FULL) -> LinearizedSystem:
    u_ref = u_ref or ControlInput(T_b=float(x_ref.T.mean()))
    f, jac = make_rhs(params)
    x = x_ref.to_vector()
    return LinearizedSystem(f(x, u_ref.T_b, u_ref.Q_v), jac(x), x_ref,
                            output_matrix(x_ref.m, sensor_kind))


def sort_eigen(lam: np.ndarray, U: np.ndarray | None = None):
    """Order fastest to slowest: descending |Re|, then descending |Im|, positive Im first."""
    order = np.lexsort((-lam.imag, -np.abs(lam.imag), -np.abs(lam.real)))
    return lam[order], (None if U is None else U[:, order])


@dataclass
class ErrorDynamics:
    M: np.ndarray
    eigenvalues: np.ndarray
    U: np.ndarray | None
    V: np.ndarray | None

    @property
    def m(self) -> int:
        return self.M.shape[0] // 2

    @property
    def stable(self) -> bool:
        return bool(np.all(self.eigenvalues.real < 0))

    @property
    def diagonalizable(self) -> bool:
        return self.V is not None

    @property
    def dominant_pair(self) -> np.ndarray:
        m = self.m
        return self.eigenvalues[max(m - 1, 0): m + 1]

    @property
    def oscillatory(self) -> bool:
        return bool(np.any(np.abs(self.dominant_pair.imag) > np.abs(self.dominant_pair.real)))

    @classmethod
    def from_matrix(cls, M: np.ndarray, cond_limit: float = 1e12) -> "ErrorDynamics":
        M = np.asarray(M, dtype=float)
        if not np.all(np.isfinite(M)):
            raise DecompositionError("matrix has non-finite entries")
        lam, U = np.linalg.eig(M)
        lam, U = sort_eigen(lam, U)
        if np.linalg.cond(U) > cond_limit:
            # nearly defective: keep Schur eigenvalues, drop the modal basis
            T, _ = scipy.linalg.schur(M.astype(complex), output="complex")
            lam, _ = sort_eigen(np.diag(T).copy())
            return cls(M, lam, None, None)
        return cls(M, lam, U, np.linalg.inv(U))


def error_dynamics(lin: LinearizedSystem, gains: ObserverGains) -> ErrorDynamics:
    if gains.sensor_kind != lin.sensor_kind:
        raise ValueError(f"gains for {gains.sensor_kind} but output map is {lin.sensor_kind}")
    M = lin.Fprime_ref + gain_matrix(gains, lin.m) @ lin.C
    return ErrorDynamics.from_matrix(M)


def time_constant(ed: ErrorDynamics) -> float:
    """``1 / |Re(lambda_{m+1})|`` with eigenvalues ordered fastest to slowest."""
    re = ed.eigenvalues[ed.m].real
    if re == 0:
        raise DegenerateTimeConstantError("lambda_{m+1} has zero real part")
    return 1.0 / abs(re)


def convergence_estimate(ed: ErrorDynamics) -> float:
    return 4.0 * time_constant(ed)


@dataclass
class ModalContributions:
    nu_ip: np.ndarray     # (2m, 2m) complex, row i = state, column p = mode
    nu_p: np.ndarray      # (2m,) real part of the concentration-row average
    reconstruction_error: float


def modal_contributions(ed: ErrorDynamics, e0) -> ModalContributions:
    if not ed.diagonalizable:
        raise DecompositionError("no complete eigenvector set; modal coefficients unavailable")
    e0 = np.asarray(e0, dtype=float)
    m = ed.m
    weights = ed.V @ e0
    nu_ip = ed.U * weights[None, :]
    nu_p = nu_ip[m:, :].mean(axis=0).real
    recon = nu_ip.sum(axis=1).real
    scale = max(np.max(np.abs(e0)), np.finfo(float).tiny)
    return ModalContributions(nu_ip, nu_p, float(np.max(np.abs(recon - e0)) / scale))


def scheduled_gains(high: ObserverGains, low: ObserverGains, lin: LinearizedSystem,
                    multiple: float = 4.0) -> GainSchedule:
    """Switch from ``high`` to ``low`` at ``multiple`` time constants of the high-gain design."""
    tau = time_constant(error_dynamics(lin, high))
    return GainSchedule(high, low, multiple * tau)


# ---------------------------------------------------------------- sweeps

@dataclass
class SweepCell:
    L_T: float
    L_c: float
    conv_time_s: float
    stable: bool
    oscillatory: bool
    method: str


@dataclass
class SweepResult:
    cells: list[SweepCell]

    def to_csv(self, path) -> None:
        rows = [[c.L_T, c.L_c, c.conv_time_s, c.stable, c.oscillatory, c.method] for c in self.cells]
        write_table(path, ["L_T", "L_c", "conv_time_s", "stable", "oscillatory", "method"], rows)

    def table(self) -> dict[tuple[float, float], SweepCell]:
        return {(c.L_T, c.L_c): c for c in self.cells}


# Gain grid of the design-space map: L_T over four decades, L_c on a 1-2-5 ladder.
FIG4_LT = (-1e-7, -1e-6, -1e-5, -1e-4)
FIG4_LC = (1e-8, 2e-8, 5e-8, 1e-7, 2e-7, 5e-7, 1e-6, 2e-6, 5e-6)


@dataclass
class _SimContext:
    params: ModelParameters
    sched: ShelfSchedule
    truth: Trajectory
    meas: object
    init_cs: float
    settings: IntegratorSettings | None


def _simulated_time(ctx: _SimContext, L_T: float, L_c: float) -> float:
    gains = ObserverGains(L_T, L_c, ctx.meas.sensor_kind)
    try:
        est = run_observer(ctx.meas, gains, ctx.params, ctx.sched, settings=ctx.settings,
                           init_cs=ctx.init_cs)
        err = estimation_errors(est, ctx.truth)
    except Exception:
        return math.nan
    if not np.all(np.isfinite(err.ec_avg)):
        return math.nan
    return convergence_time(err.times, err.ec_avg)


def _sim_task(args):
    ctx, L_T, L_c = args
    return _simulated_time(ctx, L_T, L_c)


def design_space_sweep(LT_values=FIG4_LT, Lc_values=FIG4_LC,
                       params: ModelParameters | None = None,
                       sched: ShelfSchedule | None = None,
                       method: str = "eigen", sensor_kind: str = FULL,
                       reference: ProductState | None = None,
                       horizon: float = 16 * 3600.0, period: float = 10.0,
                       init_cs: float = DEFAULT_INIT_CS,
                       settings: IntegratorSettings | None = None,
                       workers: int = 1) -> SweepResult:
    """Convergence time over a grid of gain pairs.

    ``method="eigen"`` reports ``4 tau`` of the linearized error dynamics;
    ``method="simulation"`` runs the sampled observer against a noise-free
    truth and applies the 2 % rule.  Stability and oscillation flags always
    come from the eigenvalues.  Failed cells get ``nan``.
    """
    params = params or ModelParameters()
    sched = sched or ShelfSchedule()
    if method not in ("eigen", "simulation"):
        raise ValueError(f"unknown sweep method {method!r}")
    if reference is None:
        reference = nominal_reference(params, sched, settings=settings)
    lin = linearize(params, reference, sensor_kind=sensor_kind)
    pairs = [(float(lt), float(lc)) for lt in LT_values for lc in Lc_values]
    flags = []
    for lt, lc in pairs:
        try:
            ed = error_dynamics(lin, ObserverGains(lt, lc, sensor_kind))
            t4 = convergence_estimate(ed) if ed.stable else math.inf
            flags.append((t4, ed.stable, ed.oscillatory))
        except (DecompositionError, DegenerateTimeConstantError):
            flags.append((math.nan, False, False))

    if method == "eigen":
        times = [f[0] for f in flags]
    else:
        truth = integrate(params, sched, t_span=(0.0, horizon), settings=settings,
                          t_eval=np.arange(0.0, horizon + period / 2, period))
        meas = sample_measurements(truth, period, sensor_kind)
        ctx = _SimContext(params, sched, truth, meas, init_cs, settings)
        tasks = [(ctx, lt, lc) for lt, lc in pairs]
        if workers > 1:
            with ProcessPoolExecutor(workers) as pool:
                times = list(pool.map(_sim_task, tasks))
        else:
            times = [_sim_task(t) for t in tasks]

    cells = [SweepCell(lt, lc, float(t), st, osc, method)
             for (lt, lc), t, (_, st, osc) in zip(pairs, times, flags)]
    return SweepResult(cells)
