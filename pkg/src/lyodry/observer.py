"""Luenberger observers for bound-water concentration from temperature samples.

Both observers use scalar gains spread with ones: the full-field observer
feeds ``sum_j (T_hat_j - y_j)`` to every equation, the bottom-point observer
feeds ``T_hat_m - y``.  Samples are assimilated with a zero-order hold on the
innovation between sample instants.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp

from .model import (ControlInput, Derivative, Grid, ModelParameters, ProductState,
                    ShelfSchedule, build_grid, make_rhs)
from .simulate import (BOTTOM, FULL, SENSOR_KINDS, IntegratorSettings, MeasurementSeries,
                       StepFailureError, Trajectory, shelf_only, write_table)

DEFAULT_INIT_CS = 0.0314
CONVERGENCE_FRACTION = 0.02


class ShapeMismatchError(ValueError):
    pass


class MisalignmentError(ValueError):
    pass


@dataclass(frozen=True)
class ObserverGains:
    L_T: float
    L_c: float
    sensor_kind: str = FULL

    def __post_init__(self):
        if self.sensor_kind not in SENSOR_KINDS:
            raise ValueError(f"unknown sensor kind {self.sensor_kind!r}")
        if self.L_T > 0 or self.L_c < 0:
            warnings.warn(f"unusual gain signs L_T={self.L_T}, L_c={self.L_c} "
                          "(expected L_T <= 0, L_c >= 0)", stacklevel=2)

    def at(self, t: float) -> "ObserverGains":
        return self


@dataclass(frozen=True)
class GainSchedule:
    """High gains until ``switch_time``, reduced gains afterwards."""

    initial: ObserverGains
    reduced: ObserverGains
    switch_time: float

    def __post_init__(self):
        if not self.switch_time > 0:
            raise ValueError("switch_time must be positive")
        if self.initial.sensor_kind != self.reduced.sensor_kind:
            raise ValueError("scheduled gains must share a sensor kind")

    @property
    def sensor_kind(self) -> str:
        return self.initial.sensor_kind

    def at(self, t: float) -> ObserverGains:
        return self.initial if t < self.switch_time else self.reduced


# default designs
FULL_FIELD_GAINS = ObserverGains(-1e-6, 5e-7, FULL)
BOTTOM_POINT_GAINS = ObserverGains(-5e-3, 1e-4, BOTTOM)


def innovation(T_hat: np.ndarray, y, sensor_kind: str):
    """Output error ``y_hat - y``: an m-vector (full field) or a scalar (bottom point)."""
    y = np.asarray(y, dtype=float)
    if sensor_kind == FULL:
        if y.shape != T_hat.shape:
            raise ShapeMismatchError(f"expected {T_hat.shape} measurement, got {y.shape}")
        return T_hat - y
    if y.size != 1:
        raise ShapeMismatchError(f"bottom-point measurement must be scalar, got shape {y.shape}")
    return float(T_hat[-1] - y.reshape(()))


def correction(innov, gains: ObserverGains, m: int) -> np.ndarray:
    s = float(np.sum(innov))
    return np.concatenate([np.full(m, gains.L_T * s), np.full(m, gains.L_c * s)])


def observer_rhs(est: ProductState, y_sample, gains: ObserverGains, u: ControlInput,
                 params: ModelParameters, grid: Grid | None = None) -> Derivative:
    f, _ = make_rhs(params, grid)
    m = est.m
    d = f(est.to_vector(), u.T_b, u.Q_v)
    d = d + correction(innovation(est.T, y_sample, gains.sensor_kind), gains, m)
    return Derivative(d[:m], d[m:])


class Observer:
    """Streaming observer; call :meth:`update` once per sample, in time order."""

    def __init__(self, params: ModelParameters, gains, init_est: ProductState,
                 sched: ShelfSchedule | None = None,
                 u_policy: Callable[[float], ControlInput] | None = None,
                 settings: IntegratorSettings | None = None,
                 clamp: bool = True):
        params.validate()
        self.params = params
        self.gains = gains
        self.settings = settings or IntegratorSettings()
        self.u_policy = u_policy or shelf_only(sched or ShelfSchedule())
        self.grid = build_grid(params)
        self._f, self._jac = make_rhs(params, self.grid)
        self.m = self.grid.m
        if init_est.m != self.m:
            raise ShapeMismatchError(f"initial estimate has {init_est.m} cells, model has {self.m}")
        self.x = init_est.to_vector()
        self.clamp = clamp
        self.t = None
        self._corr = np.zeros(2 * self.m)
        self._atol = self.settings.atol(self.m)

    @property
    def estimate(self) -> ProductState:
        return ProductState.from_vector(self.x)

    def _advance(self, t_next: float) -> None:
        corr = self._corr
        f, u_policy = self._f, self.u_policy

        def fun(t, x):
            u = u_policy(t)
            return f(x, u.T_b, u.Q_v) + corr

        dt = t_next - self.t
        sol = solve_ivp(fun, (self.t, t_next), self.x, method=self.settings.method,
                        rtol=self.settings.rel_tol, atol=self._atol,
                        max_step=self.settings.max_step, first_step=min(dt, self.settings.max_step),
                        jac=lambda t, x: self._jac(x))
        if sol.status < 0:
            raise StepFailureError(sol.message)
        self.x = sol.y[:, -1].copy()
        if self.clamp:
            np.maximum(self.x[self.m:], 0.0, out=self.x[self.m:])

    def update(self, t: float, y):
        """Assimilate sample ``y`` taken at ``t``; returns the innovation used from ``t`` on."""
        if self.t is not None:
            if t <= self.t:
                raise ValueError(f"samples must arrive in increasing time order ({t} <= {self.t})")
            self._advance(t)
        self.t = float(t)
        g = self.gains.at(self.t)
        innov = innovation(self.x[: self.m], y, g.sensor_kind)
        self._corr = correction(innov, g, self.m)
        return innov


class EstimateTrajectory:
    def __init__(self, times, x, innovations):
        self.times = np.asarray(times, dtype=float)
        self.x = np.asarray(x, dtype=float)
        self.innovations = np.asarray(innovations, dtype=float)
        self.m = self.x.shape[1] // 2
        if not (self.x.shape[0] == self.times.size == self.innovations.shape[0]):
            raise ValueError("estimate arrays must be aligned with times")

    def __len__(self):
        return self.times.size

    @property
    def T(self):
        return self.x[:, : self.m]

    @property
    def c_s(self):
        return self.x[:, self.m:]

    @property
    def c_s_avg(self):
        return self.c_s.mean(axis=1)

    @property
    def T_avg(self):
        return self.T.mean(axis=1)

    def as_trajectory(self) -> Trajectory:
        return Trajectory(self.times, self.x)

    def to_csv(self, path, truth: Trajectory | None = None) -> None:
        m = self.m
        header = (["t_s"] + [f"That_{i + 1}" for i in range(m)]
                  + [f"cshat_{i + 1}" for i in range(m)])
        cols = [self.times[:, None], self.x]
        if truth is not None:
            err = estimation_errors(self, truth)
            header += ["ec_avg", "eT_avg"]
            cols += [err.ec_avg[:, None], err.eT_avg[:, None]]
        write_table(path, header, np.hstack(cols))


def default_initial_estimate(meas: MeasurementSeries, m: int,
                             init_cs: float = DEFAULT_INIT_CS) -> ProductState:
    y0 = meas.values[0]
    T0 = np.full(m, float(y0)) if meas.sensor_kind == BOTTOM else np.array(y0, dtype=float)
    return ProductState(T0, np.full(m, float(init_cs)))


def run_observer(meas: MeasurementSeries, gains, params: ModelParameters,
                 sched: ShelfSchedule | None = None, init_est: ProductState | None = None,
                 settings: IntegratorSettings | None = None,
                 u_policy: Callable[[float], ControlInput] | None = None,
                 init_cs: float = DEFAULT_INIT_CS) -> EstimateTrajectory:
    if len(meas) == 0:
        raise ValueError("empty measurement series")
    if gains.sensor_kind != meas.sensor_kind:
        raise ShapeMismatchError(
            f"gains are for {gains.sensor_kind} but measurements are {meas.sensor_kind}")
    if init_est is None:
        init_est = default_initial_estimate(meas, params.m, init_cs)
    obs = Observer(params, gains, init_est, sched, u_policy, settings)
    xs, innovs = [], []
    for t, y in zip(meas.times, meas.values):
        innovs.append(obs.update(t, y))
        xs.append(obs.x.copy())
    return EstimateTrajectory(meas.times, np.array(xs), np.array(innovs))


def convergence_time(times, err, fraction: float = CONVERGENCE_FRACTION,
                     floor: float = 1e-12) -> float:
    """First time after which ``err`` stays at or below ``fraction * err[0]``.

    Returns ``inf`` when the error is still above the threshold at the last
    sample.  An initial error at or below ``floor`` counts as converged from
    the start: the relative rule is meaningless there, and integrator noise
    alone would otherwise keep it from ever being met.
    """
    times = np.asarray(times, dtype=float)
    err = np.asarray(err, dtype=float)
    if err[0] <= floor:
        return float(times[0])
    thr = fraction * err[0]
    above = np.nonzero(err > thr)[0]
    if above.size == 0:
        return float(times[0])
    last = above[-1]
    if last == err.size - 1:
        return math.inf
    return float(times[last + 1])


@dataclass
class ErrorSeries:
    times: np.ndarray
    e_T: np.ndarray
    e_c: np.ndarray

    @property
    def eT_avg(self) -> np.ndarray:
        return self.e_T.mean(axis=1)

    @property
    def ec_avg(self) -> np.ndarray:
        return self.e_c.mean(axis=1)

    def convergence_time(self, fraction: float = CONVERGENCE_FRACTION) -> float:
        return convergence_time(self.times, self.ec_avg, fraction)


def estimation_errors(est: EstimateTrajectory, truth: Trajectory) -> ErrorSeries:
    if est.m != truth.m:
        raise MisalignmentError(f"estimate has {est.m} cells, truth has {truth.m}")
    tol = 1e-9 * max(1.0, abs(truth.times[-1]))
    if est.times[0] < truth.times[0] - tol or est.times[-1] > truth.times[-1] + tol:
        raise MisalignmentError("estimate times fall outside the truth trajectory span")
    ref = truth.linear(est.times)
    m = est.m
    diff = np.abs(est.x - ref)
    return ErrorSeries(est.times, diff[:, :m], diff[:, m:])
