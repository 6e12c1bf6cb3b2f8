"""Method-of-lines time integration, dense output, and sampled measurements."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp

from .model import (ControlInput, ModelParameters, ProductState, ShelfSchedule,
                    build_grid, initial_state, make_rhs, shelf_temperature)

FULL = "full-field"
BOTTOM = "bottom-point"
SENSOR_KINDS = (FULL, BOTTOM)


class StepFailureError(RuntimeError):
    pass


class NotReachedError(RuntimeError):
    pass


@dataclass(frozen=True)
class IntegratorSettings:
    rel_tol: float = 1e-6
    abs_tol_T: float = 1e-6
    abs_tol_c: float = 1e-9
    max_step: float = 60.0
    method: str = "BDF"

    def __post_init__(self):
        if min(self.rel_tol, self.abs_tol_T, self.abs_tol_c, self.max_step) <= 0:
            raise ValueError("integrator tolerances and max_step must be positive")

    def atol(self, m: int) -> np.ndarray:
        return np.concatenate([np.full(m, self.abs_tol_T), np.full(m, self.abs_tol_c)])


def shelf_only(sched: ShelfSchedule) -> Callable[[float], ControlInput]:
    return lambda t: ControlInput(shelf_temperature(t, sched), 0.0)


def _hermite(t0, t1, x0, x1, d0, d1, t):
    h = t1 - t0
    s = (t - t0) / h
    s2 = s * s
    s3 = s2 * s
    h00 = 2 * s3 - 3 * s2 + 1
    h10 = s3 - 2 * s2 + s
    h01 = -2 * s3 + 3 * s2
    h11 = s3 - s2
    return h00 * x0 + h10 * h * d0 + h01 * x1 + h11 * h * d1


class Trajectory:
    """Time-ordered model states with cubic Hermite dense output.

    ``x`` has shape ``(n, 2m)`` (temperatures then concentrations) and
    ``dx`` holds the matching time derivatives used by the interpolant.
    """

    def __init__(self, times, x, dx=None):
        self.times = np.asarray(times, dtype=float)
        self.x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.x.shape[0] != self.times.size:
            raise ValueError("states and times must have equal length")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        self.dx = None if dx is None else np.asarray(dx, dtype=float)
        self.m = self.x.shape[1] // 2

    def __len__(self):
        return self.times.size

    @property
    def T(self) -> np.ndarray:
        return self.x[:, : self.m]

    @property
    def c_s(self) -> np.ndarray:
        return self.x[:, self.m:]

    @property
    def T_avg(self) -> np.ndarray:
        return self.T.mean(axis=1)

    @property
    def c_s_avg(self) -> np.ndarray:
        return self.c_s.mean(axis=1)

    def state(self, i: int) -> ProductState:
        return ProductState.from_vector(self.x[i])

    def __call__(self, t) -> np.ndarray:
        """Interpolated state vector(s) at time(s) ``t``."""
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        if t.min() < self.times[0] - 1e-9 or t.max() > self.times[-1] + 1e-9:
            raise ValueError("interpolation outside trajectory span")
        if len(self) == 1:
            out = np.repeat(self.x[:1], t.size, axis=0)
            return out[0] if scalar else out
        i = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self) - 2)
        t0, t1 = self.times[i][:, None], self.times[i + 1][:, None]
        x0, x1 = self.x[i], self.x[i + 1]
        if self.dx is None:
            w = (t[:, None] - t0) / (t1 - t0)
            out = (1 - w) * x0 + w * x1
        else:
            out = _hermite(t0, t1, x0, x1, self.dx[i], self.dx[i + 1], t[:, None])
        return out[0] if scalar else out

    def linear(self, t) -> np.ndarray:
        """Piecewise-linear resampling at times ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.column_stack([np.interp(t, self.times, col) for col in self.x.T])

    def to_csv(self, path, extra: dict[str, np.ndarray] | None = None) -> None:
        header = ["t_s"] + [f"T_{i + 1}" for i in range(self.m)] + [f"cs_{i + 1}" for i in range(self.m)]
        cols = [self.times[:, None], self.x]
        for name, values in (extra or {}).items():
            header.append(name)
            cols.append(np.asarray(values, dtype=float)[:, None])
        write_table(path, header, np.hstack(cols))

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        header, data = read_table(path)
        m = sum(1 for h in header if h.startswith("T_") and h[2:].isdigit())
        return cls(data[:, 0], data[:, 1: 1 + 2 * m])


def write_table(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        if isinstance(rows, np.ndarray):
            rows = np.atleast_2d(rows)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, str):
        return v
    return format(float(v), ".15g")


def read_table(path) -> tuple[list[str], np.ndarray]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header = [h.strip() for h in rows[0]]
    data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    return header, data.reshape(-1, len(header))


def integrate(params: ModelParameters, sched: ShelfSchedule,
              u_policy: Callable[[float], ControlInput] | None = None,
              t_span: tuple[float, float] = (0.0, 36000.0),
              settings: IntegratorSettings | None = None,
              x0=None, t_eval=None, events=None) -> Trajectory:
    """Integrate the discretized model over ``t_span``.

    Starts from the uniform initial state unless ``x0`` is given.  Stored
    points are the accepted solver steps, or ``t_eval`` when supplied.
    """
    settings = settings or IntegratorSettings()
    params.validate()
    u_policy = u_policy or shelf_only(sched)
    grid = build_grid(params)
    f, jac = make_rhs(params, grid)
    x0 = initial_state(params).to_vector() if x0 is None else np.asarray(x0, dtype=float)
    t0, t1 = float(t_span[0]), float(t_span[1])
    if t1 < t0:
        raise ValueError("t_span must be nondecreasing")
    if t1 == t0:
        u = u_policy(t0)
        return Trajectory([t0], x0[None, :], f(x0, u.T_b, u.Q_v)[None, :])

    def fun(t, x):
        u = u_policy(t)
        return f(x, u.T_b, u.Q_v)

    sol = solve_ivp(fun, (t0, t1), x0, method=settings.method, rtol=settings.rel_tol,
                    atol=settings.atol(grid.m), max_step=settings.max_step,
                    jac=lambda t, x: jac(x), t_eval=t_eval, events=events)
    if sol.status < 0:
        raise StepFailureError(sol.message)
    xs = sol.y.T
    dx = np.array([fun(t, x) for t, x in zip(sol.t, xs)])
    traj = Trajectory(sol.t, xs, dx)
    traj.solver_result = sol
    return traj


def run_until_dry(params: ModelParameters, sched: ShelfSchedule, threshold: float = 0.01,
                  settings: IntegratorSettings | None = None,
                  u_policy: Callable[[float], ControlInput] | None = None,
                  horizon: float = 200 * 3600.0) -> tuple[Trajectory, float]:
    """Integrate until the mean concentration first drops to ``threshold``.

    The crossing is bracketed by a terminal solver event and then refined by
    bisection on the Hermite interpolant to below one second.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    if params.c_s0 <= threshold:
        traj = integrate(params, sched, u_policy, (0.0, 0.0), settings)
        return traj, 0.0
    m = params.m

    def event(t, x):
        return x[m:].mean() - threshold
    event.terminal = True
    event.direction = -1

    traj = integrate(params, sched, u_policy, (0.0, horizon), settings, events=event)
    # the event root can sit a rounding error above the threshold, so trust the solver flag
    if traj.solver_result.status != 1:
        raise NotReachedError(f"c_s_avg did not reach {threshold} within {horizon / 3600:.1f} h")
    lo, hi = traj.times[-2], traj.times[-1]
    while hi - lo > 1e-3:
        mid = 0.5 * (lo + hi)
        if traj(mid)[m:].mean() > threshold:
            lo = mid
        else:
            hi = mid
    return traj, hi


@dataclass
class MeasurementSeries:
    times: np.ndarray
    values: np.ndarray
    sensor_kind: str = FULL
    noise_sigma: float = 0.0
    rng_seed: int | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.sensor_kind not in SENSOR_KINDS:
            raise ValueError(f"unknown sensor kind {self.sensor_kind!r}")
        if self.values.shape[0] != self.times.size:
            raise ValueError("values and times must have equal length")
        if self.sensor_kind == BOTTOM and self.values.ndim != 1:
            raise ValueError("bottom-point series must hold one scalar per sample")
        if self.sensor_kind == FULL and self.values.ndim != 2:
            raise ValueError("full-field series must hold one vector per sample")
        if self.times.size > 2:
            d = np.diff(self.times)
            if np.max(np.abs(d - d[0])) > 1e-9 * max(1.0, self.times[-1]):
                raise ValueError("sample spacing must be uniform")

    def __len__(self):
        return self.times.size

    @property
    def period(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self) > 1 else float("nan")

    def to_csv(self, path) -> None:
        if self.sensor_kind == BOTTOM:
            header = ["t_s", "T_p"]
            rows = np.column_stack([self.times, self.values])
        else:
            header = ["t_s"] + [f"T_{i + 1}" for i in range(self.values.shape[1])]
            rows = np.column_stack([self.times, self.values])
        write_table(path, header, rows)

    @classmethod
    def from_csv(cls, path) -> "MeasurementSeries":
        header, data = read_table(path)
        if header[1:] == ["T_p"]:
            return cls(data[:, 0], data[:, 1], BOTTOM)
        return cls(data[:, 0], data[:, 1:], FULL)


def gaussian_noise(rng: np.random.Generator, sigma: float, shape, clip: float = 6.0) -> np.ndarray:
    """Zero-mean normal draws truncated at ``clip`` standard deviations by redrawing."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > clip
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > clip
    return sigma * z


def sample_measurements(traj: Trajectory, period: float = 10.0, sensor_kind: str = FULL,
                        noise_sigma: float = 0.0, seed: int | None = 0) -> MeasurementSeries:
    if period <= 0:
        raise ValueError("period must be positive")
    t0, t1 = traj.times[0], traj.times[-1]
    n = int(np.floor((t1 - t0) / period + 1e-9)) + 1
    times = t0 + period * np.arange(n)
    T = traj(times)[:, : traj.m]
    values = T[:, -1] if sensor_kind == BOTTOM else T
    values = np.array(values, dtype=float)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        values = values + gaussian_noise(rng, noise_sigma, values.shape)
    return MeasurementSeries(times, values, sensor_kind, noise_sigma, seed)
