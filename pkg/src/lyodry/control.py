"""Proportional microwave-power control with an optional observer in the loop."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .model import (ControlInput, ModelParameters, ProductState, ShelfSchedule, build_grid,
                    initial_state, make_rhs, shelf_temperature)
from .observer import (DEFAULT_INIT_CS, EstimateTrajectory, GainSchedule, Observer,
                       ObserverGains)
from .simulate import (BOTTOM, FULL, IntegratorSettings, StepFailureError, Trajectory,
                       gaussian_noise)


@dataclass(frozen=True)
class MicrowaveController:
    K: float = 1000.0        # W/(m3 K)
    T_up: float = 313.15     # K

    def __post_init__(self):
        if self.K < 0 or not self.T_up > 0:
            raise ValueError("controller needs K >= 0 and T_up > 0")


def microwave_power(T_field, ctl: MicrowaveController) -> float:
    """``K (T_up - max T)``, clamped at zero since the actuator cannot cool."""
    return max(0.0, ctl.K * (ctl.T_up - float(np.max(T_field))))


@dataclass
class ObserverSetup:
    gains: ObserverGains | GainSchedule
    init_cs: float = DEFAULT_INIT_CS
    params: ModelParameters | None = None   # observer model; defaults to the plant's


@dataclass
class ClosedLoopResult:
    truth: Trajectory
    Q_v: np.ndarray
    T_max: np.ndarray
    drying_time: float
    estimate: EstimateTrajectory | None = None

    @property
    def peak_temperature(self) -> float:
        return float(np.max(self.T_max))

    def to_csv(self, path) -> None:
        self.truth.to_csv(path, extra={"Qv_Wm3": self.Q_v, "Tmax_K": self.T_max})


def run_closed_loop(params: ModelParameters, sched: ShelfSchedule,
                    ctl: MicrowaveController | None,
                    observer: ObserverSetup | None = None,
                    settings: IntegratorSettings | None = None,
                    period: float = 10.0, horizon: float = 12 * 3600.0,
                    threshold: float = 0.01, feedback: str = "estimate",
                    sensor_kind: str = FULL, noise_sigma: float = 0.0,
                    seed: int | None = 0, stop_when_dry: bool = False) -> ClosedLoopResult:
    """Sampled closed loop: measure, estimate, actuate, hold for one period.

    ``feedback`` selects which temperature field feeds the controller,
    ``"estimate"`` (observer output) or ``"measured"``.  Without an observer
    the measured field is always used.  ``T_max`` records the true peak
    product temperature over each hold interval.
    """
    settings = settings or IntegratorSettings()
    params.validate()
    if feedback not in ("estimate", "measured"):
        raise ValueError(f"unknown feedback source {feedback!r}")
    if observer is not None and observer.gains.sensor_kind != sensor_kind:
        raise ValueError("observer gains and sensor kind disagree")
    grid = build_grid(params)
    m = grid.m
    f, jac = make_rhs(params, grid)
    atol = settings.atol(m)
    rng = np.random.default_rng(seed)

    held = {"Q": 0.0}

    def u_policy(t):
        return ControlInput(shelf_temperature(t, sched), held["Q"])

    obs = None
    if observer is not None:
        init = ProductState.uniform(m, params.T_0, observer.init_cs)
        obs = Observer(observer.params or params, observer.gains, init, sched, u_policy, settings)

    def measure(x):
        T = x[:m]
        y = T[-1:].copy() if sensor_kind == BOTTOM else T.copy()
        if noise_sigma > 0:
            y = y + gaussian_noise(rng, noise_sigma, y.shape)
        return y[0] if sensor_kind == BOTTOM else y

    def fun(t, x):
        return f(x, shelf_temperature(t, sched), held["Q"])

    n = int(np.floor(horizon / period + 1e-9)) + 1
    times = period * np.arange(n)
    x = initial_state(params).to_vector()
    xs, dxs, Qs, Tmax, est_x, innovs = [], [], [], [], [], []
    peak = float(x[:m].max())
    for k, t in enumerate(times):
        y = measure(x)
        if obs is not None:
            if k == 0:
                # temperature estimate starts at the first measurement
                obs.x[:m] = y
            innovs.append(obs.update(t, y))
            est_x.append(obs.x.copy())
        if ctl is None:
            Q = 0.0
        elif obs is not None and feedback == "estimate":
            Q = microwave_power(obs.x[:m], ctl)
        else:
            Q = microwave_power(y, ctl)
        xs.append(x.copy())
        dxs.append(f(x, shelf_temperature(t, sched), Q))
        Qs.append(Q)
        Tmax.append(peak)
        if stop_when_dry and x[m:].mean() <= threshold:
            break
        if k == n - 1:
            break
        held["Q"] = Q
        sol = solve_ivp(fun, (t, times[k + 1]), x, method=settings.method, rtol=settings.rel_tol,
                        atol=atol, max_step=settings.max_step, first_step=period,
                        jac=lambda t, x: jac(x))
        if sol.status < 0:
            raise StepFailureError(sol.message)
        x = sol.y[:, -1].copy()
        peak = float(sol.y[:m].max())

    k_done = len(xs)
    times = times[:k_done]
    truth = Trajectory(times, np.array(xs), np.array(dxs))
    c_avg = truth.c_s_avg
    hit = np.nonzero(c_avg <= threshold)[0]
    if hit.size == 0:
        t_dry = float("nan")
    elif hit[0] == 0:
        t_dry = 0.0
    else:
        i = hit[0]
        c0, c1 = c_avg[i - 1], c_avg[i]
        t_dry = float(times[i - 1] + (c0 - threshold) / (c0 - c1) * (times[i] - times[i - 1]))
    est = None
    if obs is not None:
        est = EstimateTrajectory(times, np.array(est_x), np.array(innovs))
    # T_max[k] is the true peak over the hold interval ending at times[k]
    return ClosedLoopResult(truth, np.array(Qs), np.array(Tmax), t_dry, est)
