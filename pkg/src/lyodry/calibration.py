"""Bounded least-squares fits of h (from temperatures) and A, E_a (from concentrations).

The optimizer is deterministic: a coarse grid over the normalized search
box, then bounded trust-region least squares with finite-difference
Jacobians.  When A and E_a
are fitted together the search runs on (E_a, log10 k_ref), where k_ref is the
rate constant at a reference temperature, since A and E_a are strongly
correlated along that valley.
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.optimize

from .model import ModelParameters, ShelfSchedule, desorption_rate_constant
from .simulate import IntegratorSettings, integrate, read_table, write_table

CHANNELS = ("T_avg", "T_p", "cs_avg")
# finite-difference Jacobians need model noise well below the probe step
FIT_SETTINGS = IntegratorSettings(rel_tol=1e-9, abs_tol_T=1e-9, abs_tol_c=1e-12)
DEFAULT_BOUNDS = {"h": (1.0, 100.0), "E_a": (5e3, 5e4), "A": (1e-8, 1e4)}


class BudgetExhaustedWarning(UserWarning):
    pass


@dataclass
class Dataset:
    times: np.ndarray
    values: np.ndarray
    channel: str

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.channel not in CHANNELS:
            raise ValueError(f"unknown channel {self.channel!r}; expected one of {CHANNELS}")
        if self.times.size == 0 or self.times.shape != self.values.shape:
            raise ValueError("dataset needs matching, nonempty time and value columns")

    def to_csv(self, path) -> None:
        write_table(path, ["t_s", self.channel], np.column_stack([self.times, self.values]))

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        header, data = read_table(path)
        if len(header) != 2 or header[0] != "t_s":
            raise ValueError(f"{path}: expected header 't_s,<channel>', got {header}")
        return cls(data[:, 0], data[:, 1], header[1])


@dataclass
class FitProblem:
    datasets: list[Dataset]
    params: ModelParameters
    sched: ShelfSchedule
    free: dict[str, tuple[float, float]]
    initial: dict[str, float] | None = None
    settings: IntegratorSettings | None = None

    def __post_init__(self):
        if not self.datasets:
            raise ValueError("at least one dataset is required")
        if not self.free:
            raise ValueError("at least one free parameter is required")
        for name, (lo, hi) in self.free.items():
            if name not in DEFAULT_BOUNDS:
                raise ValueError(f"cannot fit {name!r}; choose from {sorted(DEFAULT_BOUNDS)}")
            if not lo < hi or (name == "A" and lo <= 0):
                raise ValueError(f"bad bounds for {name}: {(lo, hi)}")
        if self.initial is None:
            self.initial = {k: getattr(self.params, k) for k in self.free}
        for k, v in self.initial.items():
            lo, hi = self.free[k]
            self.initial[k] = min(max(v, lo), hi)

    @property
    def horizon(self) -> float:
        return max(float(d.times.max()) for d in self.datasets)

    def predict(self, values: dict[str, float]) -> list[np.ndarray]:
        p = self.params.with_(**values)
        times = np.unique(np.concatenate([d.times for d in self.datasets]))
        traj = integrate(p, self.sched, t_span=(0.0, max(times[-1], 0.0)),
                         settings=self.settings or FIT_SETTINGS, t_eval=times)
        out = []
        for d in self.datasets:
            idx = np.searchsorted(times, d.times)
            if d.channel == "T_avg":
                series = traj.T_avg
            elif d.channel == "T_p":
                series = traj.T[:, -1]
            else:
                series = traj.c_s_avg
            out.append(series[idx])
        return out

    def weights(self) -> list[float]:
        if len(self.datasets) == 1:
            return [1.0]
        return [1.0 / max(float(np.var(d.values)), 1e-300) for d in self.datasets]


@dataclass
class FitResult:
    values: dict[str, float]
    loss: float
    initial_loss: float
    residuals: list[np.ndarray]
    evaluations: int
    history: list[float] = field(default_factory=list)
    exhausted: bool = False

    def write_report(self, path, problem: FitProblem | None = None) -> None:
        lines = [f"{k} = {float(v)!r}" for k, v in self.values.items()]
        lines += [f"loss = {self.loss!r}", f"initial_loss = {self.initial_loss!r}",
                  f"evaluations = {self.evaluations}", f"budget_exhausted = {str(self.exhausted).lower()}"]
        for i, r in enumerate(self.residuals):
            tag = problem.datasets[i].channel if problem else str(i)
            lines.append(f"rms_residual[{tag}] = {float(np.sqrt(np.mean(r ** 2)))!r}")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")


class _Coordinates:
    """Map the unit box onto parameter values."""

    def __init__(self, problem: FitProblem, T_ref: float):
        self.free = problem.free
        self.R = problem.params.R
        self.T_ref = T_ref
        self.joint = "A" in self.free and "E_a" in self.free
        self.names = list(self.free)
        self.boxes = []
        for name in self.names:
            lo, hi = self.free[name]
            if name == "A" and self.joint:
                Ea_lo, Ea_hi = self.free["E_a"]
                c = 1.0 / (self.R * T_ref * math.log(10))
                self.boxes.append((math.log10(lo) - Ea_hi * c, math.log10(hi) - Ea_lo * c))
            elif name == "A":
                self.boxes.append((math.log10(lo), math.log10(hi)))
            else:
                self.boxes.append((lo, hi))

    def to_values(self, u) -> dict[str, float] | None:
        raw = {n: lo + ui * (hi - lo) for n, ui, (lo, hi) in zip(self.names, u, self.boxes)}
        vals = {}
        for n in self.names:
            if n == "A" and self.joint:
                vals[n] = 10.0 ** raw[n] * math.exp(raw["E_a"] / (self.R * self.T_ref))
            elif n == "A":
                vals[n] = 10.0 ** raw[n]
            else:
                vals[n] = raw[n]
        for n, v in vals.items():
            lo, hi = self.free[n]
            if not lo * (1 - 1e-12) <= v <= hi * (1 + 1e-12):
                return None
            vals[n] = min(max(v, lo), hi)
        return vals

    def from_values(self, vals: dict[str, float]) -> np.ndarray:
        u = []
        for n, (lo, hi) in zip(self.names, self.boxes):
            v = vals[n]
            if n == "A" and self.joint:
                raw = math.log10(v) - vals["E_a"] / (self.R * self.T_ref * math.log(10))
            elif n == "A":
                raw = math.log10(v)
            else:
                raw = v
            u.append((raw - lo) / (hi - lo))
        return np.clip(np.array(u), 0.0, 1.0)


class _BudgetSpent(Exception):
    pass


def fit(problem: FitProblem, budget: int = 300, grid_points: int | None = None,
        tol: float = 1e-10, seed: int = 0) -> FitResult:
    """Minimize the (weighted) sum of squared residuals within the bounds.

    A coarse grid over the normalized box picks the start point, then a
    bounded trust-region least-squares solve refines it.  ``seed`` is
    accepted for interface symmetry; the search is deterministic.
    """
    weights = problem.weights()
    n_eval = 0
    history: list[float] = []

    def loss_of(vals):
        nonlocal n_eval
        n_eval += 1
        try:
            preds = problem.predict(vals)
        except Exception:
            return math.inf, None
        res = [p - d.values for p, d in zip(preds, problem.datasets)]
        if not all(np.all(np.isfinite(r)) for r in res):
            return math.inf, None
        return float(sum(w * np.sum(r ** 2) for w, r in zip(weights, res))), res

    init = dict(problem.initial)
    best_loss, best_res = loss_of(init)
    best_vals = init
    initial_loss = best_loss
    history.append(best_loss)
    if best_loss == 0.0:
        return FitResult(best_vals, best_loss, initial_loss, best_res, n_eval, history)

    T_ref = _reference_temperature(problem, init)
    coords = _Coordinates(problem, T_ref)
    d = len(coords.names)
    if grid_points is None:
        grid_points = 15 if d == 1 else 9
    n_resid = sum(ds.values.size for ds in problem.datasets)
    sqrt_w = np.concatenate([np.full(ds.values.size, math.sqrt(w))
                             for w, ds in zip(weights, problem.datasets)])

    def consider(u):
        """Loss and weighted residual vector at unit-box point ``u``."""
        nonlocal best_loss, best_res, best_vals
        if n_eval >= budget:
            raise _BudgetSpent
        vals = coords.to_values(u)
        if vals is None:
            return math.inf, None
        loss, res = loss_of(vals)
        if loss < best_loss:
            best_loss, best_res, best_vals = loss, res, vals
        history.append(best_loss)
        return loss, res

    exhausted = False
    ticks = (np.arange(grid_points) + 0.5) / grid_points
    try:
        for u in itertools.product(ticks, repeat=d):
            consider(np.array(u))

        # failed or infeasible points get a large flat residual so the solver backs off
        penalty = np.full(n_resid, 1e3 * math.sqrt(max(best_loss, 1e-300) / n_resid) + 1.0)

        def residuals(u):
            loss, res = consider(u)
            if res is None:
                return penalty
            return sqrt_w * np.concatenate(res)

        u0 = coords.from_values(best_vals)
        scipy.optimize.least_squares(residuals, u0, bounds=(0.0, 1.0), method="trf",
                                     x_scale=1.0, diff_step=1e-4, xtol=tol, ftol=tol,
                                     gtol=tol, max_nfev=10 * budget)
    except _BudgetSpent:
        exhausted = True

    if exhausted:
        warnings.warn(f"evaluation budget {budget} exhausted; returning best point found",
                      BudgetExhaustedWarning, stacklevel=2)
    best_vals = {k: float(v) for k, v in best_vals.items()}
    return FitResult(best_vals, best_loss, initial_loss, best_res, n_eval, history, exhausted)


def _reference_temperature(problem: FitProblem, vals: dict[str, float]) -> float:
    temps = [d.values for d in problem.datasets if d.channel in ("T_avg", "T_p")]
    if temps:
        return float(np.mean(np.concatenate(temps)))
    try:
        p = problem.params.with_(**vals)
        t = np.linspace(0.0, problem.horizon, 200)
        return float(np.mean(integrate(p, problem.sched, t_span=(0.0, t[-1]), t_eval=t).T_avg))
    except Exception:
        return problem.params.T_0


def rate_curve_error(fitted: dict[str, float], true: dict[str, float],
                     params: ModelParameters, T_range: tuple[float, float], n: int = 50) -> float:
    """Largest relative difference of k_s(T) between two (A, E_a) sets over ``T_range``."""
    T = np.linspace(T_range[0], T_range[1], n)
    k_fit = desorption_rate_constant(T, params.with_(**fitted))
    k_true = desorption_rate_constant(T, params.with_(**true))
    return float(np.max(np.abs(k_fit / k_true - 1.0)))
