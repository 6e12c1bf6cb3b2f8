"""Reduced secondary-drying model: 1D conduction with bound-water desorption.

The product column is discretized into ``m`` finite-volume cells, cell 1 at the
insulated top and cell ``m`` at the heated bottom.  The state vector stacks
temperatures over concentrations, ``x = [T_1..T_m, cs_1..cs_m]``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

EPS_NUM = 1e-12


class InvalidParameterError(ValueError):
    pass


class InvalidStateError(ValueError):
    pass


class PhysicalRangeWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ModelParameters:
    rho: float = 215.0            # kg/m3
    rho_d: float = 212.21         # kg/m3
    k: float = 0.217              # W/(m K)
    C_p: float = 2590.0           # J/(kg K)
    C_p_g: float = 1617.0         # J/(kg K), carried but unused
    dH_s: float = 2.68e6          # J/kg
    E_a: float = 8316.0           # J/mol
    A: float = 3.34e-3            # 1/s
    h: float = 30.0               # W/(m2 K)
    T_0: float = 241.15           # K
    c_s0: float = 0.2059          # kg water / kg solid
    c_s_eq: float = 0.0
    H: float = 0.02               # m
    R: float = 8.314              # J/(mol K)
    m: int = 20

    def validate(self) -> None:
        problems = []
        for name in ("rho", "rho_d", "k", "C_p", "C_p_g", "T_0", "c_s0", "H", "R"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                problems.append(f"{name} must be positive and finite (got {v})")
        # zero is allowed here for decoupled/isothermal configurations
        for name in ("dH_s", "E_a", "A", "h"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                problems.append(f"{name} must be non-negative and finite (got {v})")
        if not (math.isfinite(self.c_s_eq) and self.c_s_eq >= 0):
            problems.append(f"c_s_eq must be >= 0 (got {self.c_s_eq})")
        if int(self.m) != self.m or self.m < 3:
            problems.append(f"m must be an integer >= 3 (got {self.m})")
        if problems:
            raise InvalidParameterError("; ".join(problems))
        if not 1.0 <= self.h <= 100.0:
            warnings.warn(f"h={self.h} W/(m2 K) outside typical range [1, 100]",
                          PhysicalRangeWarning, stacklevel=2)
        if self.E_a != 0 and not 5e3 <= self.E_a <= 5e4:
            warnings.warn(f"E_a={self.E_a} J/mol outside typical range [5e3, 5e4]",
                          PhysicalRangeWarning, stacklevel=2)

    def with_(self, **changes) -> "ModelParameters":
        return replace(self, **changes)


@dataclass(frozen=True)
class ShelfSchedule:
    """Linear shelf ramp from ``T_b0`` at rate ``r`` (K/s), held at ``T_b_max``."""

    T_b0: float = 253.15
    r: float = 0.2 / 60.0
    T_b_max: float = 313.15

    def __post_init__(self):
        if self.r < 0:
            raise InvalidParameterError(f"ramp rate must be >= 0 (got {self.r})")
        if self.T_b_max < self.T_b0:
            raise InvalidParameterError(
                f"T_b_max ({self.T_b_max}) must be >= T_b0 ({self.T_b0})")

    @classmethod
    def from_k_per_min(cls, T_b0: float, r_k_per_min: float, T_b_max: float) -> "ShelfSchedule":
        return cls(T_b0=T_b0, r=r_k_per_min / 60.0, T_b_max=T_b_max)


@dataclass(frozen=True)
class Grid:
    m: int
    dz: float


@dataclass(frozen=True)
class ControlInput:
    T_b: float
    Q_v: float = 0.0

    def __post_init__(self):
        if self.Q_v < 0:
            raise InvalidParameterError(f"Q_v must be >= 0 (got {self.Q_v})")


@dataclass(frozen=True)
class ProductState:
    T: np.ndarray
    c_s: np.ndarray = field(repr=False)

    def __post_init__(self):
        T = np.asarray(self.T, dtype=float)
        c = np.asarray(self.c_s, dtype=float)
        if T.ndim != 1 or T.shape != c.shape:
            raise InvalidStateError(f"T and c_s must be 1D of equal length, got {T.shape}, {c.shape}")
        if not (np.all(np.isfinite(T)) and np.all(np.isfinite(c))):
            raise InvalidStateError("state contains non-finite values")
        if np.any(T <= 0):
            raise InvalidStateError("temperatures must be > 0 K")
        if np.any(c < -EPS_NUM):
            raise InvalidStateError(f"negative concentration {c.min():.3e}")
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "c_s", c)

    @property
    def m(self) -> int:
        return self.T.size

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.T, self.c_s])

    @classmethod
    def from_vector(cls, x) -> "ProductState":
        x = np.asarray(x, dtype=float)
        m = x.size // 2
        return cls(x[:m].copy(), x[m:].copy())

    @classmethod
    def uniform(cls, m: int, T: float, c_s: float) -> "ProductState":
        return cls(np.full(m, float(T)), np.full(m, float(c_s)))


def initial_state(params: ModelParameters) -> ProductState:
    return ProductState.uniform(params.m, params.T_0, params.c_s0)


def build_grid(params: ModelParameters) -> Grid:
    if int(params.m) != params.m or params.m < 2:
        raise InvalidParameterError(f"m must be an integer >= 2 (got {params.m})")
    if not params.H > 0:
        raise InvalidParameterError(f"H must be positive (got {params.H})")
    m = int(params.m)
    return Grid(m=m, dz=params.H / (m - 1))


def shelf_temperature(t: float, sched: ShelfSchedule) -> float:
    return min(sched.T_b0 + sched.r * t, sched.T_b_max)


def desorption_rate_constant(T, params: ModelParameters):
    """Arrhenius rate constant ``A exp(-E_a / (R T))`` in 1/s."""
    return params.A * np.exp(-params.E_a / (params.R * np.asarray(T, dtype=float)))


class _Coefficients:
    """Precomputed constants of the discretized right-hand side."""

    __slots__ = ("m", "cond", "robin", "couple", "source", "A", "EaR", "c_eq")

    def __init__(self, params: ModelParameters, grid: Grid):
        rc = params.rho * params.C_p
        self.m = grid.m
        self.cond = params.k / (rc * grid.dz ** 2)
        self.robin = 2.0 * params.h / (rc * grid.dz)
        self.couple = params.rho_d * params.dH_s / rc
        self.source = 1.0 / rc
        self.A = params.A
        self.EaR = params.E_a / params.R
        self.c_eq = params.c_s_eq


def make_rhs(params: ModelParameters, grid: Grid | None = None):
    """Return ``(f, jac)`` acting on stacked vectors.

    ``f(x, T_b, Q_v)`` is the time derivative and ``jac(x)`` its Jacobian with
    respect to ``x``; neither depends on the inputs except through ``T_b`` and
    ``Q_v`` entering linearly.
    """
    grid = grid or build_grid(params)
    co = _Coefficients(params, grid)
    m = co.m
    idx = np.arange(m)
    interior = idx[1:-1]

    def f(x, T_b, Q_v=0.0):
        T = x[:m]
        c = x[m:]
        ks = co.A * np.exp(-co.EaR / T)
        dc = -ks * (c - co.c_eq)
        dT = np.empty(m)
        dT[0] = 2.0 * co.cond * (T[1] - T[0])
        dT[1:-1] = co.cond * (T[2:] - 2.0 * T[1:-1] + T[:-2])
        dT[-1] = -2.0 * co.cond * (T[-1] - T[-2]) - co.robin * (T[-1] - T_b)
        dT += co.couple * dc + co.source * Q_v
        return np.concatenate([dT, dc])

    def jac(x):
        T = x[:m]
        c = x[m:]
        ks = co.A * np.exp(-co.EaR / T)
        dc_dT = -(c - co.c_eq) * ks * co.EaR / T ** 2
        J = np.zeros((2 * m, 2 * m))
        J[interior, interior] = -2.0 * co.cond
        J[interior, interior + 1] = co.cond
        J[interior, interior - 1] = co.cond
        J[0, 0] = -2.0 * co.cond
        J[0, 1] = 2.0 * co.cond
        J[m - 1, m - 1] = -2.0 * co.cond - co.robin
        J[m - 1, m - 2] = 2.0 * co.cond
        J[m + idx, idx] = dc_dT
        J[m + idx, m + idx] = -ks
        J[idx, idx] += co.couple * dc_dT
        J[idx, m + idx] = co.couple * -ks
        return J

    return f, jac


def rhs(state: ProductState, u: ControlInput, params: ModelParameters,
        grid: Grid | None = None) -> "Derivative":
    """Time derivative of ``state``; components may be negative."""
    x = np.concatenate([np.asarray(state.T, float), np.asarray(state.c_s, float)])
    if not np.all(np.isfinite(x)) or not (math.isfinite(u.T_b) and math.isfinite(u.Q_v)):
        raise InvalidStateError("non-finite input to rhs")
    f, _ = make_rhs(params, grid)
    d = f(x, u.T_b, u.Q_v)
    return Derivative(d[: state.m], d[state.m:])


@dataclass(frozen=True)
class Derivative:
    T: np.ndarray
    c_s: np.ndarray

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.T, self.c_s])


def averages(state) -> tuple[float, float]:
    return float(np.mean(state.T)), float(np.mean(state.c_s))
