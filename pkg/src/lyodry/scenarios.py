"""Scenario presets and the TOML configuration format.

Quantities may carry a unit suffix inside a string (``r = "0.2 K/min"``,
``H = "2 cm"``); bare numbers are taken as SI.  Everything is converted to SI
at parse time.
"""
from __future__ import annotations

import dataclasses
import math
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .control import MicrowaveController
from .model import InvalidParameterError, ModelParameters, ShelfSchedule
from .observer import BOTTOM_POINT_GAINS, DEFAULT_INIT_CS, FULL_FIELD_GAINS, ObserverGains
from .simulate import BOTTOM, FULL, SENSOR_KINDS


class ConfigError(ValueError):
    """Malformed configuration: bad syntax, unknown key, or unparseable unit."""


# unit -> factor to SI, grouped by dimension
_UNITS = {
    "length": {"m": 1.0, "cm": 1e-2, "mm": 1e-3},
    "rate": {"K/s": 1.0, "K/min": 1.0 / 60.0, "K/h": 1.0 / 3600.0},
    "time": {"s": 1.0, "min": 60.0, "h": 3600.0},
    "temperature": {"K": 1.0},
}
_QTY = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*(\S+)?\s*$")

_MODEL_UNITS = {"H": "length", "T_0": "temperature"}
_SHELF_UNITS = {"T_b0": "temperature", "r": "rate", "T_b_max": "temperature"}


def parse_quantity(value, dimension: str | None = None, key: str = "?") -> float:
    """Float from a number or a ``"<number> <unit>"`` string."""
    if isinstance(value, bool):
        raise ConfigError(f"{key}: expected a number, got a boolean")
    if isinstance(value, (int, float)):
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a number or quantity string, got {type(value).__name__}")
    mt = _QTY.match(value)
    if not mt:
        raise ConfigError(f"{key}: cannot parse quantity {value!r}")
    number, unit = float(mt.group(1)), mt.group(2)
    if unit is None:
        return number
    table = _UNITS.get(dimension or "", {})
    if unit not in table:
        allowed = ", ".join(table) or "none"
        raise ConfigError(f"{key}: unit {unit!r} not accepted (allowed: {allowed})")
    return number * table[unit]


@dataclass
class Scenario:
    name: str = "default"
    params: ModelParameters = field(default_factory=ModelParameters)
    sched: ShelfSchedule = field(default_factory=ShelfSchedule)
    gains: ObserverGains = FULL_FIELD_GAINS
    reduced_gains: ObserverGains | None = None
    switch_time: float | None = None     # None with reduced gains means 4 tau
    init_cs: float = DEFAULT_INIT_CS
    period: float = 10.0
    noise_sigma: float = 0.0
    seed: int = 0
    threshold: float = 0.01
    horizon: float = 10 * 3600.0
    controller: MicrowaveController | None = None

    @property
    def sensor_kind(self) -> str:
        return self.gains.sensor_kind

    def validate(self) -> None:
        problems = []
        try:
            self.params.validate()
        except InvalidParameterError as exc:
            problems.append(str(exc))
        if not self.period > 0:
            problems.append(f"sampling period must be positive (got {self.period})")
        if self.noise_sigma < 0:
            problems.append(f"noise sigma must be >= 0 (got {self.noise_sigma})")
        if not self.threshold > 0:
            problems.append(f"threshold must be positive (got {self.threshold})")
        if not self.horizon > 0:
            problems.append(f"horizon must be positive (got {self.horizon})")
        if self.init_cs < 0:
            problems.append(f"init_cs must be >= 0 (got {self.init_cs})")
        if self.reduced_gains is not None and self.reduced_gains.sensor_kind != self.sensor_kind:
            problems.append("scheduled gains must use the same sensor kind")
        if self.switch_time is not None and not self.switch_time > 0:
            problems.append("switch time must be positive")
        if problems:
            raise InvalidParameterError("; ".join(problems))

    def with_(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)


def _preset(name, sensor=FULL, **model):
    shelf = {k: model.pop(k) for k in ("T_b0", "r", "T_b_max") if k in model}
    sched = ShelfSchedule(**shelf)
    gains = FULL_FIELD_GAINS if sensor == FULL else BOTTOM_POINT_GAINS
    return Scenario(name=name, params=ModelParameters(**model), sched=sched, gains=gains)


def _presets() -> dict[str, Scenario]:
    case1 = dict(E_a=5000.0, A=7.1e-4, c_s0=0.6415)
    case3 = dict(E_a=5920.0, A=1.2e-3, h=7.0, T_0=264.09, T_b0=264.09, T_b_max=312.0,
                 c_s0=0.0603, r=0.5 / 60.0, H=0.0102)
    return {
        "default": _preset("default"),
        "case1": _preset("case1", **case1),
        "case2": _preset("case2", E_a=5700.0, A=1e-3, c_s0=0.6415),
        "case3": _preset("case3", **case3),
        # Table 3 labels its first row "1"; it is the same system as case1
        "caseA": _preset("caseA", **case1),
        "caseB": _preset("caseB", k=0.028, E_a=5300.0, A=4.5e-4, c_s0=0.1940),
        "caseC": _preset("caseC", BOTTOM, E_a=37714.0, A=277.0, h=7.0, T_0=270.38,
                         T_b0=270.38, c_s0=0.0314, r=0.6 / 60.0),
        "caseD": _preset("caseD", BOTTOM, **case3),
    }


PRESETS = tuple(_presets())


def preset(name: str) -> Scenario:
    table = _presets()
    if name not in table:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(table)}")
    return table[name]


def load_scenario(source) -> Scenario:
    """Preset name or path to a TOML file, validated and in SI units."""
    if isinstance(source, Scenario):
        return source
    src = str(source)
    if src in PRESETS:
        sc = preset(src)
    else:
        path = Path(src)
        if not path.exists():
            raise ConfigError(f"{src!r} is neither a preset ({', '.join(PRESETS)}) nor a file")
        sc = parse_scenario(path.read_text(), origin=str(path))
    sc.validate()
    return sc


def _check_keys(table: dict, allowed, section: str) -> None:
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise ConfigError(f"[{section}]: unknown key(s) {', '.join(unknown)}")


def _section(doc: dict, name: str) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"{name}: expected a table")
    return sec


def _gains(sec: dict, sensor: str, section: str, defaults: ObserverGains) -> ObserverGains:
    L_T = parse_quantity(sec.get("L_T", defaults.L_T), key=f"{section}.L_T")
    L_c = parse_quantity(sec.get("L_c", defaults.L_c), key=f"{section}.L_c")
    return ObserverGains(L_T, L_c, sensor)


def parse_scenario(text: str, origin: str = "<string>") -> Scenario:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{origin}: {exc}") from exc
    _check_keys(doc, ("name", "base", "model", "shelf", "observer", "measurement", "run",
                      "controller"), "top level")
    base = preset(doc.get("base", "default"))

    model_sec = _section(doc, "model")
    model_fields = [f.name for f in fields(ModelParameters)]
    _check_keys(model_sec, model_fields, "model")
    model = {}
    for k, v in model_sec.items():
        if k == "m":
            if not isinstance(v, int) or isinstance(v, bool):
                raise ConfigError("model.m: expected an integer")
            model[k] = v
        else:
            model[k] = parse_quantity(v, _MODEL_UNITS.get(k), key=f"model.{k}")
    params = dataclasses.replace(base.params, **model)

    shelf_sec = _section(doc, "shelf")
    _check_keys(shelf_sec, _SHELF_UNITS, "shelf")
    shelf = {k: parse_quantity(v, _SHELF_UNITS[k], key=f"shelf.{k}") for k, v in shelf_sec.items()}
    try:
        sched = dataclasses.replace(base.sched, **shelf)
    except InvalidParameterError as exc:
        raise ConfigError(f"[shelf]: {exc}") from exc

    obs = _section(doc, "observer")
    _check_keys(obs, ("sensor", "L_T", "L_c", "init_cs", "schedule"), "observer")
    sensor = obs.get("sensor", base.sensor_kind)
    if sensor not in SENSOR_KINDS:
        raise ConfigError(f"observer.sensor: expected one of {SENSOR_KINDS}, got {sensor!r}")
    default_gains = base.gains if sensor == base.sensor_kind else (
        FULL_FIELD_GAINS if sensor == FULL else BOTTOM_POINT_GAINS)
    gains = _gains(obs, sensor, "observer", default_gains)
    reduced, switch = None, None
    if "schedule" in obs:
        sch = obs["schedule"]
        if not isinstance(sch, dict):
            raise ConfigError("observer.schedule: expected a table")
        _check_keys(sch, ("L_T", "L_c", "switch"), "observer.schedule")
        reduced = _gains(sch, sensor, "observer.schedule", gains)
        sw = sch.get("switch", "4tau")
        switch = None if sw == "4tau" else parse_quantity(sw, "time", key="observer.schedule.switch")
    init_cs = parse_quantity(obs.get("init_cs", base.init_cs), key="observer.init_cs")

    meas = _section(doc, "measurement")
    _check_keys(meas, ("period", "noise_sigma", "noise_3sigma", "seed"), "measurement")
    if "noise_sigma" in meas and "noise_3sigma" in meas:
        raise ConfigError("[measurement]: give noise_sigma or noise_3sigma, not both")
    period = parse_quantity(meas.get("period", base.period), "time", key="measurement.period")
    if "noise_3sigma" in meas:
        sigma = parse_quantity(meas["noise_3sigma"], "temperature", key="measurement.noise_3sigma") / 3
    else:
        sigma = parse_quantity(meas.get("noise_sigma", base.noise_sigma), "temperature",
                               key="measurement.noise_sigma")
    seed = meas.get("seed", base.seed)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("measurement.seed: expected an integer")

    run = _section(doc, "run")
    _check_keys(run, ("threshold", "horizon"), "run")
    threshold = parse_quantity(run.get("threshold", base.threshold), key="run.threshold")
    horizon = parse_quantity(run.get("horizon", base.horizon), "time", key="run.horizon")

    ctl = None
    if "controller" in doc:
        c = _section(doc, "controller")
        _check_keys(c, ("K", "T_up"), "controller")
        ctl = MicrowaveController(parse_quantity(c.get("K", 1000.0), key="controller.K"),
                                  parse_quantity(c.get("T_up", 313.15), "temperature",
                                                 key="controller.T_up"))
    return Scenario(name=str(doc.get("name", base.name)), params=params, sched=sched,
                    gains=gains, reduced_gains=reduced, switch_time=switch, init_cs=init_cs,
                    period=period, noise_sigma=sigma, seed=seed, threshold=threshold,
                    horizon=horizon, controller=ctl)


def _num(v: float) -> str:
    if math.isinf(v) or math.isnan(v):
        raise ValueError(f"cannot write non-finite value {v}")
    return repr(float(v))


def _qty(v: float, unit: str) -> str:
    return f'"{_num(v)} {unit}"'


def dump_scenario(sc: Scenario) -> str:
    """TOML text that :func:`parse_scenario` maps back to an equal Scenario."""
    p, s = sc.params, sc.sched
    out = [f'name = "{sc.name}"', "", "[model]"]
    for f in fields(ModelParameters):
        v = getattr(p, f.name)
        if f.name == "m":
            out.append(f"m = {int(v)}")
        elif f.name == "H":
            out.append(f"H = {_qty(v, 'm')}")
        elif f.name == "T_0":
            out.append(f"T_0 = {_qty(v, 'K')}")
        else:
            out.append(f"{f.name} = {_num(v)}")
    out += ["", "[shelf]", f"T_b0 = {_qty(s.T_b0, 'K')}", f"r = {_qty(s.r, 'K/s')}",
            f"T_b_max = {_qty(s.T_b_max, 'K')}"]
    out += ["", "[observer]", f'sensor = "{sc.sensor_kind}"', f"L_T = {_num(sc.gains.L_T)}",
            f"L_c = {_num(sc.gains.L_c)}", f"init_cs = {_num(sc.init_cs)}"]
    if sc.reduced_gains is not None:
        sw = '"4tau"' if sc.switch_time is None else _qty(sc.switch_time, "s")
        out += ["", "[observer.schedule]", f"L_T = {_num(sc.reduced_gains.L_T)}",
                f"L_c = {_num(sc.reduced_gains.L_c)}", f"switch = {sw}"]
    out += ["", "[measurement]", f"period = {_qty(sc.period, 's')}",
            f"noise_sigma = {_qty(sc.noise_sigma, 'K')}", f"seed = {int(sc.seed)}"]
    out += ["", "[run]", f"threshold = {_num(sc.threshold)}", f"horizon = {_qty(sc.horizon, 's')}"]
    if sc.controller is not None:
        out += ["", "[controller]", f"K = {_num(sc.controller.K)}",
                f"T_up = {_qty(sc.controller.T_up, 'K')}"]
    return "\n".join(out) + "\n"


def write_scenario(sc: Scenario, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_scenario(sc))


def scenario_dict(sc: Scenario) -> dict:
    """Plain-data view of a scenario for the run manifest."""
    d = {"name": sc.name, "params": dataclasses.asdict(sc.params),
         "shelf": dataclasses.asdict(sc.sched),
         "gains": dataclasses.asdict(sc.gains),
         "reduced_gains": None if sc.reduced_gains is None else dataclasses.asdict(sc.reduced_gains),
         "switch_time": "4tau" if sc.reduced_gains is not None and sc.switch_time is None
         else sc.switch_time,
         "init_cs": sc.init_cs, "period": sc.period, "noise_sigma": sc.noise_sigma,
         "seed": sc.seed, "threshold": sc.threshold, "horizon": sc.horizon,
         "controller": None if sc.controller is None else dataclasses.asdict(sc.controller)}
    return d
