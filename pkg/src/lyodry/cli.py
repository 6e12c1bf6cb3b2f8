"""Command-line driver: ``lyodry {simulate,observe,design,sweep,control,calibrate}``."""
from __future__ import annotations

import argparse
import json
import math
import platform
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import DEFAULT_BOUNDS, BudgetExhaustedWarning, Dataset, FitProblem, fit
from .control import MicrowaveController, ObserverSetup, run_closed_loop
from .design import (FIG4_LC, FIG4_LT, DecompositionError, DegenerateTimeConstantError,
                     design_space_sweep, error_dynamics, linearize, modal_contributions,
                     nominal_reference, time_constant)
from .model import InvalidParameterError, InvalidStateError, ProductState
from .observer import (BOTTOM_POINT_GAINS, FULL_FIELD_GAINS, GainSchedule, MisalignmentError,
                       ObserverGains, ShapeMismatchError, estimation_errors, run_observer)
from .scenarios import ConfigError, Scenario, load_scenario, parse_quantity, scenario_dict, write_scenario
from .simulate import (BOTTOM, FULL, MeasurementSeries, NotReachedError, StepFailureError,
                       Trajectory, integrate, run_until_dry, sample_measurements, write_table)

EXIT_CODES = {"config": 2, "validation": 3, "numerical": 4, "io": 5}


# ---------------------------------------------------------------- parsing helpers

def _pair(text: str, what: str) -> tuple[float, float]:
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"{what}: expected 'LT,LC', got {text!r}") from None
    return a, b


def _float_list(text: str, what: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{what}: expected comma-separated numbers, got {text!r}") from None
    if not vals or not all(math.isfinite(v) for v in vals):
        raise ConfigError(f"{what}: need at least one finite value")
    return vals


def _apply_overrides(sc: Scenario, args) -> Scenario:
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.sampling_period is not None:
        changes["period"] = parse_quantity(args.sampling_period, "time", "--sampling-period")
    if args.noise_3sigma is not None:
        changes["noise_sigma"] = parse_quantity(args.noise_3sigma, "temperature", "--noise-3sigma") / 3
    if args.init_cs is not None:
        changes["init_cs"] = args.init_cs
    if args.horizon is not None:
        changes["horizon"] = parse_quantity(args.horizon, "time", "--horizon")
    if args.until_dry is not None:
        changes["threshold"] = args.until_dry
    sensor = sc.sensor_kind
    if args.sensor is not None:
        sensor = FULL if args.sensor == "full" else BOTTOM
        if sensor != sc.sensor_kind:
            changes["gains"] = FULL_FIELD_GAINS if sensor == FULL else BOTTOM_POINT_GAINS
            changes["reduced_gains"] = None
    if args.gains is not None:
        changes["gains"] = ObserverGains(*_pair(args.gains, "--gains"), sensor)
        changes["reduced_gains"] = None
    if args.gain_schedule is not None:
        text = args.gain_schedule
        body, _, when = text.partition("@")
        hi, _, lo = body.partition(":")
        if not lo:
            raise ConfigError(f"--gain-schedule: expected 'LT1,LC1:LT2,LC2@4tau', got {text!r}")
        changes["gains"] = ObserverGains(*_pair(hi, "--gain-schedule"), sensor)
        changes["reduced_gains"] = ObserverGains(*_pair(lo, "--gain-schedule"), sensor)
        changes["switch_time"] = (None if when in ("", "4tau")
                                  else parse_quantity(when, "time", "--gain-schedule"))
    sc = sc.with_(**changes)
    sc.validate()
    return sc


def resolve_gains(sc: Scenario):
    """Plain gains, or a schedule with its switch time resolved (4 tau by default)."""
    if sc.reduced_gains is None:
        return sc.gains
    switch = sc.switch_time
    if switch is None:
        lin = linearize(sc.params, nominal_reference(sc.params, sc.sched, sc.threshold),
                        sensor_kind=sc.sensor_kind)
        switch = 4.0 * time_constant(error_dynamics(lin, sc.gains))
    return GainSchedule(sc.gains, sc.reduced_gains, switch)


def _sample_grid(t_end: float, period: float) -> np.ndarray:
    n = int(np.floor(t_end / period + 1e-9)) + 1
    return period * np.arange(n)


class _Run:
    """Collects outputs and the manifest for one subcommand invocation."""

    def __init__(self, args, sc: Scenario):
        self.out = Path(args.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.sc = sc
        self.manifest = {"tool": "lyodry", "version": __version__, "command": args.command,
                         "argv": list(args.argv), "seed": sc.seed,
                         "python": platform.python_version(), "numpy": np.__version__,
                         "scenario": scenario_dict(sc), "outputs": [], "results": {}}

    def path(self, name: str) -> Path:
        self.manifest["outputs"].append(name)
        return self.out / name

    def result(self, **kv):
        self.manifest["results"].update(kv)

    def finish(self) -> int:
        write_scenario(self.sc, self.path("scenario.toml"))
        text = json.dumps(self.manifest, indent=2, default=_json_default, allow_nan=True)
        (self.out / "manifest.json").write_text(text + "\n")
        print(json.dumps({"out_dir": str(self.out), **self.manifest["results"]},
                         default=_json_default))
        return 0


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


# ---------------------------------------------------------------- subcommands

def cmd_simulate(args, sc: Scenario) -> int:
    run = _Run(args, sc)
    if args.until_dry is not None:
        traj, t_dry = run_until_dry(sc.params, sc.sched, sc.threshold,
                                    horizon=max(sc.horizon, 200 * 3600.0))
        run.result(drying_time_s=t_dry, drying_time_h=t_dry / 3600.0)
        t_end = t_dry
    else:
        traj = integrate(sc.params, sc.sched, t_span=(0.0, sc.horizon))
        t_end = sc.horizon
    times = _sample_grid(t_end, sc.period)
    if times[-1] < t_end:
        times = np.append(times, t_end)
    Trajectory(times, traj(times)).to_csv(run.path("trajectory.csv"))
    sample_measurements(traj, sc.period, sc.sensor_kind, sc.noise_sigma,
                        sc.seed).to_csv(run.path("measurements.csv"))
    run.result(final_cs_avg=float(traj.c_s_avg[-1]), final_T_avg=float(traj.T_avg[-1]))
    return run.finish()


def cmd_observe(args, sc: Scenario) -> int:
    run = _Run(args, sc)
    gains = resolve_gains(sc)
    if isinstance(gains, GainSchedule):
        run.result(switch_time_s=gains.switch_time)
    if args.measurements:
        meas = MeasurementSeries.from_csv(args.measurements)
        if meas.sensor_kind != sc.sensor_kind:
            raise ConfigError(f"{args.measurements}: {meas.sensor_kind} data but "
                              f"{sc.sensor_kind} gains")
        est = run_observer(meas, gains, sc.params, sc.sched, init_cs=sc.init_cs)
        est.to_csv(run.path("estimate.csv"))
    else:
        horizon = sc.horizon
        if args.until_dry is not None:
            _, horizon = run_until_dry(sc.params, sc.sched, sc.threshold)
        times = _sample_grid(horizon, sc.period)
        truth = integrate(sc.params, sc.sched, t_span=(0.0, times[-1]), t_eval=times)
        meas = sample_measurements(truth, sc.period, sc.sensor_kind, sc.noise_sigma, sc.seed)
        est = run_observer(meas, gains, sc.params, sc.sched, init_cs=sc.init_cs)
        truth.to_csv(run.path("truth.csv"))
        meas.to_csv(run.path("measurements.csv"))
        est.to_csv(run.path("estimate.csv"), truth)
        err = estimation_errors(est, truth)
        t_conv = err.convergence_time()
        run.result(convergence_time_s=t_conv, convergence_time_h=t_conv / 3600.0,
                   initial_ec_avg=float(err.ec_avg[0]), final_ec_avg=float(err.ec_avg[-1]))
    run.result(final_cshat_avg=float(est.c_s_avg[-1]))
    return run.finish()


def cmd_design(args, sc: Scenario) -> int:
    run = _Run(args, sc)
    ref = nominal_reference(sc.params, sc.sched, sc.threshold)
    lin = linearize(sc.params, ref, sensor_kind=sc.sensor_kind)
    ed = error_dynamics(lin, sc.gains)
    lam = ed.eigenvalues
    write_table(run.path("eigenvalues.csv"), ["index", "re", "im"],
                np.column_stack([np.arange(1, lam.size + 1), lam.real, lam.imag]))
    tau = time_constant(ed)
    run.result(T_ref=float(ref.T[0]), cs_ref=float(ref.c_s[0]), stable=ed.stable,
               oscillatory=ed.oscillatory, tau_s=tau, conv_estimate_s=4 * tau,
               conv_estimate_h=4 * tau / 3600.0)
    if ed.diagonalizable:
        m = sc.params.m
        T_meas0 = np.full(m, sc.params.T_0)
        est0 = ProductState(T_meas0, np.full(m, sc.init_cs)).to_vector()
        true0 = ProductState.uniform(m, sc.params.T_0, sc.params.c_s0).to_vector()
        mc = modal_contributions(ed, est0 - true0)
        write_table(run.path("modal.csv"), ["p", "nu_p", "abs_nu_p"],
                    np.column_stack([np.arange(1, mc.nu_p.size + 1), mc.nu_p, np.abs(mc.nu_p)]))
        run.result(modal_reconstruction_error=mc.reconstruction_error)
    return run.finish()


def cmd_sweep(args, sc: Scenario) -> int:
    run = _Run(args, sc)
    LT = _float_list(args.lt_range, "--lt-range") if args.lt_range else list(FIG4_LT)
    Lc = _float_list(args.lc_range, "--lc-range") if args.lc_range else list(FIG4_LC)
    res = design_space_sweep(LT, Lc, sc.params, sc.sched, method=args.method,
                             sensor_kind=sc.sensor_kind, horizon=sc.horizon, period=sc.period,
                             init_cs=sc.init_cs, workers=args.workers)
    res.to_csv(run.path("sweep.csv"))
    ok = [c.conv_time_s for c in res.cells
          if c.stable and not c.oscillatory and math.isfinite(c.conv_time_s)]
    run.result(cells=len(res.cells), stable_nonoscillatory=len(ok),
               min_time_h=min(ok) / 3600.0 if ok else None,
               max_time_h=max(ok) / 3600.0 if ok else None)
    return run.finish()


def cmd_control(args, sc: Scenario) -> int:
    run = _Run(args, sc)
    base = sc.controller or MicrowaveController()
    T_up = base.T_up if args.T_up is None else parse_quantity(args.T_up, "temperature", "--T-up")
    ctl = MicrowaveController(base.K if args.K is None else args.K, T_up)
    obs = None if args.no_observer else ObserverSetup(resolve_gains(sc), sc.init_cs)
    common = dict(period=sc.period, horizon=sc.horizon, threshold=sc.threshold,
                  sensor_kind=sc.sensor_kind, noise_sigma=sc.noise_sigma, seed=sc.seed)
    conv = run_closed_loop(sc.params, sc.sched, None, None, **common)
    cl = run_closed_loop(sc.params, sc.sched, ctl, obs, feedback=args.feedback, **common)
    conv.to_csv(run.path("conventional.csv"))
    cl.to_csv(run.path("closed_loop.csv"))
    if cl.estimate is not None:
        cl.estimate.to_csv(run.path("estimate.csv"), cl.truth)
    run.result(K=ctl.K, T_up=ctl.T_up, drying_time_conventional_h=conv.drying_time / 3600.0,
               drying_time_controlled_h=cl.drying_time / 3600.0,
               reduction_h=(conv.drying_time - cl.drying_time) / 3600.0,
               peak_temperature_K=cl.peak_temperature)
    return run.finish()


def cmd_calibrate(args, sc: Scenario) -> int:
    run = _Run(args, sc)
    names = [n.strip() for n in args.fit.split(",") if n.strip()]
    unknown = set(names) - set(DEFAULT_BOUNDS)
    if unknown or not names:
        raise ConfigError(f"--fit: choose from {sorted(DEFAULT_BOUNDS)}, got {args.fit!r}")
    if args.data:
        datasets = [Dataset.from_csv(p) for p in args.data]
    else:
        # synthetic generate-then-fit from the scenario's own parameters
        times = _sample_grid(sc.horizon, max(sc.period, 60.0))
        truth = integrate(sc.params, sc.sched, t_span=(0.0, times[-1]), t_eval=times)
        series = {"T_avg": truth.T_avg, "T_p": truth.T[:, -1], "cs_avg": truth.c_s_avg}
        datasets = [Dataset(times, series[ch], ch) for ch in args.channel.split(",")]
        for d in datasets:
            d.to_csv(run.path(f"data_{d.channel}.csv"))
    initial = {}
    for item in args.initial or []:
        k, _, v = item.partition("=")
        if k not in names:
            raise ConfigError(f"--initial: {k!r} is not a fitted parameter")
        initial[k] = float(v)
    for n in names:
        initial.setdefault(n, getattr(sc.params, n))
    problem = FitProblem(datasets, sc.params, sc.sched, {n: DEFAULT_BOUNDS[n] for n in names},
                         initial)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", BudgetExhaustedWarning)
        result = fit(problem, budget=args.budget, seed=sc.seed)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    result.write_report(run.path("fit_report.txt"), problem)
    write_table(run.path("fit_history.csv"), ["evaluation", "best_loss"],
                np.column_stack([np.arange(len(result.history)), result.history]))
    run.result(**{f"fit_{k}": v for k, v in result.values.items()}, loss=result.loss,
               initial_loss=result.initial_loss, evaluations=result.evaluations)
    return run.finish()


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", default="default",
                        help="preset name or path to a TOML scenario file")
    common.add_argument("--out-dir", default="lyodry-out")
    common.add_argument("--seed", type=int)
    common.add_argument("--sampling-period", help="e.g. 10 or '10 s'")
    common.add_argument("--noise-3sigma", help="three-sigma measurement noise, e.g. '5 K'")
    common.add_argument("--gains", metavar="LT,LC")
    common.add_argument("--gain-schedule", metavar="LT1,LC1:LT2,LC2@4tau")
    common.add_argument("--sensor", choices=("full", "bottom"))
    common.add_argument("--init-cs", type=float, help="initial concentration estimate, kg/kg")
    common.add_argument("--until-dry", type=float, metavar="THRESHOLD",
                        help="stop when c_s_avg reaches THRESHOLD kg/kg")
    common.add_argument("--horizon", help="simulated time, e.g. '10 h' or seconds")

    p = argparse.ArgumentParser(prog="lyodry", description=__doc__)
    p.add_argument("--version", action="version", version=f"lyodry {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="integrate the drying model")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("observe", parents=[common], help="run the observer on sampled data")
    s.add_argument("--measurements", help="measurement CSV; default is a simulated truth")
    s.set_defaults(func=cmd_observe)

    s = sub.add_parser("design", parents=[common], help="eigen-analysis of the error dynamics")
    s.set_defaults(func=cmd_design)

    s = sub.add_parser("sweep", parents=[common], help="convergence-time map over gains")
    s.add_argument("--lt-range", help="comma-separated L_T values")
    s.add_argument("--lc-range", help="comma-separated L_c values")
    s.add_argument("--method", choices=("eigen", "simulation"), default="eigen")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("control", parents=[common], help="closed-loop microwave control")
    s.add_argument("--K", type=float, help="controller gain, W/(m3 K) (default 1000)")
    s.add_argument("--T-up", help="temperature limit, e.g. 313.15 or '313.15 K' (default 313.15)")
    s.add_argument("--feedback", choices=("estimate", "measured"), default="estimate")
    s.add_argument("--no-observer", action="store_true")
    s.set_defaults(func=cmd_control)

    s = sub.add_parser("calibrate", parents=[common], help="fit h and/or A, E_a to data")
    s.add_argument("--data", action="append", help="dataset CSV (t_s,<channel>); repeatable")
    s.add_argument("--channel", default="T_avg",
                   help="channel(s) for synthetic data when --data is absent")
    s.add_argument("--fit", default="h", help="comma-separated subset of h,A,E_a")
    s.add_argument("--initial", action="append", metavar="NAME=VALUE")
    s.add_argument("--budget", type=int, default=300)
    s.set_defaults(func=cmd_calibrate)
    return p


def _categorize(exc: BaseException) -> str:
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, (InvalidParameterError, InvalidStateError, ShapeMismatchError,
                        MisalignmentError, ValueError)):
        return "validation"
    if isinstance(exc, (StepFailureError, NotReachedError, DecompositionError,
                        DegenerateTimeConstantError, ArithmeticError)):
        return "numerical"
    if isinstance(exc, OSError):
        return "io"
    return "numerical"


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    try:
        sc = _apply_overrides(load_scenario(args.scenario), args)
        return args.func(args, sc)
    except Exception as exc:  # noqa: BLE001 - reported with a category
        cat = _categorize(exc)
        print(json.dumps({"error": cat, "type": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return EXIT_CODES[cat]


if __name__ == "__main__":
    sys.exit(main())
