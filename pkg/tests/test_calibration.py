import numpy as np
import pytest

from lyodry.calibration import (BudgetExhaustedWarning, Dataset, FitProblem, fit,
                                rate_curve_error)
from lyodry.model import ModelParameters, ShelfSchedule
from lyodry.simulate import IntegratorSettings, integrate

HOUR = 3600.0


@pytest.fixture(scope="module")
def synthetic():
    p, s = ModelParameters(), ShelfSchedule()
    t = np.arange(0.0, 10 * HOUR + 1, 120.0)
    return p, s, integrate(p, s, t_span=(0, t[-1]), t_eval=t)


def test_recover_h_from_temperature(synthetic):
    p, s, tr = synthetic
    data = Dataset(tr.times[::3], tr.T_avg[::3], "T_avg")
    res = fit(FitProblem([data], p, s, {"h": (1.0, 100.0)}, {"h": 12.0}), budget=200)
    assert res.values["h"] == pytest.approx(30.0, rel=0.02)
    assert 1.0 <= res.values["h"] <= 100.0
    assert res.loss <= res.initial_loss


def test_recover_rate_curve_from_concentration(synthetic):
    p, s, tr = synthetic
    data = Dataset(tr.times, tr.c_s_avg, "cs_avg")
    prob = FitProblem([data], p, s, {"A": (1e-8, 1e4), "E_a": (5e3, 5e4)},
                      {"A": 1e-3, "E_a": 12000.0})
    res = fit(prob, budget=300)
    assert res.initial_loss / res.loss >= 10
    err = rate_curve_error(res.values, {"A": p.A, "E_a": p.E_a}, p, (tr.T.min(), tr.T.max()))
    assert err < 0.05


def test_zero_residual_returns_guess(synthetic):
    p, s, tr = synthetic
    data = Dataset(tr.times[::10], tr.T[::10, -1], "T_p")
    # same integrator settings as the data, so the residual is exactly zero
    res = fit(FitProblem([data], p, s, {"h": (1.0, 100.0)}, {"h": 30.0},
                         settings=IntegratorSettings()))
    assert res.values == {"h": 30.0} and res.loss == 0.0 and res.evaluations == 1


def test_history_nonincreasing_and_deterministic(synthetic):
    p, s, tr = synthetic
    data = Dataset(tr.times[::5], tr.T_avg[::5], "T_avg")
    prob = lambda: FitProblem([data], p, s, {"h": (1.0, 100.0)}, {"h": 80.0})
    a, b = fit(prob(), budget=60), fit(prob(), budget=60)
    assert all(y <= x for x, y in zip(a.history, a.history[1:]))
    assert a.values == b.values and a.history == b.history


def test_budget_exhausted_warns(synthetic):
    p, s, tr = synthetic
    data = Dataset(tr.times[::5], tr.T_avg[::5], "T_avg")
    with pytest.warns(BudgetExhaustedWarning):
        res = fit(FitProblem([data], p, s, {"h": (1.0, 100.0)}, {"h": 80.0}), budget=5)
    assert res.exhausted and res.evaluations <= 5 and res.loss <= res.initial_loss


def test_joint_channels_weighted(synthetic):
    p, s, tr = synthetic
    sets = [Dataset(tr.times[::5], tr.T_avg[::5], "T_avg"),
            Dataset(tr.times[::5], tr.c_s_avg[::5], "cs_avg")]
    prob = FitProblem(sets, p, s, {"h": (1.0, 100.0)}, {"h": 50.0})
    w = prob.weights()
    assert w[0] == pytest.approx(1 / np.var(sets[0].values))
    assert fit(prob, budget=120).values["h"] == pytest.approx(30.0, rel=0.02)


def test_problem_validation(synthetic):
    p, s, tr = synthetic
    data = Dataset(tr.times[:3], tr.T_avg[:3], "T_avg")
    with pytest.raises(ValueError):
        FitProblem([], p, s, {"h": (1.0, 100.0)})
    with pytest.raises(ValueError):
        FitProblem([data], p, s, {})
    with pytest.raises(ValueError):
        FitProblem([data], p, s, {"k": (0.1, 1.0)})
    with pytest.raises(ValueError):
        Dataset([0.0], [1.0], "moisture")


def test_dataset_csv(tmp_path):
    d = Dataset([0.0, 60.0], [0.2, 0.19], "cs_avg")
    d.to_csv(tmp_path / "d.csv")
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "t_s,cs_avg"
    back = Dataset.from_csv(tmp_path / "d.csv")
    assert back.channel == "cs_avg" and np.array_equal(back.values, d.values)


def test_report(tmp_path, synthetic):
    p, s, tr = synthetic
    data = Dataset(tr.times[::10], tr.T_avg[::10], "T_avg")
    prob = FitProblem([data], p, s, {"h": (1.0, 100.0)}, {"h": 25.0})
    res = fit(prob, budget=40)
    res.write_report(tmp_path / "r.txt", prob)
    kv = dict(line.split(" = ") for line in (tmp_path / "r.txt").read_text().splitlines())
    assert float(kv["h"]) == res.values["h"] and "rms_residual[T_avg]" in kv
