import json
import random

import numpy as np
import pytest
from numpy.testing import assert_allclose

from mshw import des_engine as de
from mshw import harness, stats
from mshw import phase_type as pt
from mshw.config import ConfigError
from mshw.scenario import ArrivalLaw, PatienceLaw, Scenario

from .conftest import COXIAN, critical, overloaded

SCENARIO_DICT = {
    "name": "coxian",
    "ph": COXIAN,
    "arrival": {"law": "exponential"},
    "patience": {"law": "exponential", "rate": 1.0},
    "lambda": 0.8,
    "beta": 1.0,
}


def _plan(**kw):
    args = dict(
        scenario=critical(pt.validate(**COXIAN)),
        n_list=(9, 16),
        replications=4,
        horizon=3.0,
        grid_dt=0.05,
        t_star=2.0,
        seed=1,
        checks=("ssc", "dai_he", "aq"),
        fluid_window=(1.0, 3.0),
    )
    args.update(kw)
    return harness.ExperimentPlan(**args)


@pytest.mark.parametrize(
    "kw, exc",
    [
        (dict(replications=0), harness.InsufficientReplications),
        (dict(checks=("ks",), replications=50), harness.InsufficientReplications),
        (dict(checks=("vw",), replications=99), harness.InsufficientReplications),
        (dict(checks=("bogus",)), ConfigError),
        (dict(n_list=(16, 9)), ConfigError),
        (dict(n_list=()), ConfigError),
        (dict(t_star=5.0), ConfigError),
        (dict(fluid_window=(1.0, 9.0)), ConfigError),
        (dict(checks=("idle",)), harness.WrongRegime),
        (dict(scenario=overloaded(pt.exponential(1.0), 1.5), checks=("ssc",)), harness.WrongRegime),
    ],
)
def test_plan_validation(kw, exc):
    with pytest.raises(exc):
        _plan(**kw)


def test_default_checks_follow_regime():
    cr = _plan(checks=None, replications=100)
    assert "idle" not in cr.checks and {"ssc", "ks", "vw"} <= set(cr.checks)
    ov = _plan(checks=None, replications=100, scenario=overloaded(pt.exponential(1.0), 1.5))
    assert "idle" in ov.checks and not {"ssc", "aq", "dai_he"} & set(ov.checks)


def test_plan_from_dict_and_hash(tmp_path):
    (tmp_path / "sc.json").write_text(json.dumps(SCENARIO_DICT))
    d = {
        "scenario": "sc.json", "n_list": [9, 16], "replications": 4, "horizon": 3.0,
        "grid_dt": 0.05, "t_star": 2.0, "seed": 1, "fluid_window": [1.0, 3.0], "checks": {"ssc": True, "aq": True, "ks": False},
    }
    (tmp_path / "plan.json").write_text(json.dumps(d))
    plan = harness.load_plan(tmp_path / "plan.json")
    assert plan.checks == ("ssc", "aq")
    inline = harness.plan_from_dict({**d, "scenario": SCENARIO_DICT})
    assert inline.config_hash() == plan.config_hash()
    assert harness.plan_from_dict({**d, "seed": 2, "scenario": SCENARIO_DICT}).config_hash() != plan.config_hash()


@pytest.mark.parametrize(
    "patch",
    [
        {"extra": 1},
        {"checks": {"ssc": True, "warp": True}},
        {"scenario": {**SCENARIO_DICT, "colour": "red"}},
        {"scenario": {**SCENARIO_DICT, "patience": {"law": "exponential"}}},
        {"scenario": {**SCENARIO_DICT, "patience": {"law": "exponential", "rate": 1.0, "shape": 2}}},
    ],
)
def test_plan_fail_closed(patch):
    d = {
        "scenario": SCENARIO_DICT, "n_list": [9, 16], "replications": 4, "horizon": 3.0,
        "grid_dt": 0.05, "t_star": 2.0, "seed": 1, "fluid_window": [1.0, 3.0], "checks": ["ssc"],
    }
    harness.plan_from_dict(d)
    d.update(patch)
    with pytest.raises(ConfigError):
        harness.plan_from_dict(d)


def test_ssc_vanishes_for_single_phase():
    sc = Scenario(pt.exponential(1.0), ArrivalLaw.of("exponential"), PatienceLaw.of("exponential", rate=1.0), 1.0, 1.0)
    paths = [de.run(sc, 25, 5.0, 0.05, seed=0, rep=r, initial=de.STATIONARY) for r in range(5)]
    assert harness.check_ssc(paths, sc) == 0.0


def test_metric_checks_need_matching_regime():
    cr = critical(pt.validate(**COXIAN))
    ov = overloaded(pt.exponential(1.0), 1.5)
    paths = [de.run(cr, 9, 1.0, 0.1, seed=0)]
    for check in (harness.check_ssc, harness.check_dai_he, harness.check_aq):
        with pytest.raises(harness.WrongRegime):
            check(paths, ov)
    with pytest.raises(harness.WrongRegime):
        harness.check_idle(paths, cr)


def test_scaled_marginals():
    sc = overloaded(pt.validate(**COXIAN), 1.2)
    path = de.run(sc, 64, 2.0, 0.1, seed=3, initial=de.STATIONARY)
    x, z = harness.scaled_marginals(path, sc, 1.0)
    assert x == pytest.approx((path.X[10] - 64 * sc.q) / 8)
    assert_allclose(z, (path.Z[10] - 64 * sc.ph.gamma) / 8)


def test_report_marginals_match_raw_paths():
    plan = _plan(replications=3, checks=("ssc",))
    report = harness.run_experiment(plan)
    sc = plan.scenario
    for n in plan.n_list:
        x, z, _ = report.marginals[n]
        for rep in range(plan.replications):
            path = de.run(sc, n, plan.horizon, plan.grid_dt, plan.seed, rep, initial=plan.initial, record_log=False)
            i = int(round(plan.t_star / plan.grid_dt))
            assert x[rep] == (path.X[i] - n * sc.q) / np.sqrt(n)
            assert (z[rep] == (path.Z[i] - n * sc.ph.gamma) / np.sqrt(n)).all()


def test_metric_definitions():
    sc = critical(pt.validate(**COXIAN))
    path = de.run(sc, 36, 4.0, 0.05, seed=2, initial=de.STATIONARY)
    dev = path.Q - np.maximum(path.X, 0)[:, None] * sc.ph.p
    assert harness.ssc_metric(path, sc) == pytest.approx(np.abs(dev).max() / 6)
    assert harness.dai_he_metric(path, sc) == pytest.approx(np.abs(path.A - path.IXp).max() / 6)
    assert harness.fluid_metric(path, sc, (1.0, 2.0)) == pytest.approx(
        np.abs(path.X[20:41] / 36).max()
    )
    assert harness.idle_metric(path, (0.0, 4.0)) == pytest.approx(path.idle.max() / 6)


def test_reproducible_report():
    plan = _plan()
    a = harness.run_experiment(plan)
    b = harness.run_experiment(plan)
    assert a.to_json(timestamp=False) == b.to_json(timestamp=False)
    assert "created" in a.to_dict()["provenance"]
    assert "created" not in a.to_dict(timestamp=False)["provenance"]


def test_aggregate_ignores_worker_order():
    plan = _plan(replications=6)
    reps = harness.simulate_summaries(plan, 9)
    shuffled = reps[:]
    random.Random(0).shuffle(shuffled)
    a, (xa, za, _) = harness.aggregate(plan, reps)
    b, (xb, zb, _) = harness.aggregate(plan, shuffled)
    assert a == b
    assert_allclose(xa, xb)
    assert_allclose(za, zb)


def test_worker_order_does_not_depend_on_thread_count(monkeypatch):
    plan = _plan(replications=3)
    monkeypatch.setenv("MSHW_THREADS", "1")
    one = [r.x for r in harness.simulate_summaries(plan, 9)]
    monkeypatch.setenv("MSHW_THREADS", "4")
    many = [r.x for r in harness.simulate_summaries(plan, 9)]
    assert one == many


def test_worker_count(monkeypatch):
    monkeypatch.setenv("MSHW_THREADS", "1")
    assert harness.worker_count() == 1
    monkeypatch.setenv("MSHW_THREADS", "junk")
    assert harness.worker_count() >= 1
    monkeypatch.delenv("MSHW_THREADS")
    assert harness.worker_count() >= 1


def test_report_files(tmp_path):
    plan = _plan(checks=("ssc", "dai_he", "aq", "fluid"), fluid_window=(1.0, 3.0))
    report = harness.run_experiment(plan)
    report.write(tmp_path)
    data = json.loads((tmp_path / "report.json").read_text())
    assert set(data) == {"plan", "per_n", "limit", "checks", "thresholds", "passed", "provenance"}
    assert data["thresholds"]["fluid_tol"] == plan.fluid_tol
    assert set(data["per_n"]) == {"9", "16"}
    assert data["provenance"]["config_hash"] == plan.config_hash()
    assert "fluid_n9" in data["checks"]
    for n in (9, 16):
        lines = (tmp_path / f"marginals_n{n}.csv").read_text().splitlines()
        assert lines[0] == "rep,X,Z1,Z2,sqrtnW"
        assert len(lines) == 1 + plan.replications
    rows = (tmp_path / "plotdata_ssc.csv").read_text().splitlines()
    assert rows[0] == "n,ssc" and len(rows) == 3


def test_trend_checks():
    plan = _plan(n_list=(4, 9, 16, 25), checks=("ssc", "dai_he"))
    per_n = {
        "4": {"ssc": 0.3, "dai_he": 0.5},
        "9": {"ssc": 0.3, "dai_he": 0.4},
        "16": {"ssc": 0.2, "dai_he": 0.41},
        "25": {"ssc": 0.1, "dai_he": 0.2},
    }
    checks = harness._trend_checks(plan, per_n)
    assert checks == {"ssc_nonincreasing": True, "dai_he_decreasing": False}


@pytest.mark.parametrize(
    "values, dec, total",
    [([0.3, 0.2, 0.1], 3, 3), ([0.1, 0.2, 0.05], 2, 3), ([0.2, 0.1, 0.3], 1, 3), ([0.1, 0.1], 0, 1)],
)
def test_decreasing_pairs(values, dec, total):
    # every pair i < j counts, not only neighbours
    assert stats.decreasing_pairs(values) == (dec, total)


def test_ks_distance_drops_nan():
    a = np.array([0.1, 0.2, np.nan, 0.3])
    assert stats.ks_distance(a, a[[0, 1, 3]]) == 0.0
    assert stats.ks_distance(np.zeros(5), np.ones(5)) == 1.0


@pytest.mark.slow
def test_erlang_a_ks_trend():
    sc = Scenario(pt.exponential(1.0), ArrivalLaw.of("exponential"), PatienceLaw.of("exponential", rate=1.0), 1.0, 1.0)
    plan = harness.ExperimentPlan(sc, (25, 100, 400), 2000, 10.0, 0.01, 10.0, 13, checks=("ks",))
    report = harness.run_experiment(plan)
    ks = [report.per_n[str(n)]["ks_X"] for n in plan.n_list]
    dec, total = stats.decreasing_pairs(ks)
    assert dec >= 2, ks
    assert report.checks["ks_X_trend"]
