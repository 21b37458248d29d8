"""Scaling experiments: simulate over a list of system sizes, sample the limit,
and compare.

Per replication only scalar summaries and the marginals at ``t_star`` are
kept, so memory does not grow with the number of replications.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import joblib
import numpy as np
import scipy
from joblib import Parallel, delayed

from . import __version__, des_engine, limits, stats
from .config import ConfigError, check_keys, load_json, resolve_scenario
from .scenario import CRITICAL, OVERLOADED, Scenario

CHECKS = ("ssc", "vw", "aq", "dai_he", "idle", "fluid", "ks")
_CRITICAL_ONLY = {"ssc", "aq", "dai_he"}
_OVERLOADED_ONLY = {"idle"}
_KS_CHECKS = {"ks", "vw"}
MIN_KS_REPS = 100
FLUID_FRACTION = 0.95
# pass rules behind the entries of Report.checks, copied into every report
THRESHOLDS = {
    "fluid_fraction": FLUID_FRACTION,
    "ks_X_trend": "KS(X) decreases in at least ceil(2/3) of all pairs n_i < n_j",
    "ssc_nonincreasing": "median SSC metric nonincreasing in n",
    "decreasing": "median dai_he, aq and idle metrics strictly decreasing in n",
}
_LIMIT_FLOATS_PER_CHUNK = 1e7


class InsufficientReplications(ValueError):
    pass


class WrongRegime(ValueError):
    pass


def worker_count() -> int:
    """Workers for replication loops, capped by ``MSHW_THREADS``."""
    cpus = os.cpu_count() or 1
    env = os.environ.get("MSHW_THREADS")
    if env:
        try:
            cap = int(env)
        except ValueError:
            cap = cpus
        return max(1, min(cap, cpus))
    return cpus


@dataclass(frozen=True)
class ExperimentPlan:
    scenario: Scenario
    n_list: tuple
    replications: int
    horizon: float
    grid_dt: float
    t_star: float
    seed: int
    checks: Optional[tuple] = None
    discipline: str = des_engine.ORIGINAL
    initial: str = des_engine.STATIONARY
    limit_dt: float = 1e-3
    limit_replications: Optional[int] = None
    fluid_window: tuple = (5.0, 10.0)
    fluid_tol: float = 0.05
    margin: float = 5.0

    def __post_init__(self):
        if self.checks is None:
            # every check that applies to the scenario's regime
            skip = _OVERLOADED_ONLY if self.scenario.regime == CRITICAL else _CRITICAL_ONLY
            object.__setattr__(self, "checks", tuple(c for c in CHECKS if c not in skip))
        if self.replications < 1:
            raise InsufficientReplications("an experiment needs at least one replication")
        if set(self.checks) & _KS_CHECKS and self.replications < MIN_KS_REPS:
            raise InsufficientReplications(
                f"KS-based checks need >= {MIN_KS_REPS} replications, got {self.replications}"
            )
        unknown = set(self.checks) - set(CHECKS)
        if unknown:
            raise ConfigError(f"unknown checks {sorted(unknown)}")
        ns = list(self.n_list)
        if not ns or any(int(n) != n or n < 1 for n in ns):
            raise ConfigError("n_list must hold positive integers")
        if any(b <= a for a, b in zip(ns, ns[1:])):
            raise ConfigError("n_list must be strictly increasing")
        if not (0 < self.t_star <= self.horizon):
            raise ConfigError("t_star must lie in (0, horizon]")
        lo, hi = self.fluid_window
        if not (0 <= lo <= hi <= self.horizon):
            raise ConfigError("fluid_window must lie inside [0, horizon]")
        regime = self.scenario.regime
        if regime == OVERLOADED and set(self.checks) & _CRITICAL_ONLY:
            raise WrongRegime(f"checks {sorted(set(self.checks) & _CRITICAL_ONLY)} need a critical scenario")
        if regime == CRITICAL and set(self.checks) & _OVERLOADED_ONLY:
            raise WrongRegime("the idle check needs an overloaded scenario")

    @property
    def n_limit(self) -> int:
        return self.limit_replications or self.replications

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "scenario"}
        d["scenario"] = self.scenario.to_dict()
        d["n_list"] = list(self.n_list)
        d["checks"] = list(self.checks)
        d["fluid_window"] = list(self.fluid_window)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


_PLAN_KEYS = {
    "scenario", "n_list", "replications", "horizon", "grid_dt", "t_star", "seed", "checks",
    "discipline", "initial", "limit_dt", "limit_replications", "fluid_window", "fluid_tol", "margin",
}
_PLAN_REQUIRED = {"scenario", "n_list", "replications", "horizon", "grid_dt", "t_star", "seed"}


def plan_from_dict(d: dict, base: Path = Path(".")) -> ExperimentPlan:
    check_keys(d, _PLAN_KEYS, _PLAN_REQUIRED, "plan")
    kw = dict(d)
    kw["scenario"] = resolve_scenario(d["scenario"], base)
    kw["n_list"] = tuple(int(n) for n in d["n_list"])
    if "checks" in d:
        checks = d["checks"]
        if isinstance(checks, dict):
            unknown = set(checks) - set(CHECKS)
            if unknown:
                raise ConfigError(f"unknown checks {sorted(unknown)}")
            kw["checks"] = tuple(c for c in CHECKS if checks.get(c, False))
        else:
            kw["checks"] = tuple(checks)
    if "fluid_window" in d:
        kw["fluid_window"] = tuple(float(v) for v in d["fluid_window"])
    try:
        return ExperimentPlan(**kw)
    except TypeError as exc:
        raise ConfigError(f"plan: {exc}") from exc


def load_plan(path) -> ExperimentPlan:
    path = Path(path)
    return plan_from_dict(load_json(path), path.parent)


# ---------------------------------------------------------------------------
# per-path metrics


def scaled_marginals(path: des_engine.SimPath, sc: Scenario, t_star: float) -> tuple[float, np.ndarray]:
    """``((X - n q)/sqrt n, (Z - n gamma)/sqrt n)`` at the grid point nearest ``t_star``."""
    i = int(round(t_star / path.dt))
    rn = math.sqrt(path.n)
    return (path.X[i] - path.n * sc.q) / rn, (path.Z[i] - path.n * sc.ph.gamma) / rn


def ssc_metric(path: des_engine.SimPath, sc: Scenario) -> float:
    """``sup_t max_k |Q_k - p_k X^+| / sqrt n``."""
    dev = path.Q - np.maximum(path.X, 0)[:, None] * sc.ph.p
    return float(np.abs(dev).max() / math.sqrt(path.n))


def dai_he_metric(path: des_engine.SimPath, sc: Scenario) -> float:
    """``sup_t |A(t) - alpha int X^+| / sqrt n``."""
    return float(np.abs(path.A - sc.alpha * path.IXp).max() / math.sqrt(path.n))


def aq_metric(path: des_engine.SimPath) -> float:
    return float(path.AQ.max() / math.sqrt(path.n))


def _window(path, window) -> np.ndarray:
    lo, hi = window
    g = path.grid
    return (g >= lo - 1e-12) & (g <= hi + 1e-12)


def idle_metric(path: des_engine.SimPath, window) -> float:
    """``sup_t I(t) / sqrt n`` over the window."""
    return float(path.idle[_window(path, window)].max() / math.sqrt(path.n))


def fluid_metric(path: des_engine.SimPath, sc: Scenario, window) -> float:
    """``sup_t |X(t)/n - q|`` over the window."""
    return float(np.abs(path.X[_window(path, window)] / path.n - sc.q).max())


def vw_pair(path: des_engine.SimPath, sc: Scenario, t_star: float) -> tuple[float, float]:
    """``(sqrt n W(t*), X(t*)^+ / (mu sqrt n))``."""
    i = int(round(t_star / path.dt))
    rn = math.sqrt(path.n)
    return rn * float(path.W[i]), max(int(path.X[i]), 0) / (sc.mu * rn)


def check_ssc(paths, sc: Scenario) -> float:
    if sc.regime != CRITICAL:
        raise WrongRegime("state-space collapse is checked in the critical regime")
    return float(np.median([ssc_metric(p, sc) for p in paths]))


def check_dai_he(paths, sc: Scenario) -> float:
    if sc.regime != CRITICAL:
        raise WrongRegime("the abandonment relation is checked in the critical regime")
    return float(np.median([dai_he_metric(p, sc) for p in paths]))


def check_aq(paths, sc: Scenario) -> float:
    if sc.regime != CRITICAL:
        raise WrongRegime("queued abandoners are checked in the critical regime")
    return float(np.median([aq_metric(p) for p in paths]))


def check_idle(paths, sc: Scenario, window=(5.0, 10.0)) -> float:
    if sc.regime != OVERLOADED:
        raise WrongRegime("idle servers are checked in the overloaded regime")
    return float(np.median([idle_metric(p, window) for p in paths]))


def check_vw(paths, sc: Scenario, t_star: float) -> float:
    pairs = np.array([vw_pair(p, sc, t_star) for p in paths])
    return stats.ks_distance(pairs[:, 0], pairs[:, 1])


# ---------------------------------------------------------------------------


@dataclass
class RepSummary:
    rep: int
    x: float
    z: np.ndarray
    metrics: dict


def _summarise(plan: ExperimentPlan, n: int, rep: int) -> RepSummary:
    sc = plan.scenario
    needs_log = bool({"vw", "aq"} & set(plan.checks))
    path = des_engine.run(
        sc, n, plan.horizon, plan.grid_dt, plan.seed, rep,
        discipline=plan.discipline, initial=plan.initial,
        record_log=needs_log, margin=plan.margin if needs_log else 0.0,
    )
    x, z = scaled_marginals(path, sc, plan.t_star)
    m = {}
    for check in plan.checks:
        if check == "ssc":
            m["ssc"] = ssc_metric(path, sc)
        elif check == "dai_he":
            m["dai_he"] = dai_he_metric(path, sc)
        elif check == "aq":
            m["aq"] = aq_metric(path)
        elif check == "idle":
            m["idle"] = idle_metric(path, plan.fluid_window)
        elif check == "fluid":
            m["fluid"] = fluid_metric(path, sc, plan.fluid_window)
        elif check == "vw":
            m["vw_sim"], m["vw_x"] = vw_pair(path, sc, plan.t_star)
    return RepSummary(rep, float(x), z, m)


def simulate_summaries(plan: ExperimentPlan, n: int) -> list[RepSummary]:
    jobs = worker_count()
    out = Parallel(n_jobs=jobs)(delayed(_summarise)(plan, n, r) for r in range(plan.replications))
    return sorted(out, key=lambda s: s.rep)


def limit_marginals(
    sc: Scenario, t_star: float, reps: int, seed: int, dt: float = 1e-3, horizon: Optional[float] = None
) -> tuple[np.ndarray, np.ndarray]:
    """Samples of the limit ``(X(t*), Z(t*))``, drawn in memory-bounded chunks."""
    horizon = t_star if horizon is None else horizon
    N = int(math.floor(horizon / dt + 1e-9)) + 1
    K = sc.K
    per = max(1, int(_LIMIT_FLOATS_PER_CHUNK // (N * (2 + 3 * K + K * K))))
    i = int(round(t_star / dt))
    xs, zs = [], []
    chunk = 0
    done = 0
    while done < reps:
        size = min(per, reps - done)
        path = limits.diffusion_path(sc, seed, dt=dt, horizon=horizon, reps=size, chunk=chunk)
        xs.append(path.X[:, i])
        zs.append(path.Z[:, i])
        done += size
        chunk += 1
    return np.concatenate(xs), np.concatenate(zs)


@dataclass
class Report:
    plan: dict
    per_n: dict
    limit: dict
    checks: dict
    provenance: dict
    marginals: dict = field(default_factory=dict, repr=False)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_dict(self, timestamp: bool = True) -> dict:
        prov = dict(self.provenance)
        if not timestamp:
            prov.pop("created", None)
            prov.pop("elapsed_seconds", None)
        return {
            "plan": self.plan,
            "per_n": self.per_n,
            "limit": self.limit,
            "checks": self.checks,
            "thresholds": THRESHOLDS | {"fluid_tol": self.plan.get("fluid_tol")},
            "passed": self.passed,
            "provenance": prov,
        }

    def to_json(self, timestamp: bool = True) -> str:
        return json.dumps(self.to_dict(timestamp), indent=2, sort_keys=True)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json() + "\n")
        for n, (x, z, w) in self.marginals.items():
            K = z.shape[1]
            with open(out / f"marginals_n{n}.csv", "w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(["rep", "X"] + [f"Z{k + 1}" for k in range(K)] + ["sqrtnW"])
                for r in range(x.size):
                    wr.writerow([r, repr(float(x[r]))] + [repr(float(v)) for v in z[r]] + [repr(float(w[r]))])
        ns = sorted(self.per_n, key=int)
        series = {}
        for n in ns:
            for key, val in self.per_n[n].items():
                if isinstance(val, (int, float)) and key != "replications":
                    series.setdefault(key, []).append((int(n), val))
        for key, rows in series.items():
            with open(out / f"plotdata_{key}.csv", "w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(["n", key])
                wr.writerows((n, repr(float(v))) for n, v in rows)


def aggregate(plan: ExperimentPlan, reps: list, lim_x=None, lim_z=None) -> tuple[dict, tuple]:
    """Per-n statistics from replication summaries.

    Summaries are put in replication order first, so the result does not
    depend on the order in which workers returned them.
    """
    reps = sorted(reps, key=lambda r: r.rep)
    K = plan.scenario.K
    x = np.array([r.x for r in reps])
    z = np.array([r.z for r in reps]).reshape(len(reps), K)
    entry = {"replications": len(reps), "mean_X": float(x.mean()), "var_X": float(x.var(ddof=1)) if x.size > 1 else 0.0}
    w = np.full(x.size, np.nan)
    if lim_x is not None:
        entry["ks_X"] = stats.ks_distance(x, lim_x)
        for k in range(K):
            entry[f"ks_Z{k + 1}"] = stats.ks_distance(z[:, k], lim_z[:, k])
    for key in ("ssc", "dai_he", "aq", "idle", "fluid"):
        if key in plan.checks:
            entry[key] = float(np.median([r.metrics[key] for r in reps]))
    if "fluid" in plan.checks:
        dev = np.array([r.metrics["fluid"] for r in reps])
        entry["fluid_fraction_within"] = float((dev <= plan.fluid_tol).mean())
    if "vw" in plan.checks:
        w = np.array([r.metrics["vw_sim"] for r in reps])
        wx = np.array([r.metrics["vw_x"] for r in reps])
        entry["vw_ks"] = stats.ks_distance(w, wx)
        entry["vw_missing"] = int(np.isnan(w).sum())
    return entry, (x, z, w)


def _trend_checks(plan: ExperimentPlan, per_n: dict) -> dict:
    ns = [str(n) for n in plan.n_list]
    checks = {}
    if len(ns) < 2:
        return checks
    if "ks" in plan.checks:
        dec, total = stats.decreasing_pairs([per_n[n]["ks_X"] for n in ns])
        checks["ks_X_trend"] = dec >= math.ceil(2 * total / 3)
    if "ssc" in plan.checks:
        checks["ssc_nonincreasing"] = stats.nonincreasing([per_n[n]["ssc"] for n in ns])
    for key in ("dai_he", "aq", "idle"):
        if key in plan.checks:
            checks[f"{key}_decreasing"] = stats.strictly_decreasing([per_n[n][key] for n in ns])
    return checks


def run_experiment(plan: ExperimentPlan) -> Report:
    """Simulate every ``n`` in the plan, sample the limit once, and compare."""
    sc = plan.scenario
    started = time.time()
    need_limit = "ks" in plan.checks
    lim_x = lim_z = None
    if need_limit:
        lim_x, lim_z = limit_marginals(sc, plan.t_star, plan.n_limit, plan.seed, plan.limit_dt, plan.t_star)
    per_n, marginals, checks = {}, {}, {}
    for n in plan.n_list:
        entry, marginals[n] = aggregate(plan, simulate_summaries(plan, n), lim_x, lim_z)
        if "fluid" in plan.checks:
            checks[f"fluid_n{n}"] = entry["fluid_fraction_within"] >= FLUID_FRACTION
        per_n[str(n)] = entry
    checks.update(_trend_checks(plan, per_n))
    for n, entry in per_n.items():
        for key, val in entry.items():
            if isinstance(val, float) and not math.isfinite(val):
                checks[f"finite_{key}_n{n}"] = False
    limit = {}
    if need_limit:
        limit = {"replications": int(lim_x.size), "mean_X": float(lim_x.mean()), "var_X": float(lim_x.var(ddof=1))}
    provenance = {
        "config_hash": plan.config_hash(),
        "master_seed": plan.seed,
        "simulation_streams": "SeedSequence(seed, spawn_key=(n, rep))",
        "limit_streams": f"SeedSequence(seed, spawn_key=({limits.LIMIT_KEY}, chunk))",
        "versions": {
            "mshw": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "joblib": joblib.__version__,
        },
        "created": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        "elapsed_seconds": round(time.time() - started, 3),
    }
    return Report(plan.to_dict(), per_n, limit, checks, provenance, marginals)
