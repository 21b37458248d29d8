"""JSON configuration for scenarios and experiment plans.

Parsing is fail-closed: unknown keys, missing required keys and values of
the wrong type raise :class:`ConfigError`.
"""
from __future__ import annotations

import json
from pathlib import Path

from . import phase_type
from .scenario import ArrivalLaw, PatienceLaw, Scenario, ScenarioError

_SCENARIO_KEYS = {"name", "ph", "arrival", "patience", "lambda", "beta", "regime"}
_SCENARIO_REQUIRED = {"ph", "arrival", "patience", "lambda"}
_PH_KEYS = {"p", "nu", "P"}
_ARRIVAL_KEYS = {
    "exponential": set(),
    "deterministic": set(),
    "erlang": {"k"},
    "hyperexponential": {"scv"},
    "lognormal": {"scv"},
}
_PATIENCE_KEYS = {
    "exponential": {"rate"},
    "deterministic": {"value"},
    "uniform": {"b"},
    "weibull": {"shape", "scale"},
    "hyperexponential": {"probs", "rates"},
    "infinite": set(),
}


class ConfigError(ValueError):
    pass


def load_json(path) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def check_keys(section: dict, allowed: set, required: set, where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    missing = required - set(section)
    if missing:
        raise ConfigError(f"missing key(s) in {where}: {sorted(missing)}")


def _law(section: dict, table: dict, where: str) -> tuple[str, dict]:
    if not isinstance(section, dict) or "law" not in section:
        raise ConfigError(f"{where} needs a 'law' entry")
    law = section["law"]
    if law not in table:
        raise ConfigError(f"{where}: unknown law {law!r}; choose from {sorted(table)}")
    params = {k: v for k, v in section.items() if k != "law"}
    check_keys(params, table[law], table[law], f"{where} ({law})")
    return law, params


def phase_type_from_dict(d: dict) -> phase_type.PhaseType:
    check_keys(d, _PH_KEYS, _PH_KEYS, "ph")
    try:
        return phase_type.validate(d["p"], d["nu"], d["P"])
    except phase_type.PhaseTypeError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"ph: {exc}") from exc


def scenario_from_dict(d: dict) -> Scenario:
    check_keys(d, _SCENARIO_KEYS, _SCENARIO_REQUIRED, "scenario")
    ph = phase_type_from_dict(d["ph"])
    try:
        arr_law, arr_kw = _law(d["arrival"], _ARRIVAL_KEYS, "arrival")
        pat_law, pat_kw = _law(d["patience"], _PATIENCE_KEYS, "patience")
        return Scenario(
            ph=ph,
            arrival=ArrivalLaw.of(arr_law, **arr_kw),
            patience=PatienceLaw.of(pat_law, **pat_kw),
            lam=float(d["lambda"]),
            beta=float(d.get("beta", 0.0)),
            regime=d.get("regime", "critical"),
            name=str(d.get("name", "")),
        )
    except ScenarioError as exc:
        raise ConfigError(str(exc)) from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scenario: {exc}") from exc


def load_scenario(path) -> Scenario:
    return scenario_from_dict(load_json(path))


def resolve_scenario(entry, base: Path) -> Scenario:
    """A plan's ``scenario`` entry is either inline or a path relative to the plan."""
    if isinstance(entry, str):
        return load_scenario(base / entry)
    return scenario_from_dict(entry)
