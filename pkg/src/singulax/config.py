"""Experiment configuration: JSON files with a schema version plus --set overrides."""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

SCHEMA_VERSION = 1

EXPERIMENTS = ("kernel-verify", "domination", "scaling", "mikhlin-scan", "elliptic-reg",
               "maxreg", "oblique-roundtrip", "sector-sweep")


class ConfigError(ValueError):
    """Validation failure; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


DEFAULTS: dict[str, dict] = {
    "kernel-verify": {
        "c_values": [0.0], "J": 512, "J_coarse": 256, "grading": 2.0,
        "oracle_times": [0.1, 1.0], "fit_times": [0.01, 10.0, 7],
        "fit_kinds": ["kernel", "y_derivative"],
        "complex_c": 1.0, "complex_phases_deg": [45.0, -45.0, 60.0, -60.0],
        "b_values": [0.0, 1.0, 2.0], "epsilon": 1.0, "delta": 0.9,
        "checks": ["oracle", "mass", "gaussian"],
    },
    "domination": {
        "c_values": [1.0], "b_values": [0.5, 1.0, 2.0], "times": [0.1, 0.5, 1.0],
        "J_values": [256, 512], "Y_max": 20.0, "grading": 2.0, "n_probes": 4,
    },
    "scaling": {
        "c_values": [0.0, 1.0], "b_values": [1.0, 2.0, 4.0], "t": 0.25,
        "J_values": [256, 512], "grading": 2.0, "y_factor": 30.0,
        "gauge_c_values": [-0.5, 0.0, 1.0, 2.0], "gauge_t": 0.5, "gauge_b": 1.0,
        "Y_max": 20.0, "checks": ["scaling", "gauge"],
    },
    "mikhlin-scan": {
        "c": 1.0, "a": [0.5], "p": 2.0, "m": 1.0, "cases": None,
        "J_values": [128, 256], "Y_max": 20.0, "grading": 2.0,
        "n_lambda_mod": 3, "n_lambda_arg": 2, "lambda_range": [0.01, 100.0],
        "n_xi_mod": 4, "n_xi_dir": 2, "xi_range": [0.01, 100.0], "n_probes": 32,
        "formula_configs": [[1.0, [0.5]], [1.0, [0.5, 0.0]], [0.0, [0.3, 0.4]]],
        "formula_samples": 8, "formula_J": 256,
        "checks": ["formula", "scan"],
    },
    "elliptic-reg": {
        "c": 1.0, "a": [0.5], "p": 2.0, "m": 1.0, "cases": None,
        "refinements": [[128, 32], [256, 64]], "Y_max": 20.0, "grading": 2.0,
        "n_probes": 16, "probe_support": 4.0, "lambda": 1e-6, "lambda_roundtrip": 1.3,
    },
    "maxreg": {
        "c": 1.0, "a": [0.5], "p": 2.0, "m": 1.0, "cases": None,
        "J": 128, "n_x": 32, "Y_max": 20.0, "grading": 2.0, "T": 1.0, "steps": 100,
    },
    "oblique-roundtrip": {
        "Q1": [[1.0]], "q": [0.3], "gamma": 1.2, "b": [0.4], "c": 1.5,
        "m": 0.5, "p": 2.0, "lambda": 1.0,
        "refinements": [[64, 32], [128, 32], [256, 32]], "Y_max": 20.0, "grading": 2.0,
        "period": 12.566370614359172, "n_random_Q": 100,
    },
    "sector-sweep": {
        "c": 1.0, "a_values": [[0.0, 0.0], [0.5, 0.0], [0.7, 0.0]], "J": 128, "n_x": 16,
        "Y_max": 20.0, "grading": 2.0, "n_probes": 64, "probe_support": 5.0, "max_wave": 3,
        "equality_waves": [2, 4, 8],
    },
}


@dataclass
class ExperimentConfig:
    experiment: str
    params: dict
    seed: int = 0
    out: str | None = None
    schema_version: int = SCHEMA_VERSION
    overrides: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "experiment": self.experiment,
                "seed": self.seed, "params": self.params}


def parse_value(text: str):
    """JSON literal if it parses, else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(params: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like key=value")
    key, text = assignment.split("=", 1)
    key = key.strip()
    if key not in params:
        raise ConfigError(key, "unknown field")
    params[key] = parse_value(text)


def make_config(experiment: str, data: dict | None = None, overrides=(), seed: int | None = None,
                out: str | None = None) -> ExperimentConfig:
    if experiment not in DEFAULTS:
        raise ConfigError("experiment", f"unknown experiment {experiment!r}; choose from {', '.join(EXPERIMENTS)}")
    data = dict(data or {})
    version = data.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"expected {SCHEMA_VERSION}, got {version!r}")
    file_exp = data.pop("experiment", experiment)
    if file_exp != experiment:
        raise ConfigError("experiment", f"config file is for {file_exp!r}, not {experiment!r}")
    file_seed = data.pop("seed", 0)
    user = data.pop("params", {})
    if data:
        raise ConfigError(sorted(data)[0], "unknown top-level field")
    params = copy.deepcopy(DEFAULTS[experiment])
    for k, v in user.items():
        if k not in params:
            raise ConfigError(k, "unknown field")
        params[k] = v
    overrides = list(overrides)
    for a in overrides:
        if a.startswith("seed="):
            file_seed = parse_value(a[5:])
            continue
        apply_override(params, a)
    seed = file_seed if seed is None else seed
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed", "must be a non-negative integer")
    cfg = ExperimentConfig(experiment, params, seed, out, SCHEMA_VERSION, overrides)
    validate(cfg)
    return cfg


def load_config(path, experiment: str, overrides=(), seed=None, out=None) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"not valid JSON: {exc}") from None
    except OSError as exc:
        raise ConfigError("config", str(exc)) from None
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be an object")
    return make_config(experiment, data, overrides, seed, out)


# -- validation ----------------------------------------------------------------------

def _num(name, v, lo=-math.inf, hi=math.inf, strict_lo=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(name, f"expected a finite number, got {v!r}")
    if (v <= lo if strict_lo else v < lo) or v > hi:
        raise ConfigError(name, f"value {v} out of range")
    return float(v)


def _int(name, v, lo=1):
    if isinstance(v, bool) or not isinstance(v, int) or v < lo:
        raise ConfigError(name, f"expected an integer >= {lo}, got {v!r}")
    return v


def _list(name, v, min_len=1):
    if not isinstance(v, (list, tuple)) or len(v) < min_len:
        raise ConfigError(name, f"expected a list with at least {min_len} entries")
    return list(v)


def check_c(name, c):
    _num(name, c)
    if not c > -1:
        raise ConfigError(name, f"need c > -1, got {c}")


def check_a(name, a):
    a = _list(name, a)
    if len(a) not in (1, 2):
        raise ConfigError(name, "anisotropy vector must have 1 or 2 components")
    for v in a:
        _num(name, v)
    if not math.hypot(*a) < 1:
        raise ConfigError(name, f"need |a| < 1, got |a| = {math.hypot(*a)}")


def check_mp(prefix, m, p, c_eff, label="c"):
    _num(prefix + "p", p, 1.0)
    _num(prefix + "m", m)
    r = (m + 1) / p
    if not 0 < r < c_eff + 1:
        raise ConfigError(prefix + "m", f"inadmissible parameters: need 0 < (m+1)/p < {label}+1, "
                          f"got (m+1)/p = {r}, {label}+1 = {c_eff + 1}")


def case_list(params: dict, keys=("c", "a", "p", "m")) -> list[dict]:
    if params.get("cases"):
        return [dict(cs) for cs in params["cases"]]
    return [{k: params[k] for k in keys}]


def _check_cases(params):
    cases = case_list(params)
    for i, cs in enumerate(cases):
        pre = f"cases[{i}]." if params.get("cases") else ""
        for k in ("c", "a", "p", "m"):
            if k not in cs:
                raise ConfigError(pre + k, "missing")
        check_c(pre + "c", cs["c"])
        check_a(pre + "a", cs["a"])
        check_mp(pre, cs["m"], cs["p"], cs["c"])


def _check_grid(params, keys=("J",)):
    for k in keys:
        if k in params:
            _int(k, params[k], 2)
    if "Y_max" in params:
        _num("Y_max", params["Y_max"], 0, strict_lo=True)
    if "grading" in params:
        _num("grading", params["grading"], 1.0)


def _check_spd(Q1, q, gamma):
    import numpy as np
    N = len(Q1)
    Q = np.zeros((N + 1, N + 1))
    Q[:N, :N] = Q1
    Q[:N, N] = q
    Q[N, :N] = q
    Q[N, N] = gamma
    if not np.allclose(Q, Q.T):
        raise ConfigError("Q1", "must be symmetric")
    for k in range(1, N + 2):
        d = float(np.linalg.det(Q[:k, :k]))
        if not d > 0:
            raise ConfigError("Q1", f"Q is not positive definite: leading minor of order {k} is {d:.6g}")


def validate(cfg: ExperimentConfig) -> None:
    """Check every hypothesis an experiment relies on before any compute."""
    P = cfg.params
    e = cfg.experiment
    if e == "kernel-verify":
        for c in _list("c_values", P["c_values"]):
            check_c("c_values", c)
        check_c("complex_c", P["complex_c"])
        _int("J", P["J"], 8)
        _int("J_coarse", P["J_coarse"], 8)
        _check_grid(P)
        for t in _list("oracle_times", P["oracle_times"]):
            _num("oracle_times", t, 0, strict_lo=True)
        ft = _list("fit_times", P["fit_times"], 3)
        if not (0 < ft[0] < ft[1]):
            raise ConfigError("fit_times", "need 0 < t_min < t_max")
        _int("fit_times", ft[2], 2)
        for k in _list("fit_kinds", P["fit_kinds"]):
            if k not in ("kernel", "y_derivative"):
                raise ConfigError("fit_kinds", f"unknown kind {k!r}")
        for ph in P["complex_phases_deg"]:
            if not abs(_num("complex_phases_deg", ph)) < 90:
                raise ConfigError("complex_phases_deg", "complex times need |arg z| < 90 degrees")
        for b in P["b_values"]:
            _num("b_values", b)
        _num("epsilon", P["epsilon"], 0, strict_lo=True)
        _num("delta", P["delta"], 0, 1, strict_lo=True)
        _checks(P, ("oracle", "mass", "gaussian", "complex"))
    elif e == "domination":
        for c in _list("c_values", P["c_values"]):
            check_c("c_values", c)
        for b in _list("b_values", P["b_values"]):
            _num("b_values", b)
        for t in _list("times", P["times"]):
            _num("times", t, 0, strict_lo=True)
        for J in _list("J_values", P["J_values"]):
            _int("J_values", J, 8)
        _check_grid(P)
        _int("n_probes", P["n_probes"], 0)
    elif e == "scaling":
        for c in _list("c_values", P["c_values"]) + list(P["gauge_c_values"]):
            check_c("c_values", c)
        for b in _list("b_values", P["b_values"]):
            if _num("b_values", b) == 0:
                raise ConfigError("b_values", "scaling needs b != 0")
        _num("t", P["t"], 0, strict_lo=True)
        _num("gauge_t", P["gauge_t"], 0, strict_lo=True)
        _num("gauge_b", P["gauge_b"])
        for J in _list("J_values", P["J_values"], 2):
            _int("J_values", J, 8)
        _num("y_factor", P["y_factor"], 0, strict_lo=True)
        _check_grid(P)
        _checks(P, ("scaling", "gauge"))
    elif e == "mikhlin-scan":
        _check_cases(P)
        for J in _list("J_values", P["J_values"]):
            _int("J_values", J, 8)
        _check_grid(P)
        for k in ("n_lambda_mod", "n_lambda_arg", "n_xi_mod", "n_xi_dir", "n_probes",
                  "formula_samples", "formula_J"):
            _int(k, P[k])
        for k in ("lambda_range", "xi_range"):
            r = _list(k, P[k], 2)
            if not 0 < r[0] <= r[1]:
                raise ConfigError(k, "need 0 < lo <= hi")
        for i, fc in enumerate(P["formula_configs"]):
            check_c(f"formula_configs[{i}]", fc[0])
            check_a(f"formula_configs[{i}]", fc[1])
        _checks(P, ("formula", "scan"))
    elif e == "elliptic-reg":
        _check_cases(P)
        for r in _list("refinements", P["refinements"]):
            _int("refinements", r[0], 8)
            _int("refinements", r[1], 4)
        _check_grid(P)
        if _int("n_probes", P["n_probes"]) < 16:
            raise ConfigError("n_probes", "need at least 16 probes")
        if not 0 < P["probe_support"] < P["Y_max"]:
            raise ConfigError("probe_support", "must lie in (0, Y_max)")
        _num("lambda", P["lambda"], 0, strict_lo=True)
        _num("lambda_roundtrip", P["lambda_roundtrip"], 0, strict_lo=True)
    elif e == "maxreg":
        _check_cases(P)
        _check_grid(P)
        _int("n_x", P["n_x"], 4)
        _num("T", P["T"], 0, strict_lo=True)
        _int("steps", P["steps"], 2)
    elif e == "oblique-roundtrip":
        Q1 = _list("Q1", P["Q1"])
        N = len(Q1)
        if N not in (1, 2) or any(len(r) != N for r in Q1):
            raise ConfigError("Q1", "must be a 1x1 or 2x2 matrix")
        if len(_list("q", P["q"])) != N or len(_list("b", P["b"])) != N:
            raise ConfigError("q", "q and b must have the dimension of Q1")
        _num("gamma", P["gamma"], 0, strict_lo=True)
        if _num("c", P["c"]) == 0:
            raise ConfigError("c", "oblique vector needs c != 0")
        _check_spd(P["Q1"], P["q"], P["gamma"])
        c_eff = P["c"] / P["gamma"]
        if not c_eff > -1:
            raise ConfigError("c", f"need c/gamma > -1, got {c_eff}")
        check_mp("", P["m"], P["p"], c_eff, "c/gamma")
        _num("lambda", P["lambda"], 0, strict_lo=True)
        for r in _list("refinements", P["refinements"], 2):
            _int("refinements", r[0], 8)
            _int("refinements", r[1], 4)
        _num("period", P["period"], 0, strict_lo=True)
        _check_grid(P)
        _int("n_random_Q", P["n_random_Q"])
    elif e == "sector-sweep":
        check_c("c", P["c"])
        lens = set()
        for a in _list("a_values", P["a_values"]):
            check_a("a_values", a)
            lens.add(len(a))
        if len(lens) != 1:
            raise ConfigError("a_values", "all anisotropy vectors must share one dimension")
        _check_grid(P)
        _int("n_x", P["n_x"], 4)
        _int("n_probes", P["n_probes"])
        _int("max_wave", P["max_wave"], 0)
        if not 0 < P["probe_support"] < P["Y_max"]:
            raise ConfigError("probe_support", "must lie in (0, Y_max)")


def _checks(P, allowed):
    for ch in _list("checks", P["checks"]):
        if ch not in allowed:
            raise ConfigError("checks", f"unknown check {ch!r}; allowed: {', '.join(allowed)}")
