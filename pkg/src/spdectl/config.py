"""Experiment configuration: a TOML document with fixed sections.

Every key has a type and a default; unknown keys are rejected.  A parsed
config is a plain nested dict with all defaults filled in, and
:func:`serialize` writes it back so that ``parse(serialize(cfg)) == cfg``.
Keys whose default is ``None`` are omitted from the serialized text,
since TOML has no null.
"""

from __future__ import annotations

import copy
import math
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from .errors import ConfigError

FLOAT = "float"
INT = "int"
BOOL = "bool"
STR = "str"
FLIST = "float-list"
ILIST = "int-list"

# section -> key -> (type, default)
SCHEMA: dict[str, dict[str, tuple[str, Any]]] = {
    "space": {
        "L": (FLOAT, 1.0),
        "m": (INT, 8),
        "alpha": (FLOAT, 2.0),
        "quad_order": (INT, None),
    },
    "operator": {
        "name": (STR, "heat"),
        "nu": (FLOAT, 1.0),
        "b": (FLOAT, 0.0),
        "sigma": (FLOAT, 0.0),
        "noise": (STR, "additive"),
        "beta": (FLOAT, None),
        "rho_c": (FLOAT, 0.0),
        "eta_c": (FLOAT, 0.0),
        "f_B": (FLOAT, None),
    },
    "initial": {
        "x0": (FLIST, [1.0]),
    },
    "control": {
        "kind": (STR, "zero"),
        "gain": (STR, "full"),
        "n_knots": (INT, 0),
        "kappa": (FLOAT, math.inf),
        "theta": (FLIST, None),
        "theta_file": (STR, None),
    },
    "sim": {
        "T": (FLOAT, 0.1),
        "n_steps": (INT, 1000),
        "k_noise": (INT, 1),
        "scheme": (STR, "em"),
        "taming_power": (FLOAT, 1.0),
        "stop_N_H": (FLOAT, None),
        "stop_N_V": (FLOAT, None),
        "hard_stop": (BOOL, False),
        "divergence_cap": (FLOAT, 0.01),
        "chunk_size": (INT, 256),
    },
    "cost": {
        "f_mode": (STR, "tracking"),
        "q": (FLOAT, 0.0),
        "r": (FLOAT, 0.0),
        "q_T": (FLOAT, 0.0),
        "x_ref": (FLIST, None),
        "x_T": (FLIST, None),
        "cap": (FLOAT, math.inf),
        "joint": (BOOL, False),
        "s": (FLOAT, 0.0),
        "exit_level": (FLOAT, None),
    },
    "run": {
        "n_paths": (INT, 1000),
        "n_record": (INT, 1),
        "record_every": (INT, 10),
        "n_samples": (INT, 500),
        "r_max": (FLOAT, 10.0),
        "p": (FLIST, [2.0]),
        "delta": (FLIST, []),
        "m_list": (ILIST, []),
        "C_p": (FLOAT, None),
        "pair_scale": (FLOAT, None),
        "method": (STR, "nelder-mead"),
        "budget": (INT, 50),
        "opt_seed": (INT, 0),
        "step": (FLOAT, 0.5),
        "n_seq": (INT, 8),
        "n_probe": (INT, 256),
    },
}
TOP: dict[str, tuple[str, Any]] = {
    "seed": (INT, 0),
    "output_dir": (STR, "out"),
}

CHOICES = {
    ("operator", "name"): ("heat", "sign_flipped_heat", "step", "convection_diffusion",
                           "p_laplace"),
    ("operator", "noise"): ("additive", "multiplicative"),
    ("control", "kind"): ("zero", "feedback"),
    ("control", "gain"): ("scalar", "diagonal", "full"),
    ("sim", "scheme"): ("em", "tamed"),
    ("cost", "f_mode"): ("tracking", "vpenalty"),
    ("run", "method"): ("nelder-mead", "random-search", "spsa"),
}


def _coerce(where: str, kind: str, value):
    bad = ConfigError(f"{where}: expected {kind}, got {value!r}")
    if kind == FLOAT:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad
        return float(value)
    if kind == INT:
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad
        return value
    if kind == BOOL:
        if not isinstance(value, bool):
            raise bad
        return value
    if kind == STR:
        if not isinstance(value, str):
            raise bad
        return value
    if not isinstance(value, list):
        raise bad
    inner = FLOAT if kind == FLIST else INT
    return [_coerce(where, inner, v) for v in value]


def defaults() -> dict:
    cfg = {k: copy.deepcopy(d) for k, (_, d) in TOP.items()}
    for sec, keys in SCHEMA.items():
        cfg[sec] = {k: copy.deepcopy(d) for k, (_, d) in keys.items()}
    return cfg


def _merge(cfg: dict, doc: dict) -> dict:
    for key, value in doc.items():
        if key in TOP:
            cfg[key] = _coerce(key, TOP[key][0], value)
        elif key in SCHEMA:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            for k, v in value.items():
                if k not in SCHEMA[key]:
                    raise ConfigError(f"unknown key '{key}.{k}'")
                cfg[key][k] = _coerce(f"{key}.{k}", SCHEMA[key][k][0], v)
        else:
            raise ConfigError(f"unknown key or section '{key}'")
    return cfg


def _require(cond, key, msg):
    if not cond:
        raise ConfigError(f"{key}: {msg}")


def validate(cfg: dict) -> dict:
    """Check the constraints that the library would otherwise raise later."""
    for (sec, key), allowed in CHOICES.items():
        _require(cfg[sec][key] in allowed, f"{sec}.{key}",
                 f"must be one of {', '.join(allowed)}; got {cfg[sec][key]!r}")
    sp, op, sim, cost, run = (cfg[s] for s in ("space", "operator", "sim", "cost", "run"))
    _require(0 <= cfg["seed"] < 2**64, "seed", "must fit in 64 unsigned bits")
    _require(sp["L"] > 0, "space.L", "must be positive")
    _require(sp["m"] >= 1, "space.m", "must be at least 1")
    _require(sp["alpha"] > 1, "space.alpha", "alpha must exceed 1")
    if sp["quad_order"] is not None:
        _require(sp["quad_order"] >= 4 * sp["m"], "space.quad_order", "must be at least 4*m")
    if op["beta"] is not None:
        _require(op["beta"] > 1, "operator.beta", "beta must exceed 1")
    _require(op["nu"] > 0, "operator.nu", "must be positive")
    _require(op["sigma"] >= 0, "operator.sigma", "must be nonnegative")
    if op["name"] in ("heat", "sign_flipped_heat", "convection_diffusion"):
        _require(sp["alpha"] == 2.0, "space.alpha", f"operator '{op['name']}' needs alpha = 2")
    for k in ("rho_c", "eta_c"):
        _require(op[k] >= 0, f"operator.{k}", "must be nonnegative")
    _require(len(cfg["initial"]["x0"]) <= sp["m"], "initial.x0", "has more entries than space.m")
    ctl = cfg["control"]
    _require(ctl["n_knots"] >= 0, "control.n_knots", "must be nonnegative")
    _require(ctl["kappa"] > 0, "control.kappa", "must be positive")
    _require(sim["T"] > 0, "sim.T", "must be positive")
    _require(sim["n_steps"] >= 1, "sim.n_steps", "must be at least 1")
    _require(0 <= sim["k_noise"] <= sp["m"], "sim.k_noise", "must lie in 0..space.m (0: all modes)")
    _require(0 <= sim["divergence_cap"] <= 1, "sim.divergence_cap", "must lie in [0, 1]")
    _require(sim["chunk_size"] >= 1, "sim.chunk_size", "must be positive")
    _require(sim["taming_power"] > 0, "sim.taming_power", "must be positive")
    for k in ("q", "r", "q_T"):
        _require(cost[k] >= 0 and math.isfinite(cost[k]), f"cost.{k}", "must be finite and >= 0")
    _require(cost["cap"] > 0, "cost.cap", "must be positive")
    if cost["joint"]:
        _require(abs(cost["s"]) <= 2 * math.sqrt(cost["q"] * cost["r"]), "cost.s",
                 "needs |s| <= 2 sqrt(q r) to keep the running cost nonnegative")
    for k in ("x_ref", "x_T"):
        if cost[k] is not None:
            _require(len(cost[k]) <= sp["m"], f"cost.{k}", "has more entries than space.m")
    for k in ("n_paths", "n_record", "record_every", "n_samples", "budget", "n_seq", "n_probe"):
        _require(run[k] >= 1, f"run.{k}", "must be at least 1")
    _require(run["n_record"] <= run["n_paths"], "run.n_record", "cannot exceed run.n_paths")
    _require(all(p >= 2 for p in run["p"]), "run.p", "moment orders must be at least 2")
    dt = sim["T"] / sim["n_steps"]
    for d in run["delta"]:
        s = d / dt
        _require(0 < d < sim["T"] and abs(s - round(s)) <= 1e-9 * max(1.0, s), "run.delta",
                 f"{d} is not a positive multiple of dt = {dt} below T")
    _require(all(m >= 1 for m in run["m_list"]), "run.m_list", "entries must be positive")
    return cfg


def parse_config(text: str, overrides: list[str] | None = None) -> dict:
    """Parse, apply ``section.key=value`` overrides, fill defaults, validate."""
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"syntax error at line {e.lineno}, column {e.colno}: {e.msg}") from None
    cfg = _merge(defaults(), doc)
    for item in overrides or []:
        _merge(cfg, parse_override(item))
    return validate(cfg)


def parse_override(item: str) -> dict:
    """``section.key=value`` as a nested dict; the value is read as TOML,
    falling back to a bare string."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    path, raw = item.split("=", 1)
    parts = path.strip().split(".")
    try:
        value = tomli.loads(f"v = {raw.strip()}")["v"]
    except tomli.TOMLDecodeError:
        value = raw.strip()
    if len(parts) == 1:
        return {parts[0]: value}
    if len(parts) == 2:
        return {parts[0]: {parts[1]: value}}
    raise ConfigError(f"override key {path!r} must be 'key' or 'section.key'")


def load_config(path, overrides: list[str] | None = None) -> dict:
    """Read and parse a config file; OSError propagates to the caller."""
    return parse_config(Path(path).read_text(), overrides)


def _strip_none(d):
    if isinstance(d, dict):
        return {k: _strip_none(v) for k, v in d.items() if v is not None}
    return d


def serialize(cfg: dict) -> str:
    """TOML text of a resolved config (top-level keys first)."""
    top = {k: cfg[k] for k in TOP}
    body = {s: cfg[s] for s in SCHEMA}
    return tomli_w.dumps(_strip_none({**top, **body}))
