"""Experiment configuration: TOML (or JSON) files validated against a schema."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema
import numpy as np
import tomli
import tomli_w


class ConfigError(ValueError):
    pass


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}
_numlist = {"type": "array", "items": _num}

_event = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["endpoint_ball", "endpoint_halfspace", "whole_space"]},
        "z": {"oneOf": [_num, _numlist]},
        "delta": _pos,
        "direction": {"oneOf": [_num, _numlist]},
        "level": _num,
    },
    "additionalProperties": False,
}

_control = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["zero", "constant", "sine"]},
        "value": {"oneOf": [_num, _numlist]},
        "amplitude": _num,
        "frequency": _num,
        "direction": {"type": "integer", "minimum": 0},
    },
    "additionalProperties": False,
}

SCHEMA = {
    "type": "object",
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "model": {
            "type": "object",
            "properties": {"name": {"enum": ["ou", "linear_sde", "heat1d", "allen_cahn", "ns2d"]}},
            "required": ["name"],
        },
        "grid": {"type": "object", "properties": {"T": _pos, "steps": _posint}, "additionalProperties": False},
        "initial": {
            "type": "object",
            "properties": {"x": {"oneOf": [_num, _numlist]}, "mode": {"type": "integer", "minimum": 0},
                           "amplitude": _num},
            "additionalProperties": False,
        },
        "control": _control,
        "check": {"type": "object", "properties": {"n_samples": _posint}, "additionalProperties": False},
        "skeleton": {"type": "object", "properties": {"tol": _pos}, "additionalProperties": False},
        "simulate": {
            "type": "object",
            "properties": {"eps": {"type": "number", "minimum": 0}, "n_paths": _posint, "gammas": _numlist,
                           "ito_levels": {"type": "integer", "minimum": 2}, "write_paths": {"type": "boolean"},
                           "controlled": {"type": "boolean"}},
            "additionalProperties": False,
        },
        "rate": {
            "type": "object",
            "properties": {"event": _event, "penalty0": _pos, "stages": _posint, "tol": _pos,
                           "maxiter": _posint, "restarts": {"type": "integer", "minimum": 0}},
            "additionalProperties": False,
        },
        "ldp": {
            "type": "object",
            "properties": {"eps_list": _numlist, "n_paths": _posint, "event": _event,
                           "lln": {"type": "boolean"}, "continuity": {"type": "boolean"},
                           "deltas": _numlist},
            "additionalProperties": False,
        },
        "convergence": {
            "type": "object",
            "properties": {"steps": {"type": "array", "items": _posint},
                           "m": {"type": "array", "items": _posint},
                           "noise_modes": {"type": "array", "items": _posint},
                           "eps": _pos, "n_paths": _posint},
            "additionalProperties": False,
        },
    },
    "required": ["model"],
    "additionalProperties": False,
}

DEFAULTS = {
    "seed": 0,
    "grid": {"T": 1.0, "steps": 200},
    "initial": {"mode": 0, "amplitude": 1.0},
    "control": {"kind": "zero"},
    "check": {"n_samples": 10000},
    "skeleton": {"tol": 1e-10},
    "simulate": {"eps": 0.1, "n_paths": 1000, "gammas": [2.0, 4.0, 8.0], "ito_levels": 3,
                 "write_paths": False, "controlled": False},
    "rate": {"penalty0": 10.0, "stages": 4, "tol": 1e-3, "maxiter": 2000, "restarts": 0},
    "ldp": {"eps_list": [0.2, 0.1, 0.05], "n_paths": 10000, "lln": True, "continuity": False,
            "deltas": [0.1, 0.05]},
    "convergence": {"steps": [50, 100, 200, 400], "eps": 0.1, "n_paths": 1000},
}


def loads(text: str, fmt: str = "toml") -> dict:
    try:
        return json.loads(text) if fmt == "json" else tomli.loads(text)
    except (tomli.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse {fmt} config: {exc}") from exc


def dumps(cfg: dict, fmt: str = "toml") -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) if fmt == "json" else tomli_w.dumps(cfg)


def load(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return loads(path.read_text(), "json" if path.suffix == ".json" else "toml")


def _parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as TOML literals when possible."""
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key, value = item.split("=", 1)
        parts = key.lstrip("-").split(".")
        node = cfg
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-table")
        node[parts[-1]] = _parse_value(value)
    return cfg


def validate(cfg: dict) -> dict:
    """Check ``cfg`` against the schema and fill defaults."""
    v = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(v.iter_errors(cfg), key=lambda e: list(e.path))
    if errors:
        msgs = [f"{'.'.join(str(p) for p in e.path) or '<root>'}: {e.message}" for e in errors]
        raise ConfigError("invalid config:\n  " + "\n  ".join(msgs))
    out = copy.deepcopy(DEFAULTS)
    for k, val in cfg.items():
        if isinstance(val, dict) and isinstance(out.get(k), dict):
            out[k].update(val)
        else:
            out[k] = copy.deepcopy(val)
    return out


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def model_params(cfg: dict) -> dict:
    return {k: v for k, v in cfg["model"].items() if k != "name"}


def initial_state(cfg: dict, dim: int) -> np.ndarray:
    ini = cfg["initial"]
    if "x" in ini:
        x = np.asarray(ini["x"], dtype=float)
        if x.ndim == 0:
            return np.full(dim, float(x))
        if x.shape != (dim,):
            raise ConfigError(f"initial.x has length {x.size}, model dimension is {dim}")
        return x
    mode = ini.get("mode", 0)
    if mode >= dim:
        raise ConfigError(f"initial.mode = {mode} exceeds the model dimension {dim}")
    x = np.zeros(dim)
    x[mode] = ini.get("amplitude", 1.0)
    return x
