"""Run configuration: defaults, JSON schemas and layered loading.

Values are merged in the order defaults < config file < environment
(``SEPCROSS_<KEY>``, JSON-decoded when possible) < command-line flags.
"""
from __future__ import annotations

import copy
import json
import os

import jsonschema

from .errors import ConfigError
from .model import PRESETS

ENV_PREFIX = "SEPCROSS_"
SUBCOMMANDS = ("geometry", "theta", "averaged", "simulate", "ensemble", "sweep")

# Central defaults table. Keys absent from a subcommand's schema are dropped.
DEFAULTS = {
    "common": {
        "preset": "dw-slow",
        "params": {},
        "seed": 0,
        "threads": 1,
        "out": "sepcross-out",
        "rtol": 1e-10,        # perturbed integrator relative tolerance
        "atol": 1e-12,        # perturbed integrator absolute tolerance
        "kappa_plus": 20.0,   # band entry at h = kappa_plus * eps
        "kappa_minus": 20.0,  # band exit at h = -kappa_minus * eps
        "h_switch": 1e-6,     # relative level below which the averaged rate uses the log law
        "h_min": 1e-10,       # smallest |h| for closed-orbit integrals
    },
    "geometry": {"z": None, "levels": [0.05, -0.05], "polyline_step": 0.05},
    "theta": {"z": None},
    "averaged": {"h0": None, "z0": None, "base_point": None, "nu0": None, "tau_max": 2.0,
                 "eps": None,
                 "h_near": 1e-2, "estimate_error": True},
    "simulate": {"initial": None, "eps": 1e-3, "t_span": 1000.0, "h_stop": None,
                 "post_time": 0.0, "margin_factor": 5.0},
    "ensemble": {"base_point": None, "delta": 0.05, "eps": 1e-3, "N": 100, "t_span": 2.0,
                 "errors": False, "post_tau": 0.2, "margin_factor": 5.0},
    "sweep": {"base_point": None, "delta": 0.1, "eps": [8e-3, 4e-3, 2e-3, 1e-3], "N": 20,
              "t_span": 2.0, "post_tau": 0.2, "margin_factor": 5.0},
}

_POS = {"type": "number", "exclusiveMinimum": 0}
_NUM = {"type": "number"}
_ZVAL = {"type": ["number", "null"]}
_POINT = {
    "oneOf": [
        {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 3},
        {"type": "object", "additionalProperties": False,
         "required": ["I", "phi"],
         "properties": {"I": _POS, "phi": _NUM, "z": _NUM}},
    ]
}

_COMMON = {
    "subcommand": {"enum": list(SUBCOMMANDS)},
    "preset": {"enum": sorted(PRESETS)},
    "params": {"type": "object", "additionalProperties": _NUM},
    "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
    "threads": {"type": "integer", "minimum": 1},
    "out": {"type": "string", "minLength": 1},
    "rtol": _POS,
    "atol": _POS,
    "kappa_plus": _POS,
    "kappa_minus": _POS,
    "h_switch": _POS,
    "h_min": _POS,
}

_SPECIFIC = {
    "geometry": {"z": _ZVAL, "levels": {"type": "array", "items": _NUM},
                 "polyline_step": _POS},
    "theta": {"z": {"oneOf": [_ZVAL, {"type": "array", "items": _NUM, "minItems": 1}]}},
    "averaged": {"h0": {"type": ["number", "null"]}, "z0": _ZVAL,
                 "base_point": {"oneOf": [{"type": "null"}, _POINT]},
                 "nu0": {"enum": [None, 1, 2]}, "tau_max": _POS, "h_near": _POS,
                 "eps": {"oneOf": [{"type": "null"}, _POS]},
                 "estimate_error": {"type": "boolean"}},
    "simulate": {"initial": {"oneOf": [{"type": "null"}, _POINT]}, "eps": _POS,
                 "t_span": _POS, "h_stop": {"type": ["number", "null"]},
                 "post_time": {"type": "number", "minimum": 0}, "margin_factor": _POS},
    "ensemble": {"base_point": {"oneOf": [{"type": "null"}, _POINT]}, "delta": _POS,
                 "eps": {"oneOf": [_POS, {"type": "array", "items": _POS, "minItems": 1}]},
                 "N": {"type": "integer", "minimum": 0}, "t_span": _POS,
                 "errors": {"type": "boolean"}, "post_tau": _POS, "margin_factor": _POS},
}
_SPECIFIC["sweep"] = {k: v for k, v in _SPECIFIC["ensemble"].items() if k != "errors"}
_SPECIFIC["sweep"]["eps"] = {"type": "array", "items": _POS, "minItems": 4}
_SPECIFIC["sweep"]["N"] = {"type": "integer", "minimum": 20}


def schema_for(subcommand: str) -> dict:
    if subcommand not in SUBCOMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    return {"type": "object", "additionalProperties": False,
            "properties": {**_COMMON, **_SPECIFIC[subcommand]}}


def defaults_for(subcommand: str) -> dict:
    return copy.deepcopy({**DEFAULTS["common"], **DEFAULTS[subcommand]})


def _env_overrides(subcommand: str, environ) -> dict:
    out = {}
    for key in schema_for(subcommand)["properties"]:
        raw = environ.get(ENV_PREFIX + key.upper())
        if raw is None:
            continue
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def validate(subcommand: str, cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, schema_for(subcommand))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid configuration at {where}: {exc.message}") from None


def load_config(subcommand: str, path=None, flags: dict | None = None, environ=None) -> dict:
    """Merged, validated configuration for ``subcommand``."""
    environ = os.environ if environ is None else environ
    user = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("the config file must hold a JSON object")
    validate(subcommand, user)
    if user.get("subcommand", subcommand) != subcommand:
        raise ConfigError(f"config is for {user['subcommand']!r}, not {subcommand!r}")
    cfg = defaults_for(subcommand)
    cfg.update(user)
    cfg.update(_env_overrides(subcommand, environ))
    cfg.update({k: v for k, v in (flags or {}).items() if v is not None})
    cfg.pop("subcommand", None)
    validate(subcommand, cfg)
    return cfg
