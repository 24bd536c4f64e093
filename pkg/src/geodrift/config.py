"""Run configuration: JSON schema, defaults and conversion to module configs."""

from __future__ import annotations

import copy
import json

import jsonschema

from .em import EMConfig
from .sde import SYSTEMS, SimConfig

SCHEMA_VERSION = 1

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "geodrift run configuration",
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "system", "simulation", "observation"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "mode": {"enum": ["em", "baseline"]},
        "seed": {"type": "integer", "minimum": 0},
        "system": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {
                "name": {"enum": [s for s in SYSTEMS if s != "custom"]},
                "params": {"type": "object"},
            },
        },
        "simulation": {
            "type": "object",
            "additionalProperties": False,
            "required": ["dt", "T", "sigma", "x0"],
            "properties": {
                "dt": _POS,
                "T": _POS,
                "sigma": {"type": "number", "minimum": 0},
                "x0": {"type": "array", "items": _NUM, "minItems": 1},
            },
        },
        "observation": {
            "type": "object",
            "additionalProperties": False,
            "required": ["stride"],
            "properties": {
                "stride": {"type": "integer", "minimum": 1},
                "file": {"type": "string"},
            },
        },
        "em": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "iterations": {"type": "integer", "minimum": 1},
                "sigma": {"oneOf": [_POS, {"type": "null"}]},
                "beta": {"type": "number", "minimum": 0},
                "n_particles": {"type": "integer", "minimum": 10},
                "eps_init": _POS,
                "n_inducing_score": {"type": "integer", "minimum": 2},
                "score_lambda": _POS,
                "sigma_M": {"oneOf": [_POS, {"type": "null"}]},
                "metric_epsilon": _POS,
                "n_inducing_gp": {"type": "integer", "minimum": 1},
                "kernel_policy": {"enum": ["median", "marginal_likelihood"]},
                "batch_size": {"type": "integer", "minimum": 1},
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "grid_n": {"type": "integer", "minimum": 2},
                "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
            },
        },
    },
}

DEFAULTS = {
    "mode": "em",
    "seed": 0,
    "em": {"iterations": 2, "sigma": None, "beta": 0.5, "n_particles": 100, "eps_init": 1e-3,
           "n_inducing_score": 40, "score_lambda": 1e-3, "sigma_M": None, "metric_epsilon": 1e-4,
           "n_inducing_gp": 300, "kernel_policy": "median", "batch_size": 512},
    "eval": {"grid_n": 50, "seeds": [0]},
}


class ConfigError(ValueError):
    pass


def validate(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as err:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {err.message}") from None


def resolve(cfg: dict) -> dict:
    """Validate and fill defaults; returns a new, fully explicit config."""
    validate(cfg)
    out = copy.deepcopy(cfg)
    out.setdefault("mode", DEFAULTS["mode"])
    out.setdefault("seed", DEFAULTS["seed"])
    out.setdefault("name", "run")
    for sect in ("em", "eval"):
        merged = copy.deepcopy(DEFAULTS[sect])
        merged.update(out.get(sect, {}))
        out[sect] = merged
    out["system"].setdefault("params", {})
    if out["em"]["sigma"] is None and out["simulation"]["sigma"] > 0:
        out["em"]["sigma"] = out["simulation"]["sigma"]
    if len(out["simulation"]["x0"]) != 2 and out["system"]["name"] in ("vdp", "hopf", "selkov", "outofeq"):
        raise ConfigError("x0 must be two-dimensional for this system")
    validate(out)
    return out


def load(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as err:
        raise ConfigError(f"malformed JSON in {path}: {err}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return resolve(raw)


def sim_config(cfg: dict, seed=None) -> SimConfig:
    s = cfg["simulation"]
    return SimConfig(dt=s["dt"], T=s["T"], sigma=s["sigma"], x0=tuple(s["x0"]),
                     seed=cfg["seed"] if seed is None else seed)


def em_config(cfg: dict, seed=None) -> EMConfig:
    e = cfg["em"]
    if not e["sigma"] or e["sigma"] <= 0:
        raise ConfigError("inference needs a positive augmentation sigma")
    return EMConfig(
        sigma=e["sigma"], iterations=e["iterations"], n_particles=e["n_particles"], beta=e["beta"],
        eps_init=e["eps_init"], n_inducing_score=e["n_inducing_score"], score_lambda=e["score_lambda"],
        sigma_M=e["sigma_M"], metric_epsilon=e["metric_epsilon"], n_inducing_gp=e["n_inducing_gp"],
        kernel_policy=e["kernel_policy"], seed=cfg["seed"] if seed is None else seed,
        batch_size=e["batch_size"], sim_sigma=cfg["simulation"]["sigma"])
