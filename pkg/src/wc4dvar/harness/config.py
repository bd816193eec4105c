"""Experiment configuration: JSON schema, defaults, scale presets and hashing."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from pathlib import Path

import jsonschema

from ..models import ADConfig, HeatConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


def _model_params(cls) -> dict:
    props = {}
    for f in dataclasses.fields(cls):
        if f.type in ("int",):
            props[f.name] = {"type": "integer"}
        elif f.type in ("float",):
            props[f.name] = {"type": "number"}
        elif f.type in ("bool",):
            props[f.name] = {"type": "boolean"}
        elif f.type in ("str",):
            props[f.name] = {"type": "string"}
        else:
            props[f.name] = {"type": "array"}
    return {"type": "object", "properties": props, "additionalProperties": False}


_seed = {"type": "integer", "minimum": 0, "maximum": 2**64 - 1}
_pos_int = {"type": "integer", "minimum": 1}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["version", "seed", "model"],
    "additionalProperties": False,
    "properties": {
        "version": {"const": SCHEMA_VERSION},
        "seed": _seed,
        "scale": {"enum": ["desk", "paper"]},
        "description": {"type": "string"},
        "model": {
            "type": "object",
            "required": ["name"],
            "additionalProperties": False,
            "properties": {
                "name": {"enum": ["heat1d", "ad2d"]},
                "params": {"type": "object"},
            },
        },
        "estimate_eig": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "variants": {"type": "array", "minItems": 1, "uniqueItems": True,
                             "items": {"enum": ["preconditioned", "unpreconditioned", "saddle_I", "saddle_II"]}},
                "methods": {"type": "array", "minItems": 1, "uniqueItems": True,
                            "items": {"enum": ["slq", "xnystrace"]}},
                "samples": {"type": "array", "minItems": 1, "items": _pos_int},
                "trials": _pos_int,
                "rel_tol": {"type": "number", "exclusiveMinimum": 0},
                "max_iter": {"anyOf": [_pos_int, {"type": "null"}]},
                "exact": {"type": "boolean"},
                "dense_limit": _pos_int,
            },
        },
        "place_sensors": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "k": {"type": "array", "minItems": 1, "items": _pos_int},
                "methods": {"type": "array", "minItems": 1, "uniqueItems": True,
                            "items": {"enum": ["gks", "raf", "greedy", "exhaustive"]}},
                "oversampling": {"type": "integer", "minimum": 0},
                "sketch_rows": {"anyOf": [_pos_int, {"type": "null"}]},
                "svd": {"enum": ["randomized", "lanczos", "dense"]},
                "svd_rank": {"anyOf": [_pos_int, {"type": "null"}]},
                "random_designs": _pos_int,
                "exhaustive_budget": _pos_int,
                "bins": _pos_int,
            },
        },
        "assimilate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "max_iter": {"anyOf": [_pos_int, {"type": "null"}]},
            },
        },
        "gap_study": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "alphas": {"type": "array", "minItems": 1, "items": {"type": "number", "exclusiveMinimum": 0}},
                "k": _pos_int,
                "oversampling": {"type": "integer", "minimum": 0},
            },
        },
    },
}

DEFAULTS = {
    "scale": "desk",
    "estimate_eig": {
        "variants": ["preconditioned", "unpreconditioned", "saddle_I", "saddle_II"],
        "methods": ["slq", "xnystrace"],
        "samples": [8],
        "trials": 1,
        "rel_tol": 1e-10,
        "max_iter": None,
        "exact": True,
        "dense_limit": 12000,
    },
    "place_sensors": {
        "k": [5],
        "methods": ["gks", "raf", "greedy", "exhaustive"],
        "oversampling": 20,
        "sketch_rows": None,
        "svd": "randomized",
        "svd_rank": None,
        "random_designs": 60000,
        "exhaustive_budget": 200000,
        "bins": 40,
    },
    "assimilate": {"tol": 1e-8, "max_iter": None},
    "gap_study": {"alphas": [0.05, 0.03, 0.02, 0.01], "k": 10, "oversampling": 20},
}

# Paper-scale mesh settings (long-running; the desk defaults live in the model dataclasses).
PAPER_SCALE = {"heat1d": {"n_cells": 400}, "ad2d": {"grid": 41}}

MODEL_CLASSES = {"heat1d": HeatConfig, "ad2d": ADConfig}
MODEL_SCHEMAS = {name: _model_params(cls) for name, cls in MODEL_CLASSES.items()}


def validate(raw: dict) -> None:
    try:
        jsonschema.validate(raw, SCHEMA)
        name = raw["model"]["name"]
        jsonschema.validate(raw["model"].get("params", {}), MODEL_SCHEMAS[name])
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None


def resolve(raw: dict, seed: int | None = None, scale: str | None = None) -> dict:
    """Validate, apply CLI overrides and fill defaults."""
    raw = copy.deepcopy(raw)
    if seed is not None:
        raw["seed"] = seed
    if scale is not None:
        raw["scale"] = scale
    validate(raw)
    cfg = copy.deepcopy(DEFAULTS)
    for key, val in raw.items():
        if isinstance(val, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(val)
        else:
            cfg[key] = val
    model = cfg["model"]
    params = dict(PAPER_SCALE[model["name"]]) if cfg["scale"] == "paper" else {}
    params.update(model.get("params", {}))
    model["params"] = params
    return cfg


def load_config(path: str | Path, seed: int | None = None, scale: str | None = None) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return resolve(raw, seed, scale)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


def model_config(cfg: dict):
    name = cfg["model"]["name"]
    params = dict(cfg["model"]["params"])
    for key in ("sensor_range", "blob_centers"):
        if key in params:
            params[key] = tuple(tuple(v) if isinstance(v, list) else v for v in params[key])
    return MODEL_CLASSES[name](**params)
