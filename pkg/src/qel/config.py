"""Experiment configuration: JSON schema, validation and polytope construction."""
from dataclasses import dataclass, field
import hashlib
import json

import jsonschema
import numpy as np

from .toric import DelzantPolytope, PolytopeError, bump_perturbation, perturbation_array

SCHEMA_VERSION = 1

_number_or_fraction = {"oneOf": [{"type": "number"}, {"type": "string", "pattern": r"^-?\d+(/\d+)?$"}]}
_direction = {"type": "array", "items": _number_or_fraction, "minItems": 1, "maxItems": 2}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["facets", "k"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "facets": {
            "type": "array",
            "minItems": 2,
            "items": {"type": "array", "minItems": 2, "maxItems": 3,
                      "items": _number_or_fraction},
        },
        "k": {"oneOf": [
            {"type": "integer", "minimum": 1},
            {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
            {"type": "object", "additionalProperties": False, "required": ["min", "max"],
             "properties": {"min": {"type": "integer", "minimum": 1},
                            "max": {"type": "integer", "minimum": 1}}},
        ]},
        "perturbation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "monomials": {"type": "object",
                              "patternProperties": {r"^\d+(,\d+)?$": {"type": "number"}},
                              "additionalProperties": False},
                "bump": {"type": "number"},
            },
        },
        "mode": {"enum": ["plain", "fixed-A", "self-consistent-A"]},
        "generator": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "direction": _direction,
                "scale": {"type": "number"},
                "diagonal": {"type": "array", "items": {"type": "number"}},
            },
        },
        "directions": {"type": "array", "items": _direction},
        "shift": {"type": "number"},
        "subtorus": {"type": "array", "items": _direction},
        "tolerances": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "residual": {"type": "number", "exclusiveMinimum": 0},
                "certificate": {"type": "number", "exclusiveMinimum": 0},
                "outer": {"type": "number", "exclusiveMinimum": 0},
                "compare": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "max_iter": {"type": "integer", "minimum": 1},
        "quadrature": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"order": {"type": "integer", "minimum": 4, "maximum": 512},
                           "angles": {"type": "integer", "minimum": 1}},
        },
        "seed": {"type": "integer", "minimum": 0},
        "starts": {"type": "integer", "minimum": 1},
        "method": {"enum": ["descend", "t-operator"]},
        "figures": {"type": "boolean"},
        "compare": {
            "type": "object",
            "additionalProperties": False,
            "required": ["a", "b"],
            "properties": {"a": {"type": "string"}, "b": {"type": "string"}},
        },
        "out": {"type": "string"},
    },
}


class ConfigError(ValueError):
    """Invalid configuration (CLI exit code 2)."""


@dataclass
class ExperimentConfig:
    raw: dict
    polytope: DelzantPolytope
    levels: list
    perturbation: object = None
    mode: str = "plain"
    tolerances: dict = field(default_factory=dict)
    quadrature_order: int = 64
    angles: int = None
    seed: int = 0
    starts: int = 1

    @property
    def hash(self):
        return config_hash(self.raw)

    def get(self, key, default=None):
        return self.raw.get(key, default)


def config_hash(raw):
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _levels(spec):
    if isinstance(spec, int):
        return [spec]
    if isinstance(spec, dict):
        if spec["max"] < spec["min"]:
            raise ConfigError("k.max must be at least k.min")
        return list(range(spec["min"], spec["max"] + 1))
    return sorted(set(spec))


def _perturbation(spec, dim):
    if not spec:
        return None
    if "bump" in spec:
        if dim != 1:
            raise ConfigError("bump perturbation is only defined on an interval")
        arr = bump_perturbation(spec["bump"])
        extra = spec.get("monomials")
        if extra:
            other = perturbation_array(extra, 1)
            size = max(len(arr), len(other))
            arr = _pad(arr, size) + _pad(other, size)
        return arr
    return spec.get("monomials")


def _pad(a, size):
    return np.concatenate([a, np.zeros(size - len(a))])


def validate(raw):
    """Validate a config mapping and build an :class:`ExperimentConfig`."""
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None
    dims = {len(f) - 1 for f in raw["facets"]}
    if len(dims) != 1:
        raise ConfigError("facets mix dimensions")
    try:
        polytope = DelzantPolytope.from_facets(raw["facets"], name=raw.get("name", ""))
    except (PolytopeError, ValueError, TypeError) as exc:
        raise ConfigError(f"invalid polytope: {exc}") from None
    quad = raw.get("quadrature", {})
    return ExperimentConfig(
        raw=raw,
        polytope=polytope,
        levels=_levels(raw["k"]),
        perturbation=_perturbation(raw.get("perturbation"), polytope.dim),
        mode=raw.get("mode", "plain"),
        tolerances=dict(raw.get("tolerances", {})),
        quadrature_order=quad.get("order", 64),
        angles=quad.get("angles"),
        seed=raw.get("seed", 0),
        starts=raw.get("starts", 1),
    )


def load(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return validate(raw)
