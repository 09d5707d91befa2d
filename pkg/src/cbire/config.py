"""Run-config loading, validation and hashing."""

from __future__ import annotations

import hashlib
import json
import math
import re
from importlib import resources
from pathlib import Path

import jsonschema
import yaml

from .errors import CBIREError


class ConfigError(CBIREError, ValueError):
    """Malformed run config; ``path`` locates the offending key."""

    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{path}: {message}")
        self.path = path


# YAML 1.1 misses exponent floats without a dot ("1e-3"); widen the resolver.
class _Loader(yaml.SafeLoader):
    pass


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                    |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
                    |[-+]?\.(?:inf|Inf|INF)
                    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_INT = {"type": "integer"}
_NUMS = {"type": "array", "items": _NUM}

_MEASURE_PROPS = {
    "family": {"enum": ["zero", "exponential", "power_law_cutoff", "beta", "atoms", "sum",
                        "two_sided"]},
    "c": _NONNEG, "beta": _NONNEG, "a": _NUM, "b": _NUM, "lo": _NONNEG, "hi": _NUM,
    "atoms": {"type": "array", "items": {"type": "array", "items": _NUM,
                                         "minItems": 2, "maxItems": 2}},
    "terms": {"type": "array", "items": {"$ref": "#/$defs/measure"}},
    "positive": {"$ref": "#/$defs/measure"},
    "negative": {"$ref": "#/$defs/measure"},
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["model"],
    "$defs": {
        "measure": {"type": "object", "additionalProperties": False, "required": ["family"],
                    "properties": _MEASURE_PROPS},
        "function": {
            "type": "object", "additionalProperties": False, "required": ["form"],
            "properties": {
                "form": {"enum": ["constant", "affine", "polynomial", "power",
                                  "piecewise_linear"]},
                "value": _NUM, "a0": _NUM, "a1": _NUM, "coeffs": _NUMS, "coef": _NUM,
                "exponent": _NUM, "knots": _NUMS, "values": _NUMS,
                "lipschitz": _NONNEG, "inf": _NONNEG,
            },
        },
        "catastrophe": {"type": "object", "additionalProperties": False,
                        "properties": dict(_MEASURE_PROPS, density={"$ref": "#/$defs/measure"})},
    },
    "properties": {
        "model": {
            "type": "object", "additionalProperties": False, "required": ["alpha", "b"],
            "properties": {
                "name": {"type": "string"},
                "alpha": _NONNEG, "b": _NUM, "sigma": _NONNEG, "beta0": _NUM, "beta1": _NONNEG,
                "mu": {"$ref": "#/$defs/measure"}, "nu": {"$ref": "#/$defs/measure"},
                "r": {"$ref": "#/$defs/function"}, "g": {"$ref": "#/$defs/function"},
                "q": {"$ref": "#/$defs/catastrophe"},
            },
        },
        "quadrature": {"type": "object", "additionalProperties": False,
                       "properties": {"abs_tol": _POS, "rel_tol": _POS, "max_panels": _INT}},
        "sim": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "dt": _POS, "t_end": _NONNEG, "eps_mu": _POS, "eps_nu": _POS, "seed": _INT,
                "negative_fixup": {"enum": ["clamp", "reject-step"]},
                "overflow_guard": _POS, "substep_jump_cap": _INT, "small_jump_topup": {"type": "boolean"},
                "block_size": _INT, "workers": _INT, "match_tol": _POS,
                "x0": _NONNEG, "y0": _NONNEG, "n_paths": _INT, "record_times": _NUMS,
                "burn_in": _NONNEG, "starts": _NUMS, "bins": _INT,
            },
        },
        "certify": {
            "type": "object", "additionalProperties": False,
            "properties": {"theta_v": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                           "K": _POS, "c0": _POS, "x0": _POS, "n_grid": _INT,
                           "rebalance": {"type": "boolean"}},
        },
        "output": {"type": "object", "additionalProperties": False,
                   "properties": {"dir": {"type": "string"}, "prefix": {"type": "string"}}},
    },
}

_VALIDATOR = jsonschema.Draft202012Validator(SCHEMA)


def _reject_nonfinite(obj, path="$"):
    if isinstance(obj, float) and not math.isfinite(obj):
        raise ConfigError("NaN and infinite values are not allowed", path)
    if isinstance(obj, dict):
        for k, v in obj.items():
            _reject_nonfinite(v, f"{path}.{k}")
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            _reject_nonfinite(v, f"{path}[{i}]")


def _json_constant(name):
    raise ConfigError(f"non-finite literal {name} is not allowed")


def parse_text(text: str, fmt: str = "yaml") -> dict:
    try:
        if fmt == "json":
            data = json.loads(text, parse_constant=_json_constant)
        else:
            data = yaml.load(text, Loader=_Loader)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    return data


def validate(cfg: dict) -> dict:
    """Schema-check ``cfg`` and reject non-finite numbers.

    Raises
    ------
    ConfigError
        With the JSON path of the first offending key.
    """
    _reject_nonfinite(cfg)
    errors = sorted(_VALIDATOR.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path)
        raise ConfigError(err.message, path)
    return cfg


def shipped_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("cbire").joinpath("data").iterdir()
                  if p.name.endswith(".yaml"))


def load_config(source: str | Path) -> dict:
    """Load a YAML or JSON run config, or a shipped example by name."""
    path = Path(source)
    if path.exists():
        text = path.read_text()
        fmt = "json" if path.suffix.lower() == ".json" else "yaml"
    elif str(source) in shipped_names():
        text = resources.files("cbire").joinpath("data").joinpath(f"{source}.yaml").read_text()
        fmt = "yaml"
    else:
        raise ConfigError(f"config {source!r} not found")
    return validate(parse_text(text, fmt))


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical JSON form of the whole config."""
    return hashlib.sha256(canonical(cfg).encode()).hexdigest()


def certificate_key(cfg: dict) -> str:
    """Hash of the parts a certificate depends on (model, quadrature, certify)."""
    part = {k: cfg.get(k) for k in ("model", "quadrature", "certify")}
    return hashlib.sha256(canonical(part).encode()).hexdigest()
