"""Experiment configuration: TOML files checked against a committed JSON Schema.

Unknown keys are errors. Missing keys take the values in ``DEFAULTS``, which
describe the narrow-acceptance toy task served by the analytic field.
"""

from __future__ import annotations

import copy
import json
import sys
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import jsonschema

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULTS: dict = {
    "name": "",
    "seed": 0,
    "task": {"patch": 0, "target_shift": [0.0, 0.0, 0.0], "spec": {}},
    "model": {
        "kind": "analytic",
        "sigma_x": 0.5,
        "sigma_z": 0.05,
        "checkpoint": "",
        "n_train": 2000,
        "arch": {"hidden": [64, 64], "time_freqs": 4, "pos_freqs": 2, "embed_dim": 8, "activation": "silu"},
        "train": {"lr": 3e-3, "lr_final": 3e-4, "steps": 1500, "batch": 64, "c_d": 0.2},
    },
    "sampler": {
        "steps": 100,
        "kind_x": "exponential",
        "kind_z": "quadratic",
        "gamma_x": 3.0,
        "eta_x": 1.0,
        "eta_z": 1.0,
        "c_d": 0.0,
        "beta_clamp": 1e3,
        "use_score": True,
    },
    "search": {
        "algorithm": "bon",
        "beam_width": 4,
        "branch_factor": 4,
        "block_steps": 25,
        "inverse_temperature": 10.0,
        "mcts_epsilon": 0.5,
        "mcts_c": 1.0,
        "mcts_simulations": 20,
        "n_samples": 16,
        "refine_iterations": 20,
    },
    "reward": {
        "terms": [{"name": "proxy_ipae", "weight": -1.0, "normalizer": 31.0}],
        "contact_radius": 3.5,
        "ipae_rho": 10.0,
    },
    "success": {"ipae_max": 12.0, "min_contacts": 1, "cluster_threshold": 0.5},
    "output": {"dump_pdb": False},
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


def _schema() -> dict:
    text = resources.files("binderflow.bench").joinpath("config.schema.json").read_text()
    return json.loads(text)


def _merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict) and k != "spec":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(dict(v) if isinstance(v, Mapping) else v)
    return out


def validate(raw: Mapping[str, Any]) -> dict:
    """Schema-check ``raw`` and return it merged over the defaults."""
    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        lines = []
        for e in errors:
            where = ".".join(str(p) for p in e.absolute_path) or "<top level>"
            lines.append(f"{where}: {e.message}")
        raise ConfigError("invalid config\n  " + "\n  ".join(lines))
    cfg = _merge(DEFAULTS, raw)
    if cfg["model"]["kind"] == "mlp" and cfg["sampler"]["c_d"] != cfg["model"]["train"]["c_d"] and "c_d" not in raw.get("sampler", {}):
        cfg["sampler"]["c_d"] = cfg["model"]["train"]["c_d"]
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return validate(raw)


def with_overrides(cfg: dict, **sections) -> dict:
    """Copy of a validated config with ``section={key: value}`` overrides, re-validated."""
    raw = _merge(cfg, sections)
    return validate(raw)
