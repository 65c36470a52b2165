"""Run configuration: a nested JSON file with sections
{model, conversion, gate, train, precision, telemetry}, dotted-path
overrides from the command line, and a canonical content hash used to
name run directories."""

from __future__ import annotations

import copy
import hashlib
import json

from .errors import ConfigError

SECTIONS = ("model", "conversion", "gate", "train", "precision", "telemetry")

DEFAULTS: dict = {
    "model": {"hidden": 64, "inner": 256, "n_layers": 6},
    "conversion": {
        "n_routed": 2,
        "n_shared": 1,
        "shared_init": "micro_noise",
        "noise_sigma": 1e-4,
        "routed_scaling": 1.0,
        "seed": 0,
    },
    "gate": {
        "kind": "linear",
        "top_k": 1,
        "norm_topk_prob": False,
        "alpha": 0.01,
        "aux_kind": "global",
        "gate_hidden": 256,
        "encoder_dim": 64,
        "heads": 2,
    },
    "train": {
        "lr": 2e-4,
        "warmup_steps": 500,
        "total_steps": 2000,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "weight_decay": 0.0,
        "batch_tokens": 512,
        "seq_len": None,
        "freeze": "gate_shared",
        "shared_lr_mult": 1.0,
        "log_interval": 50,
        "seed": 123,
        "data_seed": 0,
        "teacher_gain": 1.3,
        "teacher_layers": 6,
    },
    "precision": {"master_format": "wide32", "compute_format": "wide64"},
    "telemetry": {
        "t_dead": 0.10,
        "t_skew": 0.30,
        "t_health": 0.10,
        "window_intervals": 4,
        "bands": None,
    },
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}.{key}" if path else key
        if key not in out:
            raise ConfigError(f"unknown config field {where!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path=None) -> dict:
    """Defaults, overlaid with the JSON file at `path` if given."""
    cfg = default_config()
    if path is None:
        return cfg
    with open(path) as fh:
        try:
            user = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(user, dict):
        raise ConfigError("config file must hold a JSON object")
    return _merge(cfg, user)


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply `section.field=value` strings; values parse as JSON, falling
    back to a bare string (so --set gate.kind=mlp works unquoted)."""
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form path=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                raise ConfigError(f"unknown config section {dotted!r}")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"unknown config field {dotted!r}")
        node[keys[-1]] = value
    return cfg


def config_hash(cfg: dict, length: int = 8) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:length]
