"""Run configuration: versioned JSON files, schema-validated before any work.

Unknown keys are rejected at every level so typos fail loudly. Sections map
onto the dataclass configs of the corresponding modules.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from .controller import ControllerConfig
from .dataset import DatasetConfig
from .denoiser import DenoiserConfig
from .training import TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


_MODEL_KEY_MAP = {
    "layers": "layers", "heads": "heads", "embed_dim": "embed_dim",
    "dropout": "dropout", "history": "N", "horizon": "H",
    "action_horizon": "H_a", "levels": "K", "emphasis_scale": "emphasis_scale",
    "projection_seed": "projection_seed", "attention": "attention",
    "schedule": "schedule",
}
_CONTROLLER_KEY_MAP = {
    "mode": "mode", "state_rolling": "L_s", "action_rolling": "L_a",
    "max_sweeps": "max_sweeps", "entry_jump": "entry_jump", "renoise": "renoise",
}
_DATASET_KEYS = {f.name for f in dataclasses.fields(DatasetConfig)} | {"path"}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} | {"stop_at_val_ratio"}
_TASK_KEYS = {"name", "episodes", "guided", "mode"}
_SERVE_KEYS = {"port", "scene", "target_v"}
_GUIDANCE_KEYS = {"kind", "weight", "params"}
_TOP_KEYS = {"version", "seed", "out", "dataset", "model", "train",
             "controller", "guidance", "task", "serve"}


def _check_keys(section: dict, allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)} in '{where}' "
                          f"(allowed: {sorted(allowed)})")


def validate(cfg: dict) -> dict:
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be an object")
    _check_keys(cfg, _TOP_KEYS, "top level")
    if cfg.get("version") != CONFIG_VERSION:
        raise ConfigError(f"config must carry version: {CONFIG_VERSION}")
    _check_keys(cfg.get("dataset", {}), _DATASET_KEYS, "dataset")
    _check_keys(cfg.get("model", {}), set(_MODEL_KEY_MAP), "model")
    _check_keys(cfg.get("train", {}), _TRAIN_KEYS, "train")
    _check_keys(cfg.get("controller", {}), set(_CONTROLLER_KEY_MAP), "controller")
    _check_keys(cfg.get("task", {}), _TASK_KEYS, "task")
    _check_keys(cfg.get("serve", {}), _SERVE_KEYS, "serve")
    for i, entry in enumerate(cfg.get("guidance", [])):
        _check_keys(entry, _GUIDANCE_KEYS, f"guidance[{i}]")
        if "kind" not in entry or "weight" not in entry:
            raise ConfigError(f"guidance[{i}] needs 'kind' and 'weight'")
    # constructing the dataclasses performs the value-level validation
    model_config(cfg)
    controller_config(cfg)
    dataset_config(cfg)
    train_config(cfg)
    return cfg


def load(path: str | Path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    return validate(cfg)


def model_config(cfg: dict) -> DenoiserConfig:
    section = cfg.get("model", {})
    return DenoiserConfig(**{_MODEL_KEY_MAP[k]: v for k, v in section.items()})


def controller_config(cfg: dict) -> ControllerConfig:
    section = cfg.get("controller", {})
    return ControllerConfig(**{_CONTROLLER_KEY_MAP[k]: v for k, v in section.items()})


def dataset_config(cfg: dict) -> DatasetConfig:
    section = {k: v for k, v in cfg.get("dataset", {}).items() if k != "path"}
    if "seed" not in section and "seed" in cfg:
        section["seed"] = cfg["seed"]
    return DatasetConfig(**section)


def train_config(cfg: dict) -> TrainConfig:
    section = dict(cfg.get("train", {}))
    if "seed" not in section and "seed" in cfg:
        section["seed"] = cfg["seed"]
    return TrainConfig(**section)


def config_hash(cfg: dict) -> str:
    import hashlib
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()
