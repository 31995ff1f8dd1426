"""Run configuration: one JSON document drives every CLI subcommand.

Unknown keys are rejected with path-qualified messages, and the single
top-level ``seed`` is the only entropy source; section seeds are derived
from it. ``--set path=value`` overrides are applied before validation.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .datakit import RegionProfile
from .fedsim import FedConfig
from .losses import LossWeights
from .planner import ModelConfig
from .seeding import derive_seed
from .trainer import SslConfig, TrainConfig

PRESETS = ("desk", "paper")


class ConfigError(ValueError):
    """Configuration failed to load or validate."""


@dataclass(frozen=True)
class DataConfig:
    profiles: tuple[RegionProfile, ...]
    n_per_region: int = 1000
    sigma_noise: float = 0.0
    kappa_thresh: float = 0.05

    def __post_init__(self):
        if not self.profiles:
            raise ValueError("at least one region profile is required")
        if self.n_per_region < 1:
            raise ValueError("n_per_region must be positive")
        if self.sigma_noise < 0:
            raise ValueError("sigma_noise must be nonnegative")
        if self.kappa_thresh <= 0:
            raise ValueError("kappa_thresh must be positive")


@dataclass(frozen=True)
class RunConfig:
    seed: int
    model: ModelConfig
    train: TrainConfig
    ssl: SslConfig
    fed: FedConfig
    data: DataConfig
    raw: dict = dataclasses.field(default=None, repr=False, compare=False)

    def fingerprint_bytes(self) -> bytes:
        return json.dumps(self.raw, sort_keys=True).encode("utf-8")


_MODEL_KEYS = {"image_h": int, "image_w": int, "image_ch": int,
               "patch_h": int, "patch_w": int, "channels": int,
               "speed_dim": int, "attn_dim": int, "heads": int,
               "regions": int, "branch_hidden1": int, "branch_hidden2": int}
_LOSS_KEYS = {"lambda_c": float, "lambda_g": float, "lambda_d": float,
              "tau": float}
_TRAIN_KEYS = {"batch_size": int, "iterations": int, "lr0": float,
               "decay": float, "weight_decay": float, "loss": dict}
_SSL_KEYS = {"ensemble_size": int, "variance_threshold": (float, type(None)),
             "ssl_lr0": float, "ssl_iterations": int}
_FED_KEYS = {"rounds": int, "local_iterations": int, "algorithm": str,
             "alpha_dyn": float, "client_weighting": str}
_PROFILE_KEYS = {"name": str, "handedness": str, "turn_on_red_allowed": bool,
                 "speed_limit": float, "turn_radius_mean": float,
                 "turn_radius_std": float, "yield_aggressiveness": float}
_DATA_KEYS = {"profiles": list, "n_per_region": int, "sigma_noise": float,
              "kappa_thresh": float}
_TOP_KEYS = {"seed": int, "model": dict, "train": dict, "ssl": dict,
             "fed": dict, "data": dict}


def _check_keys(doc: dict, schema: dict, path: str) -> None:
    for key, value in doc.items():
        where = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"{where}: unknown key")
        expected = schema[key]
        if expected is float:
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif expected is int:
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(expected, tuple):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool) \
                or value is None
        else:
            ok = isinstance(value, expected)
        if not ok:
            raise ConfigError(
                f"{where}: expected {getattr(expected, '__name__', expected)}, "
                f"got {type(value).__name__}")


def _validate(doc: dict) -> None:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(doc, _TOP_KEYS, "")
    _check_keys(doc.get("model", {}), _MODEL_KEYS, "model")
    train = doc.get("train", {})
    _check_keys(train, _TRAIN_KEYS, "train")
    _check_keys(train.get("loss", {}), _LOSS_KEYS, "train.loss")
    _check_keys(doc.get("ssl", {}), _SSL_KEYS, "ssl")
    _check_keys(doc.get("fed", {}), _FED_KEYS, "fed")
    data = doc.get("data", {})
    _check_keys(data, _DATA_KEYS, "data")
    for i, profile in enumerate(data.get("profiles", [])):
        if not isinstance(profile, dict):
            raise ConfigError(f"data.profiles[{i}]: expected an object")
        _check_keys(profile, _PROFILE_KEYS, f"data.profiles[{i}]")


def _build(doc: dict) -> RunConfig:
    seed = doc.get("seed", 0)
    try:
        model = ModelConfig(**doc.get("model", {}))
        train_doc = dict(doc.get("train", {}))
        loss = LossWeights(**train_doc.pop("loss", {}))
        train = TrainConfig(loss_weights=loss,
                            seed=derive_seed(seed, "train"), **train_doc)
        ssl = SslConfig(**doc.get("ssl", {}))
        fed = FedConfig(seed=derive_seed(seed, "fed"), **doc.get("fed", {}))
        data_doc = dict(doc.get("data", {}))
        profiles = tuple(RegionProfile(**p) for p in data_doc.pop("profiles", []))
        data = DataConfig(profiles=profiles, **data_doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(seed=seed, model=model, train=train, ssl=ssl, fed=fed,
                     data=data, raw=doc)


def _parse_override(expr: str) -> tuple[list[str], object]:
    if "=" not in expr:
        raise ConfigError(f"--set expects path=value, got {expr!r}")
    path, raw_value = expr.split("=", 1)
    keys = [k for k in path.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"--set has an empty key path in {expr!r}")
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    return keys, value


def apply_overrides(doc: dict, overrides) -> dict:
    for expr in overrides or ():
        keys, value = _parse_override(expr)
        target = doc
        for key in keys[:-1]:
            nxt = target.setdefault(key, {})
            if not isinstance(nxt, dict):
                raise ConfigError(
                    f"--set path {'.'.join(keys)!r} crosses a non-object value")
            target = nxt
        target[keys[-1]] = value
    return doc


def preset_path(name: str):
    return resources.files("anyd").joinpath("presets", f"{name}.json")


def load_config(source: str | Path, overrides=None) -> RunConfig:
    """Load a config file or a named preset ('desk', 'paper'), apply
    overrides, validate, and build typed sections."""
    if isinstance(source, str) and source in PRESETS:
        text = preset_path(source).read_text(encoding="utf-8")
    else:
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"config file not found: {source}")
        text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    doc = apply_overrides(doc, overrides)
    _validate(doc)
    return _build(doc)
