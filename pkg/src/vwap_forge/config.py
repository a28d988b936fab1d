"""JSON run configuration.

Every section is optional and unknown keys are rejected::

    {
      "features":  {"lookback": 120, "horizon": 12, "rolling_window": 336},
      "model":     {"hidden": 100, "mlp_hidden": 32,
                    "tkan": {"n_sublayers": 2, "kan_in": 20, "kan_out": 20,
                             "grid_size": 5, "spline_order": 3}},
      "train":     {"batch_size": 128, "max_epochs": 1000, "initial_lr": 0.001,
                    "early_stop_patience": 10, "early_stop_min_delta": 1e-5,
                    "lr_reduce_patience": 5, "lr_reduce_factor": 0.25,
                    "lr_floor": 2.5e-5, "seeds": [1, 2, 3, 4, 5], "max_seconds": null},
      "split":     {"test_fraction": 0.2, "validation_fraction_of_remainder": 0.2},
      "synthetic": {"amplitude": 0.5, "noise_sigma": 0.25, ...},
      "data":      {"endpoint": "...", "rate_limit_ms": 250, "symbols": ["BTCUSDT"]}
    }
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .allocation import ModelSpec, TKANConfig
from .features import FeatureConfig
from .market_data import DEFAULT_ENDPOINT, SplitSpec, SyntheticSpec
from .training import TrainConfig

ENDPOINT_ENV = "VWAP_FORGE_ENDPOINT"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSizes:
    hidden: int = 100
    mlp_hidden: int = 32
    tkan: TKANConfig = field(default_factory=TKANConfig)

    def spec(self, name: str, features: FeatureConfig) -> ModelSpec:
        return ModelSpec.from_name(
            name, lookback=features.lookback, horizon=features.horizon,
            hidden=self.hidden, mlp_hidden=self.mlp_hidden, tkan=self.tkan,
        )


@dataclass(frozen=True)
class DataConfig:
    endpoint: str = DEFAULT_ENDPOINT
    rate_limit_ms: int = 250
    symbols: tuple[str, ...] = ("BTCUSDT",)


@dataclass(frozen=True)
class RunConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelSizes = field(default_factory=ModelSizes)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    data: DataConfig = field(default_factory=DataConfig)

    def endpoint(self) -> str:
        return os.environ.get(ENDPOINT_ENV) or self.data.endpoint

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            section = getattr(self, f.name)
            out[f.name] = {k.name: _plain(getattr(section, k.name)) for k in fields(section)}
        return out


def _plain(v):
    if hasattr(v, "__dataclass_fields__"):
        return {f.name: _plain(getattr(v, f.name)) for f in fields(v)}
    if isinstance(v, tuple):
        return list(v)
    return v


def _build(cls, data: dict, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(sorted(unknown))}")
    kw = dict(data)
    if cls is ModelSizes and "tkan" in kw:
        kw["tkan"] = _build(TKANConfig, kw["tkan"], "model.tkan")
    for k in ("seeds", "symbols"):
        if k in kw:
            kw[k] = tuple(kw[k])
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r} section: {exc}") from exc


_SECTIONS = {
    "features": FeatureConfig, "model": ModelSizes, "train": TrainConfig,
    "split": SplitSpec, "synthetic": SyntheticSpec, "data": DataConfig,
}


def config_from_dict(data: dict) -> RunConfig:
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    return RunConfig(**{name: _build(cls, data[name], name) for name, cls in _SECTIONS.items() if name in data})


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    return config_from_dict(data)


def with_overrides(cfg: RunConfig, lookback: int | None = None, horizon: int | None = None,
                   seeds: tuple[int, ...] | None = None) -> RunConfig:
    feats = cfg.features
    if lookback is not None or horizon is not None:
        try:
            feats = replace(feats, lookback=lookback or feats.lookback, horizon=horizon or feats.horizon)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    train = cfg.train if seeds is None else replace(cfg.train, seeds=tuple(seeds))
    return replace(cfg, features=feats, train=train)
