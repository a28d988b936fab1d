import json

import pytest

from vwap_forge.config import ENDPOINT_ENV, ConfigError, RunConfig, config_from_dict, load_config, with_overrides
from vwap_forge.market_data import DEFAULT_ENDPOINT


def test_defaults():
    cfg = load_config(None)
    assert cfg == RunConfig()
    assert cfg.features.lookback == 120 and cfg.features.horizon == 12
    assert cfg.train.seeds == (1, 2, 3, 4, 5)
    assert cfg.train.lr_reduce_factor == 0.25 and cfg.train.lr_floor == 2.5e-5
    assert cfg.model.hidden == 100 and cfg.model.tkan.kan_in == 20


def test_round_trip(tmp_path):
    cfg = config_from_dict({"features": {"lookback": 24, "horizon": 6, "rolling_window": 48},
                            "model": {"hidden": 8, "tkan": {"kan_in": 4}},
                            "train": {"seeds": [7, 8], "max_epochs": 3}})
    assert cfg.model.tkan.kan_in == 4 and cfg.model.tkan.kan_out == 20
    assert cfg.train.seeds == (7, 8)
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert load_config(p) == cfg


@pytest.mark.parametrize("bad, match", [
    ({"nope": {}}, "unknown config section"),
    ({"train": {"epochs": 3}}, "unknown key"),
    ({"model": {"tkan": {"grid": 3}}}, "model.tkan"),
    ({"train": {"lr_reduce_factor": 2.0}}, "invalid 'train'"),
    ({"features": []}, "must be an object"),
])
def test_rejects_bad_configs(bad, match):
    with pytest.raises(ConfigError, match=match):
        config_from_dict(bad)


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    p = tmp_path / "bad.json"
    p.write_text("{")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(p)


def test_overrides():
    cfg = with_overrides(RunConfig(), lookback=24, horizon=6, seeds=(3,))
    assert (cfg.features.lookback, cfg.features.horizon) == (24, 6)
    assert cfg.train.seeds == (3,)
    spec = cfg.model.spec("dynamic-tkan", cfg.features)
    assert (spec.lookback, spec.horizon, spec.cell) == (24, 6, "tkan")


def test_endpoint_env_override(monkeypatch):
    monkeypatch.delenv(ENDPOINT_ENV, raising=False)
    assert RunConfig().endpoint() == DEFAULT_ENDPOINT
    monkeypatch.setenv(ENDPOINT_ENV, "http://localhost:9/klines")
    assert RunConfig().endpoint() == "http://localhost:9/klines"
