import json

import pytest

from beliefret.config import (
    FULL_SCALE_REFERENCE,
    TrainConfig,
    apply_overrides,
    config_from_dict,
    config_to_dict,
    load_config,
    save_config,
)
from beliefret.errors import ConfigError


def test_round_trip(tmp_path):
    cfg = TrainConfig()
    path = tmp_path / "cfg.json"
    save_config(cfg, path)
    assert load_config(path) == cfg


def test_unknown_keys_rejected():
    data = config_to_dict(TrainConfig())
    data["mystery"] = 1
    with pytest.raises(ConfigError, match="mystery"):
        config_from_dict(data)
    data = config_to_dict(TrainConfig())
    data["optim"]["momentum"] = 0.9
    with pytest.raises(ConfigError, match="momentum"):
        config_from_dict(data)


def test_validation():
    data = config_to_dict(TrainConfig())
    data["stage"] = "stage3"
    with pytest.raises(ConfigError):
        config_from_dict(data)
    data = config_to_dict(TrainConfig())
    data["belief"]["mode"] = "fuzzy"
    with pytest.raises(ConfigError):
        config_from_dict(data)
    data = config_to_dict(TrainConfig())
    data["loss"]["tau"] = -1.0
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_overrides_typed():
    cfg = TrainConfig()
    out = apply_overrides(cfg, ["optim.steps=99", "loss.lambda_cs=0.5", "use_temporal_pae=false", "seed=7"])
    assert out.optim.steps == 99
    assert out.loss.lambda_cs == 0.5
    assert out.use_temporal_pae is False
    assert out.seed == 7
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["optim.warp=1"])
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["optim.steps=many"])
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["use_spatial_pae=perhaps"])
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["loss.tau"])


def test_defaults_match_documented_loss_settings():
    cfg = TrainConfig()
    assert cfg.loss.tau == 0.07
    assert cfg.loss.lambda_cs == 1.0
    assert cfg.model.spatial_units == 2
    assert cfg.model.temporal_units == 3
    # full-scale reference values are documentation only
    assert FULL_SCALE_REFERENCE["embed_dim"] == 512
    assert FULL_SCALE_REFERENCE["heads"] == 8
    assert FULL_SCALE_REFERENCE["dropout_rate"] == 0.2


def test_bad_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(path)
    path.write_text(json.dumps([1, 2]))
    with pytest.raises(ConfigError):
        load_config(path)
