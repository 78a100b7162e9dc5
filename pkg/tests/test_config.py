from __future__ import annotations

import pytest

from adagq.config import ConfigError, ExperimentConfig, apply_overrides, config_from_dict, parse_config


def test_minimal_file_gets_defaults(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("strategy: qsgd\n")
    cfg = parse_config(p)
    assert cfg.strategy == "qsgd"
    assert cfg.n_clients == 20 and cfg.sigma_d == 0.5 and cfg.batch_size == 32
    assert cfg.rate_range_mbps == [5.0, 20.0] and cfg.t_server == 0.05
    assert cfg.controller.s0_bits == 8 and cfg.controller.lambda_g == 1.0
    assert cfg.params() == {"local_epochs": 1, "bits": 8}


def test_sigma_r_below_one_rejected():
    with pytest.raises(ConfigError, match="σ_r ≥ 1"):
        config_from_dict({"sigma_r": 0.5})


@pytest.mark.parametrize(
    "data,name",
    [({"sigmad": 0.5}, "sigmad"), ({"dataset": {"sep": 1}}, "dataset.sep"), ({"controller": {"x": 1}}, "controller.x")],
)
def test_unknown_key_named(data, name):
    with pytest.raises(ConfigError, match=f"'{name}'"):
        config_from_dict(data)


@pytest.mark.parametrize(
    "data",
    [
        {"strategy": "sgd"},
        {"sigma_d": 1.5},
        {"n_clients": 1},
        {"strategy": "qsgd", "strategy_params": {"bits": 0}},
        {"strategy": "qsgd", "strategy_params": {"fraction": 0.1}},
        {"rate_range_mbps": [20, 5]},
        {"downlink": "half"},
        {"controller": {"s0_bits": 16}},
        {"dataset": {"kind": "idx"}},
        {"n_clients": "many"},
    ],
)
def test_invalid_values_rejected(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_overrides_parse_yaml_values(tmp_path):
    data = apply_overrides({}, ["sigma_r=4", "dataset.class_sep=2.5", "model.hidden=[8, 8]", "target_loss=null"])
    assert data == {"sigma_r": 4, "dataset": {"class_sep": 2.5}, "model": {"hidden": [8, 8]}, "target_loss": None}
    cfg = config_from_dict(data)
    assert cfg.model.hidden == [8, 8]
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])


def test_json_config_and_roundtrip(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"strategy": "topk", "seed": 9}')
    cfg = parse_config(p)
    assert cfg.seed == 9 and cfg.params()["fraction"] == 0.1
    assert config_from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()
    assert isinstance(parse_config(None), ExperimentConfig)
