import json

import pytest

from avdgp.config import ConfigError, ModelConfig


def test_defaults_match_training_setup():
    cfg = ModelConfig()
    assert (cfg.lr, cfg.batch, cfg.epochs) == (0.005, 100, 100)
    assert cfg.layer_dims(8) == [8, 16, 4, 1]


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown config keys: bogus"):
        ModelConfig.from_dict({"bogus": 1})


@pytest.mark.parametrize("bad", [
    {"rule": "AR9"},
    {"L": 2},
    {"M": [8, 4]},
    {"dims": [16, 0]},
    {"S": 0},
    {"lr": 0.0},
    {"split": [0.5, 0.5, 0.5]},
    {"likelihood": "poisson"},
    {"rule": "DS"},
    {"rule": "AR2PP", "task": "binary", "likelihood": "bernoulli"},
    {"task": "binary"},
    {"mean_fn": "quadratic"},
    {"val_every": 0},
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        ModelConfig.from_dict(bad)


def test_global_inference_pairs_with_baselines():
    ModelConfig.from_dict({"rule": "DS", "inference_fn": "global"})
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"rule": "AR2", "inference_fn": "global"})


def test_hash_is_stable_and_sensitive():
    a, b = ModelConfig(), ModelConfig()
    assert a.hash() == b.hash() and len(a.hash()) == 64
    assert ModelConfig(seed=1).hash() != a.hash()


def test_json_round_trip(tmp_path):
    cfg = ModelConfig(rule="AR1", seed=4, clip_norm=10.0)
    p = tmp_path / "c.json"
    p.write_text(cfg.to_json())
    assert ModelConfig.load(p) == cfg


def test_invalid_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        ModelConfig.load(p)
    p.write_text(json.dumps([1, 2]))
    with pytest.raises(ConfigError):
        ModelConfig.load(p)


def test_eval_components():
    assert ModelConfig(rule="AR2P", S=8).eval_S() == 8
    assert ModelConfig(rule="AR1", S=8).eval_S() == 32
