import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from feduhb.config import SCHEMA, config_schema, from_dict, parse_config
from feduhb.errors import ConfigError


class TestDefaults:
    def test_empty_gives_standard_setup(self):
        cfg = parse_config("")
        fl, u = cfg.fl_config(), cfg.unlearn_config()
        assert (fl.num_clients, fl.local_epochs, fl.global_rounds, fl.learning_rate, fl.batch_size) == \
            (20, 5, 40, 0.005, 64)
        assert fl.target_clients == (0, 1)
        assert (u.step_size, u.momentum, u.stop_multiplier, u.window, u.min_threshold, u.max_rounds) == \
            (0.005, 0.9, 0.6, 5, 1e-4, 40)
        assert cfg.stages == ["train", "unlearn", "attack", "verify"]
        assert cfg.methods == ["feduhb", "retrain", "federaser", "fedrecover"]

    def test_step_size_follows_learning_rate(self):
        cfg = from_dict({"fl": {"learning_rate": 0.05}})
        assert cfg.unlearn_config().step_size == 0.05
        cfg = from_dict({"fl": {"learning_rate": 0.05}, "unlearn": {"step_size": 0.01}})
        assert cfg.unlearn_config().step_size == 0.01

    def test_canonical_form_is_idempotent(self):
        cfg = from_dict({"stages": ["verify", "train"], "unlearn": {"methods": ["retrain", "feduhb"]},
                         "fl": {"target_clients": [3, 1]}})
        assert cfg.stages == ["train", "verify"]
        assert cfg.methods == ["feduhb", "retrain"]
        again = parse_config(cfg.to_json())
        assert again.to_json() == cfg.to_json()
        assert again.config_hash() == cfg.config_hash()

    def test_hash_ignores_key_order(self):
        a = parse_config(json.dumps({"seed": 4, "fl": {"num_clients": 8, "learning_rate": 0.01}}))
        b = parse_config('{"fl": {"learning_rate": 0.01, "num_clients": 8}, "seed": 4}')
        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != a.with_overrides(seed=5).config_hash()

    @given(st.integers(0, 2 ** 31), st.floats(1e-4, 1.0), st.integers(3, 50))
    def test_round_trip(self, seed, lr, clients):
        cfg = from_dict({"seed": seed, "fl": {"learning_rate": lr, "num_clients": clients}})
        assert parse_config(cfg.to_json()).to_dict() == cfg.to_dict()

    def test_schema_covers_every_key(self):
        schema = config_schema()
        assert schema["additionalProperties"] is False
        assert set(schema["properties"]) == set(SCHEMA)
        assert schema["properties"]["unlearn"]["properties"]["momentum"]["default"] == 0.9


class TestValidation:
    def test_misspelled_key(self):
        with pytest.raises(ConfigError, match="unknown key 'unlearn.momnetum'; did you mean 'momentum'"):
            from_dict({"unlearn": {"momnetum": 0.9}})

    def test_key_in_wrong_section(self):
        with pytest.raises(ConfigError, match="did you mean 'unlearn.momentum'"):
            from_dict({"fl": {"momentum": 0.9}})

    @pytest.mark.parametrize("value", [1.5, 1.0, 0.0, -0.2])
    def test_momentum_range(self, value):
        with pytest.raises(ConfigError, match=r"momentum must lie in \(0,1\)"):
            from_dict({"unlearn": {"momentum": value}})

    @pytest.mark.parametrize("data", [
        {"fl": {"num_clients": "20"}},
        {"fl": {"num_clients": True}},
        {"fl": {"learning_rate": -1}},
        {"fl": {"target_clients": [0, 0]}},
        {"fl": {"target_clients": [25]}},
        {"fl": {"num_clients": 2, "target_clients": [0, 1]}},
        {"stages": []},
        {"stages": ["deploy"]},
        {"unlearn": {"methods": ["sisa"]}},
        {"unlearn": {"window": 1}},
        {"dataset": {"name": "quadratic"}},
        {"dataset": {"name": "quadratic"}, "model": {"kind": "quadratic"}},
        {"model": {"kind": "quadratic"}},
        {"dataset": {"mu": 20.0, "L": 10.0}},
        {"attack": {"backdoor": True, "row": 26}},
        {"fl": []},
    ])
    def test_rejected(self, data):
        with pytest.raises(ConfigError):
            from_dict(data)

    def test_bad_json(self):
        with pytest.raises(ConfigError, match="not valid JSON"):
            parse_config("{seed: 1}")

    def test_quadratic_without_attack_is_valid(self):
        cfg = from_dict({"dataset": {"name": "quadratic"}, "model": {"kind": "quadratic"},
                         "stages": ["train", "unlearn", "verify"]})
        assert cfg["dataset"]["name"] == "quadratic"
