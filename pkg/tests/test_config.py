import json
from pathlib import Path

import pytest

from romopt.config import ConfigError, PipelineConfig, parse_config, parse_config_dict

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_minimal_config_fills_defaults_and_round_trips():
    cfg = parse_config_dict({"scenario": "contaminant", "seed": 3})
    assert cfg.physics.grid_n == 40 and cfg.hdsa.n_fom == 1 and cfg.flowmap.P == 3
    assert parse_config_dict(json.loads(cfg.to_json())) == cfg


def test_unknown_key_is_named_with_its_line(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{\n  "scenario": "contaminant",\n  "seed": 0,\n  "physics": {\n    "gama": 1e-5\n  }\n}\n')
    with pytest.raises(ConfigError, match=r"physics\.gama.*line 5"):
        parse_config(p)


def test_documented_defaults_accepted_verbatim():
    cfg = parse_config_dict({"scenario": "contaminant", "seed": 0,
                             "physics": {"gamma": 1e-5, "final_time": 0.4, "kappa": 0.1, "rho": 2}})
    assert (cfg.physics.gamma, cfg.physics.final_time, cfg.physics.kappa, cfg.physics.rho) == (1e-5, 0.4, 0.1, 2.0)


@pytest.mark.parametrize("name", ["contaminant.json", "fire.json"])
def test_shipped_configs_parse(name):
    cfg = parse_config(CONFIGS / name)
    assert isinstance(cfg, PipelineConfig) and cfg.hdsa.n_fom == 1


def test_seed_is_mandatory():
    with pytest.raises(ConfigError, match="seed"):
        parse_config_dict({"scenario": "fire"})


@pytest.mark.parametrize("data,key", [
    ({"seed": "0"}, "seed"),
    ({"seed": True}, "seed"),
    ({"physics": {"grid_n": 40.5}}, "grid_n"),
    ({"physics": {"xi_test": [1, 2, 3]}}, "xi_test"),
    ({"rom": {"energy_tol": 2.0}}, "energy_tol"),
    ({"fire": {"train_box": [1, 1, 0, 2]}}, "train_box"),
    ({"flowmap": {"lr_start": 1e-4}}, "lr_start"),
    ({"hdsa": {"retention_ratio": 1.5}}, "retention_ratio"),
    ({"scenario": "smoke"}, "scenario"),
])
def test_invalid_values_name_the_key(data, key):
    base = {"scenario": "contaminant", "seed": 0}
    with pytest.raises(ConfigError, match=key):
        parse_config_dict({**base, **data})


def test_invalid_json_reports_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "scenario": "fire",\n  "seed": 0,,\n}\n')
    with pytest.raises(ConfigError, match="line 3"):
        parse_config(p)


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        parse_config(tmp_path / "missing.json")


def test_block_hash_tracks_content():
    a = parse_config_dict({"scenario": "contaminant", "seed": 0})
    b = parse_config_dict({"scenario": "contaminant", "seed": 0, "physics": {"rho": 2.5}})
    assert a.block_hash() == parse_config_dict(a.to_dict()).block_hash()
    assert a.block_hash("rom") == b.block_hash("rom")
    assert a.block_hash("physics") != b.block_hash("physics")


def test_sample_seed_defaults_to_run_seed():
    assert parse_config_dict({"scenario": "fire", "seed": 7}).sample_seed == 7
    assert parse_config_dict({"scenario": "fire", "seed": 7, "hdsa": {"sample_seed": 3}}).sample_seed == 3
