import json

import jsonschema
import pytest

from dtnerf.config import ABLATION_ROWS, AblationConfig, RunConfig, ablation_row_name, from_dict, load_config, \
    save_config, schema


def test_defaults_and_lambda():
    cfg = from_dict({})
    assert cfg == RunConfig()
    assert cfg.loss.lambda_mouth == 0.001 and cfg.loss.lambda_perc == 0.001
    assert cfg.ablation == AblationConfig()


def test_unknown_keys_rejected():
    with pytest.raises(jsonschema.ValidationError):
        from_dict({"schedule": {"coarse_step": 10}})
    with pytest.raises(jsonschema.ValidationError):
        from_dict({"render": {"fusion": "max"}})
    with pytest.raises(jsonschema.ValidationError):
        from_dict({"dtype": 32})


def test_int_promoted_to_float():
    cfg = from_dict({"loss": {"lambda_mouth": 1}})
    assert isinstance(cfg.loss.lambda_mouth, float)


def test_hash_ignores_threads_only():
    a = RunConfig()
    assert a.replace(threads=8).config_hash() == a.config_hash()
    assert a.replace(ablation={"transformer": False}).config_hash() != a.config_hash()
    assert len(a.config_hash()) == 16


def test_replace_leaves_original():
    a = RunConfig()
    b = a.replace(schedule={"coarse_steps": 3})
    assert a.schedule.coarse_steps == 1500 and b.schedule.coarse_steps == 3
    assert b.schedule.fine_steps == a.schedule.fine_steps


def test_save_load_round_trip(tmp_path):
    cfg = RunConfig().replace(field={"d_v": 8}, dtype="float64")
    save_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg
    assert load_config(None) == RunConfig()


def test_row_names():
    for name, flags in ABLATION_ROWS.items():
        assert ablation_row_name(AblationConfig(**flags)) == name
    assert ablation_row_name(AblationConfig(False, False, False)) == "w/o T w/o S w/o F"


def test_schema_is_valid_json_schema():
    s = schema()
    jsonschema.Draft7Validator.check_schema(s)
    assert set(s["properties"]) == set(RunConfig().to_dict())
    json.dumps(s)
