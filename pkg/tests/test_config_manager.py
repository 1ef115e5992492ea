import json

import pytest

from core.config_manager import ConfigManager
from core.errors import ConfigError


def write(path, data):
    path.write_text(json.dumps(data))
    return path


def test_defaults_fill_only_named_sections(tmp_path):
    path = write(tmp_path / "run.json", {"mc": {"seed": 3}, "grid": {"psor": {"omega": 1.2}}})
    config = ConfigManager(path).load_config()
    assert config["mc"]["seed"] == 3
    assert config["mc"]["paths"] == 2000
    assert config["grid"]["psor"]["omega"] == 1.2
    assert config["grid"]["psor"]["ordering"] == "lexicographic"
    assert "model" not in config
    assert "campaign" not in config


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        ConfigManager(tmp_path / "absent.json").load_config()

    broken = tmp_path / "broken.json"
    broken.write_text("{ not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        ConfigManager(broken).load_config()

    with pytest.raises(ConfigError):
        ConfigManager(write(tmp_path / "list.json", [1, 2])).load_config()
    with pytest.raises(ConfigError, match=r"\[mc\]"):
        ConfigManager(write(tmp_path / "bad.json", {"mc": 5})).load_config()


def test_require_sections_names_first_missing():
    with pytest.raises(ConfigError, match=r"Missing required section \[grid\]"):
        ConfigManager.require_sections({"model": {}}, ["model", "grid", "payoff"])
    with pytest.raises(ConfigError, match=r"\[grid\] needs 'time_steps'"):
        ConfigManager.require_keys({"grid": {"space_nodes": 21, "time_steps": None}}, "grid",
                                   ["space_nodes", "time_steps"])


def test_default_config_file_location(tmp_path):
    manager = ConfigManager(base_dir=tmp_path)
    assert manager.config_file == tmp_path / "configs" / "reference_put.json"


def test_save_config_is_sorted_and_round_trips(tmp_path):
    manager = ConfigManager(tmp_path / "run.json")
    config = {"output": {"formats": ["json"]}, "campaign": {"seed": 1, "trees": 2}}
    assert manager.save_config(config)
    text = (tmp_path / "run.json").read_text()
    assert text.index('"campaign"') < text.index('"output"')
    assert text.endswith("\n")
    assert manager.load_config()["campaign"]["trees"] == 2


def test_shipped_configs_load(repo_root):
    for name in ("reference_put", "zero_payoff", "put_on_min_2d", "tree_campaign"):
        config = ConfigManager(repo_root / "configs" / f"{name}.json").load_config()
        assert "output" in config
