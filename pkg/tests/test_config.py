import json

import pytest

from soilgen.config import (
    ConfigError, config_hash, default_config, load_config, model_params, resolve_threads, write_run_manifest,
)
from soilgen.diffusion import SOGM


def test_defaults_mirror_estimators():
    cfg = default_config()
    assert cfg["run"] == {"seed": 0, "threads": 0, "log_level": "INFO"}
    assert cfg["sogm"]["T"] == 300 and cfg["wet"]["max_iter"] == 5000
    assert "random_state" not in cfg["padding"]


def test_file_and_overrides(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("[run]\nseed = 4\n[sogm]\nmax_steps = 7\nchannels = [4, 8, 8]\n")
    cfg = load_config(path, {"sogm": {"max_steps": 9}})
    assert cfg["run"]["seed"] == 4 and cfg["sogm"]["max_steps"] == 9
    params = model_params(cfg, "sogm")
    assert params["random_state"] == 4
    assert SOGM(**params).get_params()["channels"] == [4, 8, 8]


@pytest.mark.parametrize("text", ["[nope]\na = 1\n", "[sogm]\nnot_a_param = 1\n", "sogm = 3\n"])
def test_unknown_entries_rejected(tmp_path, text):
    path = tmp_path / "bad.toml"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_config(path)


def test_threads(monkeypatch):
    cfg = default_config()
    monkeypatch.delenv("SOILGEN_THREADS", raising=False)
    assert resolve_threads(cfg) == 1
    monkeypatch.setenv("SOILGEN_THREADS", "3")
    assert resolve_threads(cfg) == 3
    cfg["run"]["threads"] = 2
    assert resolve_threads(cfg) == 2


def test_run_manifest(tmp_path):
    cfg = default_config()
    out = write_run_manifest(tmp_path / "x.csv", cfg, "soilgen generate", {"outputs": ["x.csv"]})
    doc = json.loads(out.read_text())
    assert out.name == "x.csv.run.json"
    assert doc["config_hash"] == config_hash(cfg) and doc["seed"] == 0
    assert {"soilgen", "torch", "numpy", "python"} <= set(doc["versions"])
    other = default_config()
    other["run"]["seed"] = 1
    assert config_hash(other) != config_hash(cfg)
