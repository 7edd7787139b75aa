"""Run configuration: one TOML file plus command-line overrides.

Schema (every key optional; defaults below)::

    [run]
    seed = 0
    threads = 0          # 0: use $SOILGEN_THREADS, else 1
    log_level = "INFO"

    [padding]            # SpectraPadder parameters
    [sogm]               # SOGM parameters
    [wet]                # WetSoilModel parameters

Unknown sections or keys are rejected.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import platform
from pathlib import Path

import tomli

from .diffusion import SOGM
from .padding import SpectraPadder
from .wet import WetSoilModel

RUN_DEFAULTS = {"seed": 0, "threads": 0, "log_level": "INFO"}
MODEL_CLASSES = {"padding": SpectraPadder, "sogm": SOGM, "wet": WetSoilModel}


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    cfg = {"run": dict(RUN_DEFAULTS)}
    for section, cls in MODEL_CLASSES.items():
        params = cls().get_params()
        params.pop("random_state", None)
        cfg[section] = {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}
    return cfg


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = default_config()
    if path is not None:
        doc = tomli.loads(Path(path).read_text())
        _merge(cfg, doc, where=str(path))
    if overrides:
        _merge(cfg, overrides, where="command line")
    return cfg


def resolve_threads(cfg: dict) -> int:
    n = int(cfg["run"].get("threads") or 0)
    if n <= 0:
        n = int(os.environ.get("SOILGEN_THREADS", "1") or 1)
    return max(n, 1)


def _merge(cfg: dict, doc: dict, where: str):
    for section, values in doc.items():
        if section not in cfg:
            raise ConfigError(f"{where}: unknown config section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"{where}: [{section}] must be a table")
        for key, v in values.items():
            if key not in cfg[section]:
                raise ConfigError(f"{where}: unknown key {section}.{key}")
            if v is not None:
                cfg[section][key] = v


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def model_params(cfg: dict, section: str) -> dict:
    params = copy.deepcopy(cfg[section])
    params["random_state"] = cfg["run"]["seed"]
    return params


def write_run_manifest(out_path, cfg: dict, command: str, extra: dict | None = None) -> Path:
    import numpy
    import torch

    from . import __version__

    target = Path(str(out_path) + ".run.json")
    doc = {
        "command": command,
        "config_hash": config_hash(cfg),
        "config": cfg,
        "seed": cfg["run"]["seed"],
        "versions": {"soilgen": __version__, "torch": torch.__version__, "numpy": numpy.__version__,
                     "python": platform.python_version()},
    }
    doc.update(extra or {})
    target.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return target
