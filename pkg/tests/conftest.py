from __future__ import annotations

import json

import pytest

from app.config_loader import get_config


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale acceptance run, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def anyio_backend():
    return "asyncio"


@pytest.fixture
def isolated_settings(tmp_path, monkeypatch):
    """Global settings pointing at an empty oracle table and log file under tmp_path."""
    settings = json.loads(json.dumps(get_config()))
    settings["paths"]["oracle_constants"] = str(tmp_path / "oracle_constants.json")
    settings["paths"]["runs_dir"] = str(tmp_path / "runs")
    settings["global"]["log_file"] = str(tmp_path / "plflow.log")
    monkeypatch.setattr("app.config_loader.get_config", lambda path=None: settings)
    for module in ("app.services.runs", "app.services.sweep", "app.logging_config", "app.api.routers"):
        monkeypatch.setattr(f"{module}.get_config", lambda path=None: settings)
    return settings


@pytest.fixture
def write_experiment(tmp_path):
    """Writes an experiment JSON file and returns its path."""

    def _write(name: str = "experiment.json", **overrides):
        config = {
            "p": 4.0,
            "d": 1,
            "L": 8.0,
            "n": 64,
            "dt": 0.01,
            "T": 0.1,
            "epsilon": 0.0,
            "init": {"type": "barenblatt", "params": {"t0": 1.0, "mass": 1.0}},
            "particles": {"N": 2000, "seed": 7, "substeps": 1},
            "snapshot_every": 5,
        }
        config.update(overrides)
        path = tmp_path / name
        path.write_text(json.dumps(config), encoding="utf-8")
        return path

    return _write
