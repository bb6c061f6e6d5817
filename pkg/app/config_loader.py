"""Module for loading global settings, experiment files and calibrated constants."""

from __future__ import annotations

import json
import logging
from functools import lru_cache
from pathlib import Path

import yaml
from pydantic import ValidationError

from app.exceptions import ConfigInvalid, MissingRun
from app.models.experiment_schema import ExperimentConfig

logger = logging.getLogger(__name__)

ROOT_DIR = Path(__file__).resolve().parent.parent
CONFIG_PATH = ROOT_DIR / "config" / "config.yml"


@lru_cache(maxsize=None)
def get_config(path: str | None = None) -> dict:
    """Loads the global configuration from the YAML file.

    Args:
        path (str | None): Alternative location of the settings file.

    Returns:
        dict: Configuration dictionary.
    """
    with open(path or CONFIG_PATH, encoding="utf-8") as file:
        config = yaml.safe_load(file)
    return config


def resolve_path(value: str | Path) -> Path:
    """Resolves a configured path relative to the repository root."""
    path = Path(value)
    return path if path.is_absolute() else ROOT_DIR / path


def load_experiment(path: str | Path) -> ExperimentConfig:
    """Loads and validates a single experiment file.

    The experiment file is JSON; it is parsed with ``yaml.safe_load`` so that the
    same loader accepts YAML-flavoured files as well.

    Args:
        path (str | Path): Location of the experiment file.

    Raises:
        MissingRun: If the file does not exist.
        ConfigInvalid: If the content violates the schema, naming the field path.

    Returns:
        ExperimentConfig: Validated experiment.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingRun(path)
    with open(path, encoding="utf-8") as file:
        raw = yaml.safe_load(file)
    return parse_experiment(raw or {})


def parse_experiment(raw: dict) -> ExperimentConfig:
    """Validates an experiment mapping, translating pydantic errors to ConfigInvalid."""
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        error = e.errors()[0]
        field_path = ".".join(str(part) for part in error["loc"]) or "<root>"
        raise ConfigInvalid(field_path, error["msg"]) from e


def load_oracle_constants(path: str | Path | None = None) -> list[dict]:
    """Reads ``oracle_constants.json``; a missing file is an empty table."""
    path = resolve_path(path or get_config()["paths"]["oracle_constants"])
    if not path.is_file():
        return []
    with open(path, encoding="utf-8") as file:
        return json.load(file)


def save_oracle_constants(entries: list[dict], path: str | Path | None = None) -> Path:
    """Writes the calibrated constants, replacing entries with the same (p, d)."""
    path = resolve_path(path or get_config()["paths"]["oracle_constants"])
    merged = {(e["p"], e["d"]): e for e in load_oracle_constants(path)}
    for entry in entries:
        merged[(entry["p"], entry["d"])] = entry
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as file:
        json.dump(sorted(merged.values(), key=lambda e: (e["d"], e["p"])), file, indent=2)
    logger.info("Wrote %d oracle constant entries to %s", len(merged), path)
    return path


def lookup_oracle_constants(p: float, d: int, path: str | Path | None = None) -> dict | None:
    """Returns the stored entry for (p, d) or None."""
    for entry in load_oracle_constants(path):
        if entry["d"] == d and abs(entry["p"] - p) < 1e-12 and entry.get("available", True):
            return entry
    return None
