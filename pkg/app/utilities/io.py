"""Run-directory helpers: append-only file naming plus CSV and JSON writers."""

from __future__ import annotations

import csv
import json
import logging
from collections.abc import Iterable, Sequence
from pathlib import Path

from pydantic import BaseModel

from app.exceptions import MissingRun

logger = logging.getLogger(__name__)


def next_free_path(directory: Path, stem: str, suffix: str = "") -> Path:
    """``directory/stem+suffix``, or ``stem_2``, ``stem_3``, ... when taken."""
    candidate = directory / f"{stem}{suffix}"
    index = 2
    while candidate.exists():
        candidate = directory / f"{stem}_{index}{suffix}"
        index += 1
    return candidate


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as file:
        writer = csv.writer(file)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def read_csv(path: Path) -> list[dict[str, str]]:
    """Rows of a CSV file keyed by its header.

    Raises:
        MissingRun: If the file does not exist.
    """
    if not path.is_file():
        raise MissingRun(path)
    with open(path, newline="", encoding="utf-8") as file:
        return list(csv.DictReader(file))


def write_json(path: Path, data: dict | list | BaseModel) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as file:
        if isinstance(data, BaseModel):
            file.write(data.model_dump_json(indent=2, by_alias=True))
        else:
            json.dump(data, file, indent=2)
    logger.info("Wrote %s", path)
    return path


def read_json(path: Path) -> dict | list:
    """Parsed JSON content.

    Raises:
        MissingRun: If the file does not exist.
    """
    if not path.is_file():
        raise MissingRun(path)
    with open(path, encoding="utf-8") as file:
        return json.load(file)
