"""This module defines the read-only routing for the run service."""

from __future__ import annotations

import logging
from pathlib import Path

from fastapi import APIRouter, Depends, HTTPException

from app.config_loader import get_config, resolve_path
from app.exceptions import ConfigInvalid, MissingCalibration, MissingRun
from app.services.runs import verify_run
from app.utilities.io import read_csv, read_json

logger = logging.getLogger(__name__)
router = APIRouter()


def get_runs_dir() -> Path:
    """Directory holding the served run directories."""
    return resolve_path(get_config()["paths"]["runs_dir"])


def _run_path(run_id: str, runs_dir: Path) -> Path:
    path = (runs_dir / run_id).resolve()
    if path.parent != runs_dir.resolve() or not (path / "manifest.json").is_file():
        raise HTTPException(status_code=404, detail=f"run not found: {run_id}")
    return path


@router.get("/status/")
def get_status() -> dict:
    """Get the status of the service.

    Returns:
        dict: A dictionary containing the service status, indicating it is running.
    """
    return {"status": "Service is up and running"}


@router.get("/runs/")
def list_runs(runs_dir: Path = Depends(get_runs_dir)) -> dict:
    """Lists the ids of completed runs."""
    if not runs_dir.is_dir():
        return {"runs": []}
    return {"runs": sorted(p.name for p in runs_dir.iterdir() if (p / "manifest.json").is_file())}


@router.get("/runs/{run_id}/manifest")
def get_manifest(run_id: str, runs_dir: Path = Depends(get_runs_dir)) -> dict:
    return read_json(_run_path(run_id, runs_dir) / "manifest.json")


@router.get("/runs/{run_id}/diagnostics")
def get_diagnostics(run_id: str, runs_dir: Path = Depends(get_runs_dir)) -> dict:
    """Rows of ``diagnostics.csv`` with numeric values."""
    try:
        rows = read_csv(_run_path(run_id, runs_dir) / "diagnostics.csv")
    except MissingRun as e:
        raise HTTPException(status_code=404, detail=str(e)) from e
    return {"rows": [{key: float(value) for key, value in row.items()} for row in rows]}


@router.post("/runs/{run_id}/verify")
def verify_endpoint(run_id: str, runs_dir: Path = Depends(get_runs_dir)) -> dict:
    """Evaluates the estimates of a run; nothing is written into the run directory.

    Returns:
        dict: The estimate report with a ``failed`` count.
    """
    try:
        report = verify_run(_run_path(run_id, runs_dir))
    except MissingRun as e:
        raise HTTPException(status_code=404, detail=str(e)) from e
    except (ConfigInvalid, MissingCalibration) as e:
        raise HTTPException(status_code=422, detail=str(e)) from e
    logger.info("Verified run %s: %d of %d checks failed", run_id, len(report.failed), len(report.checks))
    return {**report.model_dump(mode="json", by_alias=True), "failed": len(report.failed)}
