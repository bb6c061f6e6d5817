"""Convergence sweeps over one experiment parameter.

Each level re-solves the experiment in memory with one parameter changed and
records a scalar metric:

    epsilon, delta   L2 distance of u(T) to the unregularized run (epsilon = 0, delta = 0)
    n, dt            L1 distance to the Barenblatt solution for Barenblatt data,
                     otherwise the energy identity residual
    N                terminal particle distance (W1 in 1D, histogram L1 in 2D)
    refinement       terminal particle distance at (N, dt) and at (10 N, dt / 2), one
                     seed per level
"""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Literal

import numpy as np

from app.config_loader import get_config, load_experiment
from app.models.experiment_schema import ExperimentConfig
from app.services.estimates import check_energy_identity, check_superposition_improvement
from app.services.grid import Grid, l1_norm, l2_norm
from app.services.marginals import ensemble_distance
from app.services.oracles import fit_power_law
from app.services.particles import simulate
from app.services.prox_solver import FlowTrajectory, default_delta, evolve
from app.services.runs import build_initial, exact_solution, resolve_support_constant
from app.utilities.io import next_free_path, write_csv, write_json

logger = logging.getLogger(__name__)

Axis = Literal["n", "dt", "N", "delta", "epsilon", "refinement"]
AXES: tuple[str, ...] = ("n", "dt", "N", "delta", "epsilon", "refinement")
REFINED_PARTICLES = 10
SWEEP_COLUMNS = ["axis", "level", "value", "metric", "metric_name"]


def default_levels(cfg: ExperimentConfig, axis: Axis, levels: int) -> list[float]:
    """Level values derived from the experiment.

    Refinements for n, dt, N; decades for delta, epsilon; consecutive seeds for
    the joint (N, dt) refinement.
    """
    if axis == "n":
        return [cfg.n * 2**i for i in range(levels)]
    if axis == "dt":
        return [cfg.dt / 2**i for i in range(levels)]
    if axis == "N":
        return [max(1, int(cfg.particles.N / 10 ** (levels - 1 - i))) for i in range(levels)]
    if axis == "epsilon":
        return [10.0 ** -(i + 1) for i in range(levels)]
    if axis == "delta":
        return [10.0 ** -(i + 2) for i in range(levels)]
    if axis == "refinement":
        return [cfg.particles.seed + i for i in range(levels)]
    raise ValueError(f"unknown sweep axis {axis!r}")


def solve_in_memory(cfg: ExperimentConfig) -> tuple[FlowTrajectory, dict]:
    """Solves an experiment without writing a run directory.

    Raises:
        ConfigInvalid: If the box is too small for the support bound at this level.
    """
    settings = get_config()
    solver_defaults = settings["solver"]
    grid = Grid(cfg.d, cfg.n, cfg.L)
    u0, meta = build_initial(cfg, grid)
    delta = cfg.delta if cfg.delta is not None else default_delta(u0, solver_defaults["delta_factor"])
    problem = cfg.problem(meta["R"], delta)
    c_support = resolve_support_constant(cfg.p, cfg.d, settings["verification"]["support_headroom"])
    problem.check_box(c_support, meta["mass"] or 1.0)
    traj = evolve(u0, problem, cfg.prox_config(delta, solver_defaults))
    meta.update(config=cfg.model_dump(mode="json"), delta=delta)
    return traj, meta


def _refinement_metric(traj: FlowTrajectory, meta: dict) -> tuple[float, str]:
    exact = exact_solution(meta, traj.grid, traj.times[-1])
    if exact is not None:
        return l1_norm(traj.final - exact), "l1_to_oracle"
    identity = check_energy_identity(traj)[0]
    return abs(identity.rhs - identity.lhs), "energy_residual"


def _terminal_distance(traj: FlowTrajectory, N: int, seed: int, substeps: int) -> tuple[str, float]:
    particles = get_config()["particles"]
    result = simulate(
        traj,
        N,
        seed,
        substeps,
        block_size=particles["block_size"],
        workers=particles["workers"],
        snapshot_every=traj.n_steps or 1,
    )
    return ensemble_distance(result.snapshots[-1].ensemble, traj.final)


def run_sweep(cfg: ExperimentConfig, axis: Axis, values: list[float]) -> list[dict]:
    """One row per level: {axis, level, value, metric, metric_name}."""
    rows = []
    if axis in ("epsilon", "delta"):
        reference, _ = solve_in_memory(cfg.model_copy(update={axis: 0.0}))
        for level, value in enumerate(values):
            traj, _ = solve_in_memory(cfg.model_copy(update={axis: float(value)}))
            metric = l2_norm(traj.final - reference.final)
            rows.append(dict(axis=axis, level=level, value=value, metric=metric, metric_name="l2_to_reference"))
    elif axis in ("n", "dt"):
        for level, value in enumerate(values):
            cast = int(value) if axis == "n" else float(value)
            traj, meta = solve_in_memory(cfg.model_copy(update={axis: cast}))
            metric, name = _refinement_metric(traj, meta)
            rows.append(dict(axis=axis, level=level, value=value, metric=metric, metric_name=name))
    elif axis == "refinement":
        coarse, _ = solve_in_memory(cfg)
        fine, _ = solve_in_memory(cfg.model_copy(update={"dt": cfg.dt / 2.0}))
        N = cfg.particles.N
        for value in values:
            seed = int(value)
            for level, (traj, count) in enumerate([(coarse, N), (fine, REFINED_PARTICLES * N)]):
                name, metric = _terminal_distance(traj, count, seed, cfg.particles.substeps)
                rows.append(dict(axis=axis, level=level, value=seed, metric=metric, metric_name=f"terminal_{name}"))
    else:
        traj, _ = solve_in_memory(cfg)
        for level, value in enumerate(values):
            name, metric = _terminal_distance(traj, int(value), cfg.particles.seed, cfg.particles.substeps)
            rows.append(dict(axis=axis, level=level, value=int(value), metric=metric, metric_name=f"terminal_{name}"))
    for row in rows:
        logger.info("Sweep %s level %d (%s): %s = %.6g", axis, row["level"], row["value"], row["metric_name"], row["metric"])
    return rows


def sweep_summary(axis: Axis, rows: list[dict]) -> dict:
    """Log-log slope of the metric against the level value, and monotonicity.

    A refinement sweep instead compares the median terminal distance over seeds
    of the refined level with the base level.
    """
    if axis == "refinement":
        coarse = [row["metric"] for row in rows if row["level"] == 0]
        fine = [row["metric"] for row in rows if row["level"] == 1]
        check = check_superposition_improvement(coarse, fine)
        return {
            "axis": axis,
            "levels": 2,
            "seeds": len(coarse),
            "decreasing": check.passed,
            "slope": None,
            "improvement": check.model_dump(mode="json", by_alias=True),
        }
    metrics = [row["metric"] for row in rows]
    summary: dict = {"axis": axis, "levels": len(rows), "decreasing": all(b < a for a, b in zip(metrics, metrics[1:]))}
    try:
        summary["slope"] = fit_power_law([row["value"] for row in rows], metrics)
    except ValueError:
        summary["slope"] = None
    if axis == "N" and rows:
        # a / sqrt(N) fit of the Monte Carlo term of the superposition budget
        summary["monte_carlo_a"] = float(np.median([row["metric"] * math.sqrt(row["value"]) for row in rows]))
    return summary


def cmd_sweep(
    config_path: str | Path,
    axis: Axis,
    levels: int = 3,
    out_dir: str | Path = ".",
    values: list[float] | None = None,
) -> Path:
    """Runs a sweep and writes ``sweep_<axis>.csv`` plus a JSON summary next to it."""
    if axis not in AXES:
        raise ValueError(f"unknown sweep axis {axis!r}")
    cfg = load_experiment(config_path)
    values = values or default_levels(cfg, axis, levels)
    rows = run_sweep(cfg, axis, values)
    out_dir = Path(out_dir)
    path = next_free_path(out_dir, f"sweep_{axis}", ".csv")
    write_csv(path, SWEEP_COLUMNS, ([row[c] for c in SWEEP_COLUMNS] for row in rows))
    summary = sweep_summary(axis, rows)
    write_json(path.with_suffix(".json"), summary)
    logger.info("Sweep %s: slope %s, decreasing=%s", axis, summary["slope"], summary["decreasing"])
    return path
