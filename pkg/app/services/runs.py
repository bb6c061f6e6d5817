"""Run directories: building the initial datum, solving, simulating, verifying and comparing.

A run directory holds

    manifest.json       config echo, derived R / delta / C_support, versions, wall time
    config.json         the validated experiment
    diagnostics.csv     one row per time level
    trajectory.npz      every field of the trajectory
    fields/u_*.csv      snapshots every ``snapshot_every`` steps
    coefficients/coeff_*.csv   drift b and diffusion sigma at the snapshot times
    particles/N*_seed*_sub*/   ensembles.npz, manifest.json, positions_*.csv
    report*.json, comparison*.json

Outputs are never overwritten; a second report becomes ``report_2.json``.
"""

from __future__ import annotations

import dataclasses
import logging
import platform
import time
from pathlib import Path

import numpy as np
import scipy

from app.config_loader import get_config, load_experiment, lookup_oracle_constants, save_oracle_constants
from app.exceptions import ConfigInvalid, MissingCalibration, MissingRun
from app.models.experiment_schema import ExperimentConfig
from app.models.report_schema import ComparisonReport, EstimateReport
from app.services import fp_coefficients
from app.services.estimates import build_report, compare_ensembles
from app.services.grid import Grid, ScalarField, mass, support_radius
from app.services.oracles import BarenblattProfile, oracle_entry
from app.services.particles import ParticleEnsemble, SimulationResult, Snapshot, radial_extent, simulate
from app.services.prox_solver import FlowTrajectory, StepDiagnostics, default_delta, evolve
from app.utilities.io import next_free_path, read_csv, read_json, write_csv, write_json

logger = logging.getLogger(__name__)

__version__ = "0.1.0"


def field_rows(field: ScalarField) -> list[list[float]]:
    """CSV rows ``x[,y],u`` in row-major cell order."""
    return [[*point, value] for point, value in zip(field.grid.points, field.values.ravel())]


def field_header(grid: Grid) -> list[str]:
    return ["x", "y"][: grid.d] + ["u"]


def read_field(path: Path, grid: Grid) -> ScalarField:
    """Loads a field CSV written by ``field_rows`` onto ``grid``.

    Raises:
        ConfigInvalid: If the file does not match the grid.
    """
    try:
        rows = read_csv(path)
    except MissingRun as e:
        raise ConfigInvalid("init.params.path", f"file not found: {path}") from e
    if len(rows) != grid.size:
        raise ConfigInvalid("init.params.path", f"expected {grid.size} rows, found {len(rows)}")
    coords = np.array([[float(row[c]) for c in field_header(grid)[:-1]] for row in rows])
    if not np.allclose(coords, grid.points, atol=1e-9 * grid.L):
        raise ConfigInvalid("init.params.path", "cell centres do not match the configured grid")
    return ScalarField(grid, np.array([float(row["u"]) for row in rows]).reshape(grid.shape))


def _bump(grid: Grid, params: dict) -> tuple[np.ndarray, float]:
    shape = params.get("shape", "cosine")
    radius = float(params.get("radius", 1.0))
    center = np.asarray(params.get("center", [0.0] * grid.d), dtype=float)
    if center.shape != (grid.d,):
        raise ConfigInvalid("init.params.center", f"expected {grid.d} coordinates")
    if radius <= 0:
        raise ConfigInvalid("init.params.radius", "must be positive")
    r = np.linalg.norm(grid.points - center, axis=1).reshape(grid.shape)
    if shape == "cosine":
        values = np.where(r < radius, 0.5 * (1.0 + np.cos(np.pi * r / radius)), 0.0)
    elif shape == "hat":
        values = np.maximum(1.0 - r / radius, 0.0)
    else:
        raise ConfigInvalid("init.params.shape", f"unknown bump shape {shape!r}")
    return values, float(np.linalg.norm(center)) + radius


def build_initial(cfg: ExperimentConfig, grid: Grid) -> tuple[ScalarField, dict]:
    """Initial datum on the grid and its provenance (type, t0, support radius R).

    The datum is rescaled to ``init.params.mass`` (default 1).
    """
    params = cfg.init.params
    target = float(params.get("mass", 1.0))
    meta: dict = {"init": cfg.init.type}
    if cfg.init.type == "barenblatt":
        t0 = float(params.get("t0", 1.0))
        if t0 <= 0:
            raise ConfigInvalid("init.params.t0", "must be positive")
        profile = BarenblattProfile.calibrate(cfg.p, cfg.d, mass=target)
        values = profile.field(grid, t0).values
        meta.update(t0=t0, R=profile.free_boundary(t0))
    elif cfg.init.type == "bump":
        values, radius = _bump(grid, params)
        meta["R"] = radius
    else:
        if "path" not in params:
            raise ConfigInvalid("init.params.path", "required for file initial data")
        values = read_field(Path(params["path"]), grid).values
        top = np.max(np.abs(values))
        meta["R"] = support_radius(ScalarField(grid, values), 1e-12 * top) + grid.h if top > 0 else grid.h
    u0 = ScalarField(grid, values)
    current = mass(u0)
    if current > 0:
        u0 = u0 * (target / current)
    if cfg.R is not None:
        meta["R"] = cfg.R
    meta["mass"] = mass(u0)
    return u0, meta


def resolve_support_constant(p: float, d: int, headroom: float = 1.2) -> float:
    """Stored C_support for (p, d), else an in-memory calibration from the Barenblatt oracle.

    Raises:
        MissingCalibration: If the constant can be neither read nor calibrated.
    """
    entry = lookup_oracle_constants(p, d)
    if entry is not None:
        if "C_support" not in entry:
            raise MissingCalibration(p, d)
        return float(entry["C_support"])
    logger.warning("No calibrated support constant for p=%s, d=%s; calibrating in memory", p, d)
    try:
        return float(oracle_entry(p, d, headroom=headroom, validate=False)["C_support"])
    except ValueError as e:
        raise MissingCalibration(p, d) from e


def _versions() -> dict:
    return {"app": __version__, "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}


def _fresh_run_dir(out_dir: Path) -> Path:
    if (out_dir / "manifest.json").exists():
        raise ConfigInvalid("out", f"{out_dir} already holds a completed run")
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def cmd_solve(config_path: str | Path, out_dir: str | Path) -> Path:
    """Solves one experiment and writes its run directory.

    Raises:
        ConfigInvalid: For schema violations, a box too small for the support bound,
            or an output directory that already holds a run.
        NonConvergence: With the index of the failing step.
    """
    settings = get_config()
    cfg = load_experiment(config_path)
    grid = Grid(cfg.d, cfg.n, cfg.L)
    u0, meta = build_initial(cfg, grid)
    delta = cfg.delta if cfg.delta is not None else default_delta(u0, settings["solver"]["delta_factor"])
    prob = cfg.problem(meta["R"], delta)
    c_support = resolve_support_constant(cfg.p, cfg.d, settings["verification"]["support_headroom"])
    prob.check_box(c_support, meta["mass"] or 1.0)
    prox = cfg.prox_config(delta, settings["solver"])
    run_dir = _fresh_run_dir(Path(out_dir))
    logger.info("Solving %s into %s (p=%s, d=%d, n=%d, dt=%g, T=%g)", config_path, run_dir, cfg.p, cfg.d, cfg.n, cfg.dt, cfg.T)

    def save_snapshot(k: int, t: float, u: ScalarField) -> None:
        if k % cfg.snapshot_every == 0 or k == prob.n_steps:
            write_csv(run_dir / "fields" / f"u_{k:06d}.csv", field_header(grid), field_rows(u))
            coeff = fp_coefficients.coefficients(u, cfg.p, delta, t)
            write_csv(run_dir / "coefficients" / f"coeff_{k:06d}.csv", coeff.header(), coeff.rows())
            logger.info("Snapshot k=%d t=%.6g mass=%.12g", k, t, mass(u))

    started = time.perf_counter()
    threshold = settings["verification"]["support_threshold"] * float(np.max(np.abs(u0.values)))
    traj = evolve(u0, prob, prox, threshold=threshold or None, on_step=save_snapshot)
    wall = time.perf_counter() - started

    traj.save(run_dir / "trajectory.npz")
    write_csv(
        run_dir / "diagnostics.csv",
        [f.name for f in dataclasses.fields(StepDiagnostics)],
        [dataclasses.astuple(row) for row in traj.diagnostics],
    )
    write_json(run_dir / "config.json", cfg.model_dump(mode="json"))
    write_json(
        run_dir / "manifest.json",
        {
            "config": cfg.model_dump(mode="json"),
            "source": str(config_path),
            **meta,
            "delta": delta,
            "c_support": c_support,
            "threshold": traj.threshold,
            "n_steps": traj.n_steps,
            "versions": _versions(),
            "wall_time": wall,
        },
    )
    return run_dir


def load_run(run_dir: str | Path) -> tuple[FlowTrajectory, dict]:
    """Trajectory and manifest of a completed run.

    Raises:
        MissingRun: If the directory or its artifacts are missing.
    """
    run_dir = Path(run_dir)
    manifest = read_json(run_dir / "manifest.json")
    npz = run_dir / "trajectory.npz"
    if not npz.is_file():
        raise MissingRun(npz)
    return FlowTrajectory.load(npz, meta=manifest), manifest


def cmd_simulate(
    run_dir: str | Path, N: int, seed: int, substeps: int = 1, workers: int | None = None
) -> Path:
    """Simulates N particles on a solved run; returns the new particles subdirectory."""
    settings = get_config()["particles"]
    traj, manifest = load_run(run_dir)
    workers = workers or settings["workers"]
    started = time.perf_counter()
    result = simulate(
        traj,
        N,
        seed,
        substeps,
        block_size=settings["block_size"],
        workers=workers,
        snapshot_every=manifest["config"]["snapshot_every"],
    )
    wall = time.perf_counter() - started
    out = next_free_path(Path(run_dir) / "particles", f"N{N}_seed{seed}_sub{substeps}")
    out.mkdir(parents=True)
    np.savez_compressed(
        out / "ensembles.npz",
        k=np.array([s.k for s in result.snapshots]),
        t=np.array([s.t for s in result.snapshots]),
        positions=np.stack([s.ensemble.positions for s in result.snapshots]),
        steps=np.array([s.ensemble.step for s in result.snapshots]),
        path_integral=result.path_integral,
        max_radius=result.max_radius,
    )
    for snap in result.snapshots:
        write_csv(out / f"positions_{snap.k:06d}.csv", snap.ensemble.header(), snap.ensemble.rows())
    write_json(
        out / "manifest.json",
        {
            "N": N,
            "seed": seed,
            "substeps": substeps,
            "block_size": settings["block_size"],
            "workers": workers,
            "snapshots": len(result.snapshots),
            "peak_radius": result.peak_radius,
            "path_integrability": result.path_summary(),
            "versions": _versions(),
            "wall_time": wall,
        },
    )
    return out


def load_simulation(directory: Path) -> SimulationResult:
    info = read_json(directory / "manifest.json")
    archive = directory / "ensembles.npz"
    if not archive.is_file():
        raise MissingRun(archive)
    with np.load(archive) as data:
        snapshots = [
            Snapshot(int(k), float(t), ParticleEnsemble(positions, info["seed"], int(step)))
            for k, t, positions, step in zip(data["k"], data["t"], data["positions"], data["steps"])
        ]
        path_integral = data["path_integral"]
        max_radius = data["max_radius"] if "max_radius" in data.files else None
    if max_radius is None:
        # Older archives: radii at the stored snapshots only.
        max_radius = np.array([radial_extent(s.ensemble.positions) for s in snapshots])
    return SimulationResult(info["N"], info["seed"], info["substeps"], snapshots, path_integral, max_radius)


def load_simulations(run_dir: str | Path) -> list[SimulationResult]:
    root = Path(run_dir) / "particles"
    if not root.is_dir():
        return []
    return [load_simulation(path) for path in sorted(root.iterdir()) if (path / "manifest.json").is_file()]


def verify_run(run_dir: str | Path) -> EstimateReport:
    """Builds the estimate report of a run without writing anything."""
    traj, manifest = load_run(run_dir)
    settings = get_config()["verification"]
    c_support = manifest.get("c_support")
    if c_support is None:
        c_support = resolve_support_constant(traj.p, traj.grid.d, settings["support_headroom"])
    return build_report(
        traj,
        c_support,
        manifest["R"],
        simulations=load_simulations(run_dir),
        settings=settings,
        t0=manifest.get("t0"),
        coefficients=manifest["config"].get("superposition_coefficients"),
    )


def cmd_verify(run_dir: str | Path) -> tuple[Path, EstimateReport]:
    report = verify_run(run_dir)
    path = write_json(next_free_path(Path(run_dir), "report", ".json"), report)
    return path, report


def cmd_compare(run_dir: str | Path) -> tuple[Path, list[ComparisonReport]]:
    """Particle-versus-PDE distances of every ensemble of the run.

    Raises:
        MissingRun: If the run has no particle ensembles.
    """
    traj, manifest = load_run(run_dir)
    simulations = load_simulations(run_dir)
    if not simulations:
        raise MissingRun(Path(run_dir) / "particles")
    verification = get_config()["verification"]
    fraction = verification["superposition_fraction"]
    noise_factor = verification.get("superposition_noise_factor", 1.5)
    coefficients = manifest["config"].get("superposition_coefficients")
    reports = [
        compare_ensembles(
            traj, result, f"N{result.N}_seed{result.seed}_sub{result.substeps}", coefficients, fraction, noise_factor
        )
        for result in simulations
    ]
    for report in reports:
        terminal = report.terminal
        if terminal is not None:
            logger.info("%s: terminal %s = %.4g (budget %.4g)", report.label, terminal.metric, terminal.distance, report.terminal_tolerance)
    path = write_json(
        next_free_path(Path(run_dir), "comparison", ".json"), [report.model_dump(mode="json") for report in reports]
    )
    return path, reports


def cmd_calibrate(p_values: list[float], d_values: list[int], out_path: str | Path | None = None) -> Path:
    """Writes oracle constants for every (p, d) pair."""
    headroom = get_config()["verification"]["support_headroom"]
    entries = []
    for d in d_values:
        for p in p_values:
            entry = oracle_entry(p, d, headroom=headroom)
            logger.info("Calibrated p=%s d=%d: q=%.6g C1=%.6g C_support=%.6g", p, d, entry["q"], entry["C1"], entry["C_support"])
            entries.append(entry)
    return save_oracle_constants(entries, out_path)


def exact_solution(manifest: dict, grid: Grid, t: float) -> ScalarField | None:
    """Barenblatt field at run time t for Barenblatt-initialized runs, else None."""
    if manifest.get("init") != "barenblatt":
        return None
    cfg = manifest["config"]
    profile = BarenblattProfile.calibrate(cfg["p"], cfg["d"], mass=manifest["mass"])
    field = profile.field(grid, manifest["t0"] + t)
    current = mass(field)
    return field * (manifest["mass"] / current) if current > 0 else field
