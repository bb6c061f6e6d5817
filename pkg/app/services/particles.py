"""Particle realization of the SDE dX = b(X) dt + sqrt(2) sigma(X) dW.

The coefficients are extracted from the solved PDE field and frozen on every
interval [t_k, t_{k+1}); particles do not feed back into the field. Positions are
advanced with explicit Euler-Maruyama, coefficients are interpolated multilinearly
between cell centres and vanish outside the grid of centres.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from app.exceptions import EscapedDomain, ZeroMass
from app.services.fp_coefficients import CoefficientField, coefficients
from app.services.grid import ScalarField
from app.services.prox_solver import FlowTrajectory
from app.utilities.rng import INITIAL_STREAM, STEP_STREAM, map_blocks, particle_normals, particle_uniforms

logger = logging.getLogger(__name__)

DEFAULT_BLOCK_SIZE = 4096


@dataclass(frozen=True)
class ParticleEnsemble:
    """N positions in R^d after ``step`` Euler-Maruyama micro-steps."""

    positions: np.ndarray
    master_seed: int
    step: int = 0

    def __post_init__(self):
        positions = np.array(self.positions, dtype=float)
        if positions.ndim != 2:
            raise ValueError("positions must be an (N, d) array")
        if not np.all(np.isfinite(positions)):
            raise ValueError("positions must be finite")
        positions.flags.writeable = False
        object.__setattr__(self, "positions", positions)

    @property
    def N(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.positions.shape[1]

    def rows(self) -> list[list[float]]:
        """CSV rows ``id,x[,y]``."""
        return [[i, *self.positions[i]] for i in range(self.N)]

    def header(self) -> list[str]:
        return ["id"] + ["x", "y"][: self.d]


def sample_initial(
    u0: ScalarField,
    N: int,
    seed: int,
    block_size: int = DEFAULT_BLOCK_SIZE,
    workers: int = 1,
) -> ParticleEnsemble:
    """Draws X(0) from the piecewise-constant density u0.

    A uniform variate selects the cell through the cell-wise CDF; in one dimension
    its remainder places the particle inside the cell (exact inverse CDF), in two
    dimensions fresh uniforms jitter it across the cell. u0 is renormalized.

    Raises:
        ZeroMass: If u0 carries no positive mass.
    """
    grid = u0.grid
    weights = np.clip(u0.values, 0.0, None).ravel()
    total = float(np.sum(weights))
    if total <= 0:
        raise ZeroMass("cannot sample a density without positive mass")
    probs = weights / total
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    lower = np.concatenate(([0.0], cdf[:-1]))
    corners = grid.points - 0.5 * grid.h

    def draw(span: slice) -> np.ndarray:
        count = span.stop - span.start
        uniforms = particle_uniforms(seed, INITIAL_STREAM, 0, span.start, count)
        u = uniforms[:, 0]
        cell = np.minimum(np.searchsorted(cdf, u, side="right"), grid.size - 1)
        if grid.d == 1:
            offset = np.clip((u - lower[cell]) / np.where(probs[cell] > 0, probs[cell], 1.0), 0.0, 1.0)[:, None]
        else:
            offset = uniforms[:, 1 : 1 + grid.d]
        return corners[cell] + offset * grid.h

    chunks = map_blocks(draw, N, block_size, workers)
    positions = np.concatenate(chunks) if chunks else np.empty((0, grid.d))
    logger.info("Sampled %d particles from u0 (mass %.6g, seed %d)", N, total * grid.cell_volume, seed)
    return ParticleEnsemble(positions, seed, 0)


class CoefficientInterpolator:
    """Multilinear interpolation of (drift, sigma) between cell centres; zero outside."""

    def __init__(self, coeff: CoefficientField):
        grid = coeff.grid
        self.d = grid.d
        stacked = np.concatenate([coeff.drift, coeff.sigma[None]], axis=0)
        values = np.moveaxis(stacked, 0, -1)
        self._interp = RegularGridInterpolator(
            (grid.axis,) * grid.d, values, method="linear", bounds_error=False, fill_value=0.0
        )

    def __call__(self, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if positions.shape[0] == 0:
            return np.empty((0, self.d)), np.empty(0)
        values = self._interp(positions)
        return values[:, : self.d], values[:, self.d]


def _advance(
    ens: ParticleEnsemble,
    interp: CoefficientInterpolator,
    dt: float,
    block_size: int,
    workers: int,
) -> tuple[np.ndarray, np.ndarray]:
    scale = math.sqrt(2.0 * dt)

    def move(span: slice) -> tuple[np.ndarray, np.ndarray]:
        x = ens.positions[span]
        drift, sigma = interp(x)
        xi = particle_normals(ens.master_seed, STEP_STREAM, ens.step, span.start, x.shape[0], ens.d)
        moved = x + drift * dt + scale * sigma[:, None] * xi
        integrand = (np.linalg.norm(drift, axis=1) + sigma**2) * dt
        return moved, integrand

    results = map_blocks(move, ens.N, block_size, workers)
    if not results:
        return np.empty((0, ens.d)), np.empty(0)
    return np.concatenate([r[0] for r in results]), np.concatenate([r[1] for r in results])


def radial_extent(positions: np.ndarray) -> float:
    """Largest Euclidean |X| of an ensemble, 0 when empty."""
    return float(np.max(np.linalg.norm(positions, axis=1))) if positions.size else 0.0


def _check_escape(positions: np.ndarray, half_width: float, step: int) -> None:
    if positions.size == 0:
        return
    extent = np.max(np.abs(positions), axis=1)
    escaped = extent > half_width
    if np.any(escaped):
        raise EscapedDomain(step, int(escaped.sum()), float(extent.max()), half_width)


def em_step(
    ens: ParticleEnsemble,
    coeff: CoefficientField,
    dt: float,
    block_size: int = DEFAULT_BLOCK_SIZE,
    workers: int = 1,
) -> ParticleEnsemble:
    """X <- X + b(X) dt + sqrt(2 dt) sigma(X) xi, xi ~ N(0, I_d) from the per-particle streams.

    Raises:
        EscapedDomain: If any particle ends outside the box.
    """
    positions, _ = _advance(ens, CoefficientInterpolator(coeff), dt, block_size, workers)
    _check_escape(positions, coeff.grid.L, ens.step + 1)
    return ParticleEnsemble(positions, ens.master_seed, ens.step + 1)


@dataclass(frozen=True)
class Snapshot:
    k: int
    t: float
    ensemble: ParticleEnsemble


@dataclass
class SimulationResult:
    """Ensembles aligned to PDE times plus the path-integrability monitor."""

    N: int
    seed: int
    substeps: int
    snapshots: list[Snapshot]
    path_integral: np.ndarray = field(repr=False)
    max_radius: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)

    @property
    def peak_radius(self) -> float:
        """Largest |X| reached by any particle at any PDE time."""
        return float(np.max(self.max_radius)) if self.max_radius.size else 0.0

    def path_summary(self) -> dict:
        """Empirical E[int (|b(X)| + sigma(X)^2) dt] along the particle paths."""
        if self.path_integral.size == 0:
            return {"mean": 0.0, "max": 0.0, "finite": True}
        return {
            "mean": float(np.mean(self.path_integral)),
            "max": float(np.max(self.path_integral)),
            "finite": bool(np.all(np.isfinite(self.path_integral))),
        }


def simulate(
    trajectory: FlowTrajectory,
    N: int,
    seed: int,
    substeps: int = 1,
    block_size: int = DEFAULT_BLOCK_SIZE,
    workers: int = 1,
    snapshot_every: int = 1,
) -> SimulationResult:
    """Propagates N particles through the frozen coefficients of every PDE step.

    Snapshots are kept at t_k for k a multiple of ``snapshot_every`` and at the
    final time. ``max_radius`` records the largest Euclidean |X| at every PDE
    time. Positions do not depend on ``workers`` or ``block_size``.

    Raises:
        ValueError: If substeps < 1.
        EscapedDomain: With the micro-step index of the first escape.
    """
    if substeps < 1:
        raise ValueError("substeps must be at least 1")
    grid = trajectory.grid
    if N == 0:
        empty = ParticleEnsemble(np.empty((0, grid.d)), seed, 0)
        snapshots = [Snapshot(k, t, empty) for k, t in enumerate(trajectory.times)]
        return SimulationResult(0, seed, substeps, snapshots, np.empty(0), np.zeros(len(trajectory.times)))
    ens = sample_initial(trajectory.fields[0], N, seed, block_size, workers)
    snapshots = [Snapshot(0, 0.0, ens)]
    path_integral = np.zeros(N)
    max_radius = np.zeros(trajectory.n_steps + 1)
    max_radius[0] = radial_extent(ens.positions)
    for k in range(trajectory.n_steps):
        t_k = trajectory.times[k]
        coeff = coefficients(trajectory.fields[k], trajectory.p, trajectory.delta, t_k)
        interp = CoefficientInterpolator(coeff)
        dt = (trajectory.times[k + 1] - t_k) / substeps
        for _ in range(substeps):
            positions, integrand = _advance(ens, interp, dt, block_size, workers)
            _check_escape(positions, grid.L, ens.step + 1)
            ens = ParticleEnsemble(positions, seed, ens.step + 1)
            path_integral += integrand
        max_radius[k + 1] = radial_extent(ens.positions)
        if (k + 1) % snapshot_every == 0 or k + 1 == trajectory.n_steps:
            snapshots.append(Snapshot(k + 1, trajectory.times[k + 1], ens))
    logger.info("Simulated %d particles over %d steps (%d substeps, seed %d)", N, trajectory.n_steps, substeps, seed)
    return SimulationResult(N, seed, substeps, snapshots, path_integral, max_radius)
