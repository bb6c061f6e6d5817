"""Fokker-Planck / SDE coefficients induced by a solved field.

Rewriting the flow as a Fokker-Planck equation

    du/dt = lap(a u) - div(b u),   a = |grad u|^(p-2),   b = grad a,

exposes the drift ``b`` and the diffusion scalar ``sigma = a^(1/2)`` of the SDE
dX = b(X) dt + sqrt(2) sigma(X) dW. Gradients are averaged from faces to centres
first and the powers are taken afterwards.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from app.services.grid import Grid, ScalarField, gradient, laplacian
from app.services.prox_solver import apply_A

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CoefficientField:
    """Cell-centred drift (d, *shape) and diffusion scalar (*shape) frozen at time ``t``."""

    grid: Grid
    drift: np.ndarray
    sigma: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        if not (np.all(np.isfinite(self.drift)) and np.all(np.isfinite(self.sigma))):
            raise ValueError("coefficients must be finite")
        if np.any(self.sigma < 0):
            raise ValueError("sigma must be nonnegative")

    @classmethod
    def zeros(cls, grid: Grid, t: float = 0.0) -> CoefficientField:
        return cls(grid, np.zeros((grid.d,) + grid.shape), np.zeros(grid.shape), t)

    @classmethod
    def constant(cls, grid: Grid, drift: tuple[float, ...], sigma: float, t: float = 0.0) -> CoefficientField:
        field = np.stack([np.full(grid.shape, float(b)) for b in drift])
        return cls(grid, field, np.full(grid.shape, float(sigma)), t)

    def rows(self) -> list[list[float]]:
        """CSV rows ``x[,y],b1[,b2],sigma``."""
        points = self.grid.points
        drift = self.drift.reshape(self.grid.d, -1)
        sigma = self.sigma.ravel()
        return [list(points[i]) + list(drift[:, i]) + [sigma[i]] for i in range(self.grid.size)]

    def header(self) -> list[str]:
        coords = ["x", "y"][: self.grid.d]
        return coords + [f"b{i + 1}" for i in range(self.grid.d)] + ["sigma"]


def mobility(field: ScalarField, p: float, delta: float = 0.0) -> np.ndarray:
    """a = (|grad u|^2 + delta^2)^((p-2)/2) at the cell centres."""
    return (gradient(field).magnitude_squared() + delta**2) ** ((p - 2.0) / 2.0)


def diffusion_coeff(field: ScalarField, p: float, delta: float = 0.0) -> ScalarField:
    """sigma = (|grad u|^2 + delta^2)^((p-2)/4); the sqrt(2) belongs to the particle stepper."""
    return ScalarField(field.grid, (gradient(field).magnitude_squared() + delta**2) ** ((p - 2.0) / 4.0))


def drift_coeff(field: ScalarField, p: float, delta: float = 0.0) -> np.ndarray:
    """b = grad(a) by central differences, i.e. the centred gradient of the mobility field."""
    return gradient(ScalarField(field.grid, mobility(field, p, delta))).centers


def coefficients(field: ScalarField, p: float, delta: float = 0.0, t: float = 0.0) -> CoefficientField:
    return CoefficientField(
        field.grid,
        drift_coeff(field, p, delta),
        diffusion_coeff(field, p, delta).values,
        t,
    )


def centered_divergence(vector: np.ndarray, grid: Grid) -> ScalarField:
    """Central-difference divergence of a cell-centred (d, *shape) vector field."""
    total = np.zeros(grid.shape)
    for a in range(grid.d):
        total += gradient(ScalarField(grid, vector[a])).centers[a]
    return ScalarField(grid, total)


def interior_mask(grid: Grid, margin: int) -> np.ndarray:
    """Cells at least ``margin`` cells away from every box face."""
    mask = np.ones(grid.shape, dtype=bool)
    for a in range(grid.d):
        index = [slice(None)] * grid.d
        index[a] = slice(0, margin)
        mask[tuple(index)] = False
        index[a] = slice(grid.n - margin, grid.n)
        mask[tuple(index)] = False
    return mask


def fp_consistency_residual(field: ScalarField, p: float, delta: float = 0.0, margin: int = 3) -> float:
    """L2 mismatch of div(a grad u) and lap(a u) - div(u b) on interior cells.

    The three operators do not commute on the grid, so the mismatch is a
    discretization error that vanishes under refinement on smooth fields.
    """
    grid = field.grid
    a = mobility(field, p, delta)
    b = gradient(ScalarField(grid, a)).centers
    pde_side = -1.0 * apply_A(field, p, 0.0, delta)
    fp_side = laplacian(ScalarField(grid, a * field.values)) - centered_divergence(b * field.values, grid)
    mismatch = (pde_side - fp_side).values[interior_mask(grid, margin)]
    return float(np.sqrt(np.sum(mismatch**2) * grid.cell_volume))
