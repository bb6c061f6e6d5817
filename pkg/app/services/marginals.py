"""Density estimates of particle ensembles and their distance to PDE fields.

The time marginal of the particle system is compared with the solved density as
measures: W1 on the line, L1 of the histogram in the plane.
"""

from __future__ import annotations

import logging
from typing import Literal

import numpy as np
from scipy import stats

from app.exceptions import DegenerateSample, NotOneDimensional
from app.services.grid import Grid, ScalarField, l1_norm
from app.services.particles import ParticleEnsemble

logger = logging.getLogger(__name__)

KERNEL_CHUNK = 4096


def histogram_density(ens: ParticleEnsemble, grid: Grid) -> ScalarField:
    """Counts per cell divided by N h^d.

    Raises:
        ValueError: For an empty ensemble.
    """
    if ens.N == 0:
        raise ValueError("histogram of an empty ensemble")
    counts, _ = np.histogramdd(ens.positions, bins=[grid.edges] * grid.d)
    inside = int(counts.sum())
    if inside < ens.N:
        logger.warning("%d of %d particles fall outside the grid", ens.N - inside, ens.N)
    return ScalarField(grid, counts / (ens.N * grid.cell_volume))


def silverman_bandwidth(samples: np.ndarray) -> np.ndarray:
    """1.06 sigma N^(-1/5) per axis.

    Raises:
        DegenerateSample: If some axis has zero spread.
    """
    N = samples.shape[0]
    spread = np.std(samples, axis=0, ddof=1) if N > 1 else np.zeros(samples.shape[1])
    if np.any(spread <= 0):
        raise DegenerateSample("sample standard deviation vanishes; pass an explicit bandwidth")
    return 1.06 * spread * N ** (-0.2)


def kde_density(
    ens: ParticleEnsemble, grid: Grid, bandwidth: float | Literal["auto"] = "auto"
) -> ScalarField:
    """Gaussian (product) kernel estimate on the cell centres, renormalized to mass 1."""
    if ens.N == 0:
        raise ValueError("kernel estimate of an empty ensemble")
    if bandwidth == "auto":
        widths = silverman_bandwidth(ens.positions)
    else:
        if bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        widths = np.full(grid.d, float(bandwidth))
    density = np.zeros(grid.shape)
    for start in range(0, ens.N, KERNEL_CHUNK):
        chunk = ens.positions[start : start + KERNEL_CHUNK]
        kernels = [
            np.exp(-0.5 * ((grid.axis[:, None] - chunk[None, :, a]) / widths[a]) ** 2) for a in range(grid.d)
        ]
        density += kernels[0].sum(axis=1) if grid.d == 1 else kernels[0] @ kernels[1].T
    total = density.sum() * grid.cell_volume
    if total <= 0:
        raise DegenerateSample("kernel estimate carries no mass on the grid")
    return ScalarField(grid, density / total)


def field_cdf(field: ScalarField) -> np.ndarray:
    """Cumulative of the renormalized 1D field at the n + 1 cell faces."""
    weights = np.clip(field.values, 0.0, None) * field.grid.h
    total = weights.sum()
    if total <= 0:
        raise ValueError("field has no positive mass")
    return np.concatenate(([0.0], np.cumsum(weights) / total))


def w1_distance_1d(ens: ParticleEnsemble, field: ScalarField) -> float:
    """Integral of |F_emp - F_field| over the line, evaluated exactly.

    F_emp is a step function, F_field is piecewise linear between faces, so the
    integrand is linear on every interval between consecutive breakpoints.

    Raises:
        NotOneDimensional: If the field or the ensemble is not one-dimensional.
    """
    if field.grid.d != 1 or ens.d != 1:
        raise NotOneDimensional("W1 is only available in d = 1; use the histogram L1 distance")
    if ens.N == 0:
        raise ValueError("W1 of an empty ensemble")
    samples = np.sort(ens.positions[:, 0])
    edges = field.grid.edges
    cdf = field_cdf(field)
    points = np.union1d(edges, samples)
    left, right = points[:-1], points[1:]
    emp = np.searchsorted(samples, left, side="right") / ens.N
    g0 = np.interp(left, edges, cdf) - emp
    g1 = np.interp(right, edges, cdf) - emp
    width = right - left
    same_sign = g0 * g1 >= 0
    magnitude = np.abs(g0) + np.abs(g1)
    crossing = np.divide(g0**2 + g1**2, 2.0 * magnitude, out=np.zeros_like(magnitude), where=magnitude > 0)
    return float(np.sum(width * np.where(same_sign, 0.5 * magnitude, crossing)))


def w1_between_samples(x, y) -> float:
    """W1 between two empirical measures on the line."""
    x = x.positions[:, 0] if isinstance(x, ParticleEnsemble) else np.ravel(x)
    y = y.positions[:, 0] if isinstance(y, ParticleEnsemble) else np.ravel(y)
    return float(stats.wasserstein_distance(x, y))


def l1_distance(a: ScalarField, b: ScalarField) -> float:
    """sum |a - b| h^d on a shared grid."""
    if a.grid != b.grid:
        raise ValueError("fields live on different grids")
    return l1_norm(a - b)


def ensemble_distance(ens: ParticleEnsemble, field: ScalarField) -> tuple[str, float]:
    """Acceptance metric of one snapshot: ("w1", W1) in 1D, ("l1", L1 of the histogram) in 2D."""
    if field.grid.d == 1:
        return "w1", w1_distance_1d(ens, field)
    return "l1", l1_distance(histogram_density(ens, field.grid), field)


def expected_sampling_l1(field: ScalarField, N: int) -> float:
    """Mean histogram L1 distance of N independent draws from ``field`` to its cell masses.

    Cell counts are Bin(N, p_i); their mean absolute deviation has the closed form
    2 (k + 1)(1 - p) P(X = k + 1) with k = floor(N p).
    """
    weights = np.clip(field.values, 0.0, None).ravel()
    total = float(np.sum(weights))
    if N <= 0 or total <= 0:
        return 0.0
    probs = weights / total
    k = np.floor(N * probs)
    deviation = 2.0 * (k + 1.0) * (1.0 - probs) * stats.binom.pmf(k + 1.0, N, probs)
    return float(np.sum(deviation) / N)


def effective_count(ens: ParticleEnsemble, grid: Grid) -> int:
    """Particles inside the box."""
    if ens.N == 0:
        return 0
    return int(np.sum(np.max(np.abs(ens.positions), axis=1) <= grid.L))
