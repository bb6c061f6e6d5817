"""Uniform cell-centred grids, discrete calculus and scalar field containers.

Cells are centred at x_i = -L + (i + 1/2) h on every axis. Face ``j`` of an axis
sits at -L + j h, so an axis carries ``n + 1`` faces, the first and last of them
on the box boundary. Fields are zero-extended outside the box.

``gradient`` and ``divergence`` are exact discrete adjoints:

    <gradient(u).faces, F> = -<u, divergence(F)>

with both inner products weighted by h^d. Summing ``divergence(F)`` over the box
telescopes to the boundary fluxes, so any flux vanishing on the boundary faces
conserves mass exactly.
"""

from __future__ import annotations

import itertools
import logging
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass, field
from functools import cached_property, reduce

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)

Sides = tuple[int, ...]


@dataclass(frozen=True)
class Grid:
    """Uniform Cartesian mesh of ``n`` cells per axis on [-L, L]^d."""

    d: int
    n: int
    L: float

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValueError(f"d must be 1 or 2, got {self.d}")
        if self.n < 2 or self.n % 2:
            raise ValueError(f"n must be a positive even integer, got {self.n}")
        if self.L <= 0:
            raise ValueError(f"L must be positive, got {self.L}")

    @property
    def h(self) -> float:
        return 2.0 * self.L / self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def size(self) -> int:
        return self.n**self.d

    @property
    def cell_volume(self) -> float:
        return self.h**self.d

    @cached_property
    def axis(self) -> np.ndarray:
        """Cell-centre coordinates of one axis."""
        return -self.L + (np.arange(self.n) + 0.5) * self.h

    @cached_property
    def edges(self) -> np.ndarray:
        """Face coordinates of one axis, boundary faces included."""
        return -self.L + np.arange(self.n + 1) * self.h

    @cached_property
    def mesh(self) -> tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*([self.axis] * self.d), indexing="ij"))

    @cached_property
    def points(self) -> np.ndarray:
        """Cell centres as an (n^d, d) array in row-major order."""
        return np.stack([m.ravel() for m in self.mesh], axis=1)

    @cached_property
    def radius(self) -> np.ndarray:
        """Euclidean distance of every cell centre to the origin."""
        return np.sqrt(sum(m**2 for m in self.mesh))

    def face_shape(self, axis: int) -> tuple[int, ...]:
        shape = list(self.shape)
        shape[axis] += 1
        return tuple(shape)

    def quadrants(self) -> Iterator[Sides]:
        """Sub-cell corners: one side (0 = lower face, 1 = upper face) per axis."""
        return itertools.product((0, 1), repeat=self.d)

    def _expand(self, axis: int, matrix: sparse.spmatrix) -> sparse.csr_matrix:
        ops = [sparse.identity(self.n, format="csr")] * self.d
        ops[axis] = matrix
        return reduce(lambda a, b: sparse.kron(a, b, format="csr"), ops).tocsr()

    def difference_matrix(self, axis: int, interior: bool = True) -> sparse.csr_matrix:
        """Sparse forward difference from cells to the faces of ``axis``.

        With ``interior`` the two boundary-face rows are dropped to zero, which is
        the no-flux closure used by every flux assembly.
        """
        n, h = self.n, self.h
        rows = np.arange(n + 1)
        plus = sparse.coo_matrix((np.full(n, 1.0 / h), (rows[:n], np.arange(n))), shape=(n + 1, n))
        minus = sparse.coo_matrix(
            (np.full(n, -1.0 / h), (rows[1:], np.arange(n))), shape=(n + 1, n)
        )
        d1 = (plus + minus).tolil()
        if interior:
            d1[0, :] = 0.0
            d1[n, :] = 0.0
        return self._expand(axis, d1.tocsr())

    def selection_matrix(self, axis: int, side: int) -> sparse.csr_matrix:
        """Picks, for every cell, its lower (side 0) or upper (side 1) face on ``axis``."""
        n = self.n
        select = sparse.coo_matrix(
            (np.ones(n), (np.arange(n), np.arange(n) + side)), shape=(n, n + 1)
        )
        return self._expand(axis, select.tocsr())

    @cached_property
    def quadrant_operators(self) -> dict[Sides, list[sparse.csr_matrix]]:
        """Per quadrant, the d sparse maps u -> gradient component seen by that quadrant."""
        interior = [self.difference_matrix(a, interior=True) for a in range(self.d)]
        return {
            sides: [self.selection_matrix(a, sides[a]) @ interior[a] for a in range(self.d)]
            for sides in self.quadrants()
        }

    @cached_property
    def laplacian_matrix(self) -> sparse.csr_matrix:
        """No-flux discrete Laplacian, equal to divergence(interior gradient)."""
        lap = sparse.csr_matrix((self.size, self.size))
        for a in range(self.d):
            diff = self.difference_matrix(a, interior=True)
            lap = lap - diff.T @ diff
        return lap.tocsr()


@dataclass(frozen=True)
class ScalarField:
    """Immutable grid sample of a function, one value per cell."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.size != self.grid.size:
            raise ValueError(f"expected {self.grid.size} values, got {values.size}")
        values = values.reshape(self.grid.shape)
        if not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, grid: Grid) -> ScalarField:
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable[..., np.ndarray]) -> ScalarField:
        """Samples ``fn(x)`` (d = 1) or ``fn(x, y)`` (d = 2) at the cell centres."""
        return cls(grid, fn(*grid.mesh))

    def with_values(self, values: np.ndarray) -> ScalarField:
        return ScalarField(self.grid, values)

    def __add__(self, other: ScalarField) -> ScalarField:
        return self.with_values(self.values + other.values)

    def __sub__(self, other: ScalarField) -> ScalarField:
        return self.with_values(self.values - other.values)

    def __mul__(self, scalar: float) -> ScalarField:
        return self.with_values(self.values * scalar)

    __rmul__ = __mul__


@dataclass(frozen=True)
class GradientField:
    """Forward-difference gradient.

    ``faces[a]`` holds the raw face values on axis ``a`` (shape ``grid.face_shape(a)``),
    ``centers`` the (d, *grid.shape) average of the two faces adjacent to each cell.
    """

    grid: Grid
    faces: tuple[np.ndarray, ...]
    centers: np.ndarray = field(repr=False)

    def interior_faces(self) -> tuple[np.ndarray, ...]:
        """Face values with the boundary faces set to zero."""
        out = []
        for a, face in enumerate(self.faces):
            face = face.copy()
            index = [slice(None)] * self.grid.d
            for j in (0, -1):
                index[a] = j
                face[tuple(index)] = 0.0
            out.append(face)
        return tuple(out)

    def quadrant(self, sides: Sides) -> np.ndarray:
        """Gradient vector seen by one sub-cell, built from interior faces."""
        n = self.grid.n
        return np.stack(
            [
                np.take(face, np.arange(sides[a], sides[a] + n), axis=a)
                for a, face in enumerate(self.interior_faces())
            ]
        )

    def magnitude_squared(self) -> np.ndarray:
        """|grad u|^2 at the cell centres (average faces first, then square)."""
        return np.sum(self.centers**2, axis=0)


def gradient(field: ScalarField) -> GradientField:
    """Forward differences (u_{i+1} - u_i) / h on every face, zero-extended outside the box."""
    grid = field.grid
    faces = []
    centers = []
    for a in range(grid.d):
        pad = [(0, 0)] * grid.d
        pad[a] = (1, 1)
        face = np.diff(np.pad(field.values, pad), axis=a) / grid.h
        faces.append(face)
        lower = np.take(face, np.arange(grid.n), axis=a)
        upper = np.take(face, np.arange(1, grid.n + 1), axis=a)
        centers.append(0.5 * (lower + upper))
    return GradientField(grid, tuple(faces), np.stack(centers))


def divergence(flux: Sequence[np.ndarray], grid: Grid) -> ScalarField:
    """(F_{i+1/2} - F_{i-1/2}) / h summed over axes."""
    total = np.zeros(grid.shape)
    for a, face in enumerate(flux):
        if face.shape != grid.face_shape(a):
            raise ValueError(f"flux on axis {a} has shape {face.shape}, expected {grid.face_shape(a)}")
        total += np.diff(face, axis=a) / grid.h
    return ScalarField(grid, total)


def laplacian(field: ScalarField) -> ScalarField:
    """No-flux discrete Laplacian: divergence of the interior face gradient."""
    return divergence(gradient(field).interior_faces(), field.grid)


def face_inner(a: Sequence[np.ndarray], b: Sequence[np.ndarray], grid: Grid) -> float:
    return float(sum(np.sum(x * y) for x, y in zip(a, b)) * grid.cell_volume)


def cell_inner(a: ScalarField, b: ScalarField) -> float:
    return float(np.sum(a.values * b.values) * a.grid.cell_volume)


def mass(field: ScalarField) -> float:
    return float(np.sum(field.values) * field.grid.cell_volume)


def l1_norm(field: ScalarField) -> float:
    return float(np.sum(np.abs(field.values)) * field.grid.cell_volume)


def l2_norm(field: ScalarField) -> float:
    return float(np.sqrt(np.sum(field.values**2) * field.grid.cell_volume))


def sup_norm(field: ScalarField) -> float:
    return float(np.max(np.abs(field.values)))


def gradient_l2_norm(field: ScalarField) -> float:
    """|grad u|_2 over interior faces."""
    faces = gradient(field).interior_faces()
    return float(np.sqrt(face_inner(faces, faces, field.grid)))


def lp_gradient_energy(field: ScalarField, p: float, delta: float = 0.0) -> float:
    """Phi(u) = (1/p) sum over sub-cells of (|g|^2 + delta^2)^(p/2) - delta^p.

    Each cell is split into 2^d sub-cells; a sub-cell sees the interior faces on its
    own side. In one dimension this is (1/p) sum_faces h |g_face|^p.
    """
    grad = gradient(field)
    grid = field.grid
    weight = grid.cell_volume / 2**grid.d
    total = 0.0
    for sides in grid.quadrants():
        g = grad.quadrant(sides)
        total += np.sum((np.sum(g**2, axis=0) + delta**2) ** (p / 2.0) - delta**p)
    return float(total * weight / p)


def support_radius(field: ScalarField, threshold: float) -> float:
    """Largest |x| over cells whose |value| exceeds ``threshold``; 0 if none."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    mask = np.abs(field.values) > threshold
    if not np.any(mask):
        return 0.0
    return float(np.max(field.grid.radius[mask]))


def gradient_power_integral(field: ScalarField, power: float) -> float:
    """Sub-cell quadrature of |grad u|^power, consistent with ``lp_gradient_energy``."""
    grad = gradient(field)
    grid = field.grid
    total = 0.0
    for sides in grid.quadrants():
        total += np.sum(np.sum(grad.quadrant(sides) ** 2, axis=0) ** (power / 2.0))
    return float(total * grid.cell_volume / 2**grid.d)
