"""Reference solutions: the Barenblatt source solution and support-law calibration.

The self-similar source solution of du/dt = div(|grad u|^(p-2) grad u) has the form

    B(t, x) = M t^(-d beta) G(x t^(-beta)),   G(xi) = (C1 - q |xi|^(p/(p-1)))_+^((p-1)/(p-2)),

with beta = 1 / (d(p-2) + p). The profile constant ``q`` is found numerically from
the radial flux balance |G'|^(p-2) G' = -beta r G, and ``C1`` from the unit-mass
condition by one-dimensional quadrature. Mass M enters through the scaling
u_M(t, x) = M u_1(M^(p-2) t, x).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Protocol

import numpy as np
from scipy import integrate, optimize, special

from app.models.experiment_schema import support_exponent
from app.services.grid import Grid, ScalarField
from app.services.prox_solver import apply_A

logger = logging.getLogger(__name__)


def sphere_area(d: int) -> float:
    """Surface measure of the unit sphere in R^d (2 for d = 1)."""
    return 2.0 * math.pi ** (d / 2.0) / special.gamma(d / 2.0)


def ball_volume(radius: float, d: int) -> float:
    return math.pi ** (d / 2.0) / special.gamma(d / 2.0 + 1.0) * radius**d


def _profile(r: np.ndarray, q: float, c1: float, p: float) -> np.ndarray:
    core = np.maximum(c1 - q * np.asarray(r) ** (p / (p - 1.0)), 0.0)
    return core ** ((p - 1.0) / (p - 2.0))


def _profile_slope(r: float, q: float, c1: float, p: float) -> float:
    core = max(c1 - q * r ** (p / (p - 1.0)), 0.0)
    return -(p - 1.0) / (p - 2.0) * core ** (1.0 / (p - 2.0)) * q * p / (p - 1.0) * r ** (1.0 / (p - 1.0))


def flux_balance_gap(q: float, p: float, d: int) -> float:
    """|G'|^(p-1) - beta r G at half the free-boundary radius of the C1 = 1 profile."""
    beta = support_exponent(p, d)
    r = 0.5 * q ** (-(p - 1.0) / p)
    return abs(_profile_slope(r, q, 1.0, p)) ** (p - 1.0) - beta * r * float(_profile(r, q, 1.0, p))


def solve_profile_coefficient(p: float, d: int) -> float:
    """Root of the flux balance in q (the gap is increasing in q)."""
    return optimize.brentq(flux_balance_gap, 1e-10, 1e4, args=(p, d), xtol=1e-15, rtol=1e-14)


def normalizing_constant(q: float, p: float, d: int) -> float:
    """C1 giving the profile unit mass.

    With r = (C/q)^((p-1)/p) s the mass scales as C^(m + d(p-1)/p) q^(-d(p-1)/p) I,
    where I is a one-dimensional integral over s in [0, 1].
    """
    gamma = p / (p - 1.0)
    exponent = (p - 1.0) / (p - 2.0)
    shape_integral, _ = integrate.quad(lambda s: (1.0 - s**gamma) ** exponent * s ** (d - 1), 0.0, 1.0, epsabs=1e-14, epsrel=1e-13)
    unit_mass = sphere_area(d) * q ** (-d / gamma) * shape_integral
    return unit_mass ** (-1.0 / (exponent + d / gamma))


class SelfSimilarProfile(Protocol):
    p: float

    def radial(self, t: float, r: np.ndarray) -> np.ndarray: ...

    def free_boundary(self, t: float) -> float: ...


@dataclass(frozen=True)
class BarenblattProfile:
    """Source solution with mass ``mass``; ``k = d beta`` is the amplitude's time exponent."""

    p: float
    d: int
    q: float
    C1: float
    mass: float = 1.0

    @classmethod
    def calibrate(cls, p: float, d: int, mass: float = 1.0) -> BarenblattProfile:
        q = solve_profile_coefficient(p, d)
        return cls(p=p, d=d, q=q, C1=normalizing_constant(q, p, d), mass=mass)

    @property
    def beta(self) -> float:
        return support_exponent(self.p, self.d)

    @property
    def k(self) -> float:
        return self.d * self.beta

    @property
    def c_fb(self) -> float:
        """Free-boundary radius of the unit-mass profile at t = 1."""
        return (self.C1 / self.q) ** ((self.p - 1.0) / self.p)

    def with_q(self, q: float) -> BarenblattProfile:
        """Same ansatz with another profile constant, renormalized to the same mass."""
        return replace(self, q=q, C1=normalizing_constant(q, self.p, self.d))

    def _clock(self, t):
        return self.mass ** (self.p - 2.0) * np.asarray(t, dtype=float)

    def radial(self, t: float, r: np.ndarray) -> np.ndarray:
        """B as a function of the distance r = |x| to the origin."""
        if np.any(np.asarray(t) <= 0):
            raise ValueError("t must be positive")
        s = self._clock(t)
        xi = np.asarray(r, dtype=float) * s ** (-self.beta)
        return self.mass * s ** (-self.k) * _profile(xi, self.q, self.C1, self.p)

    def value(self, t: float, x: np.ndarray) -> np.ndarray:
        """B(t, x) for points of shape (..., d); plain arrays are read as 1D coordinates."""
        x = np.asarray(x, dtype=float)
        if self.d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            return self.radial(t, np.abs(x))
        return self.radial(t, np.linalg.norm(x, axis=-1))

    __call__ = value

    def free_boundary(self, t: float) -> float:
        return float(self.c_fb * self._clock(t) ** self.beta)

    def field(self, grid: Grid, t: float) -> ScalarField:
        return ScalarField(grid, self.radial(t, grid.radius))

    def constants(self) -> dict:
        return {"p": self.p, "d": self.d, "q": self.q, "C1": self.C1, "c_fb": self.c_fb}


@dataclass(frozen=True)
class SelfSimilarBox:
    """Mass-one indicator of the Barenblatt support, rescaled in time; not a solution."""

    profile: BarenblattProfile

    @property
    def p(self) -> float:
        return self.profile.p

    def radial(self, t: float, r: np.ndarray) -> np.ndarray:
        radius = self.profile.free_boundary(t)
        return np.where(np.asarray(r) <= radius, 1.0 / ball_volume(radius, self.profile.d), 0.0)

    def free_boundary(self, t: float) -> float:
        return self.profile.free_boundary(t)


def pde_residual(
    profile: SelfSimilarProfile,
    t: float,
    grid: Grid,
    inner: float = 0.2,
    outer: float = 0.8,
    margin_cells: int = 5,
    time_step: float | None = None,
) -> float:
    """sup |dB/dt + A B| over cells with inner r(t) <= |x| <= outer r(t), >= 5h from the front.

    The time derivative is a central difference; A is the grid p-Laplacian with
    delta = 0. The origin is excluded because |xi|^(p/(p-1)) is not C^2 there.
    """
    if t <= 0:
        raise ValueError("t must be bounded away from 0")
    tau = time_step or 1e-4 * t
    radius = profile.free_boundary(t)
    r = grid.radius
    mask = (r >= inner * radius) & (r <= outer * radius) & (r <= radius - margin_cells * grid.h)
    if not np.any(mask):
        raise ValueError("grid too coarse to sample the interior of the support")
    current = ScalarField(grid, profile.radial(t, r))
    dudt = (profile.radial(t + tau, r) - profile.radial(t - tau, r)) / (2.0 * tau)
    residual = dudt + apply_A(current, profile.p).values
    return float(np.max(np.abs(residual[mask])))


def validate_profile(profile: BarenblattProfile, t: float = 1.0, L: float | None = None, n: int = 128) -> bool:
    """True when the residual shrinks by a factor >= 3 from n to 2n cells."""
    L = L or 1.5 * profile.free_boundary(t)
    coarse = pde_residual(profile, t, Grid(profile.d, n, L))
    fine = pde_residual(profile, t, Grid(profile.d, 2 * n, L))
    ok = fine * 3.0 <= coarse
    if not ok:
        logger.warning("Barenblatt oracle unavailable for p=%s, d=%s (residual %.3e -> %.3e)", profile.p, profile.d, coarse, fine)
    return ok


@dataclass(frozen=True)
class SupportRun:
    """Measured support radii of one run against the clock t0 + t of the support law."""

    p: float
    d: int
    mass: float
    times: tuple[float, ...]
    radii: tuple[float, ...]

    @classmethod
    def from_profile(cls, profile: BarenblattProfile, times) -> SupportRun:
        times = tuple(float(t) for t in times)
        return cls(profile.p, profile.d, profile.mass, times, tuple(profile.free_boundary(t) for t in times))


def calibrate_support_constant(runs: list[SupportRun], headroom: float = 1.2) -> float:
    """max over runs of radius(t) / (t^beta |u0|_1^((p-2) beta)), times ``headroom``.

    Raises:
        ValueError: With fewer than two runs or when they share both p and time grid.
    """
    if len(runs) < 2:
        raise ValueError("calibration needs at least two runs")
    if len({(run.p, run.times) for run in runs}) < 2:
        raise ValueError("calibration runs must differ in p or in their time grid")
    ratios = []
    for run in runs:
        beta = support_exponent(run.p, run.d)
        scale = run.mass ** ((run.p - 2.0) * beta)
        ratios.extend(r / (t**beta * scale) for t, r in zip(run.times, run.radii) if t > 0)
    constant = headroom * max(ratios)
    logger.info("Calibrated support constant %.6g from %d runs", constant, len(runs))
    return constant


def fit_power_law(times, values) -> float:
    """Least-squares slope of log(values) against log(times)."""
    times, values = np.asarray(times, dtype=float), np.asarray(values, dtype=float)
    keep = (times > 0) & (values > 0)
    if keep.sum() < 2:
        raise ValueError("need at least two positive samples")
    slope, _ = np.polyfit(np.log(times[keep]), np.log(values[keep]), 1)
    return float(slope)


def oracle_entry(
    p: float, d: int, times=(0.5, 1.0, 2.0, 4.0, 8.0), headroom: float = 1.2, validate: bool = True
) -> dict:
    """Constants for ``oracle_constants.json``: {p, d, q, C1, c_fb, C_support, available}."""
    profile = BarenblattProfile.calibrate(p, d)
    runs = [
        SupportRun.from_profile(profile, times),
        SupportRun.from_profile(replace(profile, mass=2.0), times[::2]),
    ]
    entry = profile.constants()
    entry["C_support"] = calibrate_support_constant(runs, headroom)
    entry["available"] = validate_profile(profile) if validate else True
    return entry
