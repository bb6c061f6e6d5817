"""Backward Euler evolution of the p-Laplace flow as a sequence of proximal steps.

Every step solves ``v + lam * A v = f`` with

    A v = -div((|grad v|^2 + delta^2)^((p-2)/2) grad v) - epsilon * lap v,

which is the optimality condition of the strictly convex problem

    min_v  1/2 |v - f|_2^2 + lam * Phi(v).

The discrete energy sums (|g|^2 + delta^2)^(p/2) over the 2^d sub-cells of every
cell, each sub-cell using the interior faces on its side. Its L2 gradient is the
divergence of a face flux, so the scheme conserves mass exactly and ``A`` is the
exact subgradient of ``Phi`` on the grid.
"""

from __future__ import annotations

import logging
import math
import warnings
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg
from tenacity import Retrying, before_sleep_log, retry_if_exception_type, stop_after_attempt

from app.exceptions import NonConvergence
from app.models.experiment_schema import ProxConfig, Problem
from app.services.grid import (
    Grid,
    ScalarField,
    divergence,
    gradient,
    l1_norm,
    l2_norm,
    laplacian,
    lp_gradient_energy,
    mass,
    sup_norm,
    support_radius,
)

logger = logging.getLogger(__name__)

# Relative slack under which a merit increase is attributed to rounding.
MERIT_ROUNDOFF = 64 * np.finfo(float).eps
ARMIJO = 1e-4
MIN_STEP = 1e-10


def flux(g: np.ndarray, p: float, delta: float) -> np.ndarray:
    """F(g) = (|g|^2 + delta^2)^((p-2)/2) g for a (d, ...) stack of gradient vectors."""
    mobility = (np.sum(g**2, axis=0) + delta**2) ** ((p - 2.0) / 2.0)
    return mobility * g


def flux_jacobian(g: np.ndarray, p: float, delta: float) -> np.ndarray:
    """D_j F_i = (p-2)(|g|^2+delta^2)^((p-4)/2) g_i g_j + delta_ij (|g|^2+delta^2)^((p-2)/2).

    Returns a (d, d, ...) array. Where |g|^2 + delta^2 vanishes the rank-one part is
    taken as zero (its limit for p >= 4, and the Newton matrix stays SPD for p < 4).
    """
    s = np.sum(g**2, axis=0) + delta**2
    base = s ** ((p - 2.0) / 2.0)
    positive = s > 0
    outer = np.where(positive, (p - 2.0) * np.where(positive, s, 1.0) ** ((p - 4.0) / 2.0), 0.0)
    d = g.shape[0]
    jac = np.empty((d, d) + g.shape[1:])
    for i in range(d):
        for j in range(d):
            jac[i, j] = outer * g[i] * g[j] + (base if i == j else 0.0)
    return jac


def face_flux(field: ScalarField, p: float, delta: float) -> tuple[np.ndarray, ...]:
    """Face fluxes of the p-Laplacian; boundary faces carry zero flux.

    Each interior face averages the flux of the 2^d sub-cells that touch it. In one
    dimension this is exactly F(g_face).
    """
    grid = field.grid
    grad = gradient(field)
    faces = [np.zeros(grid.face_shape(a)) for a in range(grid.d)]
    for sides in grid.quadrants():
        contribution = flux(grad.quadrant(sides), p, delta)
        for a in range(grid.d):
            index = [slice(None)] * grid.d
            index[a] = slice(sides[a], sides[a] + grid.n)
            faces[a][tuple(index)] += contribution[a]
    scale = 1.0 / 2**grid.d
    return tuple(face * scale for face in faces)


def apply_A(field: ScalarField, p: float, epsilon: float = 0.0, delta: float = 0.0) -> ScalarField:
    """A_eps u = -div(F(grad u)) - eps * lap u, assembled from face fluxes."""
    result = -1.0 * divergence(face_flux(field, p, delta), field.grid)
    if epsilon:
        result = result - epsilon * laplacian(field)
    return result


def regularized_energy(field: ScalarField, p: float, epsilon: float, delta: float) -> float:
    """Phi_eps(u) = Phi_delta(u) + eps/2 |grad u|_2^2, whose L2 gradient is apply_A."""
    energy = lp_gradient_energy(field, p, delta)
    if epsilon:
        faces = gradient(field).interior_faces()
        energy += 0.5 * epsilon * sum(np.sum(f**2) for f in faces) * field.grid.cell_volume
    return energy


def jacobian_matrix(field: ScalarField, p: float, epsilon: float, delta: float) -> sparse.csr_matrix:
    """Sparse Jacobian of ``apply_A`` at ``field``: (1/2^d) sum_q Q_q^T DF(g_q) Q_q - eps lap."""
    grid = field.grid
    grad = gradient(field)
    jac = sparse.csr_matrix((grid.size, grid.size))
    for sides, ops in grid.quadrant_operators.items():
        dflux = flux_jacobian(grad.quadrant(sides), p, delta)
        for a in range(grid.d):
            for b in range(grid.d):
                jac = jac + ops[a].T @ sparse.diags(dflux[a, b].ravel()) @ ops[b]
    jac = jac / 2**grid.d
    if epsilon:
        jac = jac - epsilon * grid.laplacian_matrix
    return jac.tocsr()


def lagged_matrix(field: ScalarField, p: float, epsilon: float, delta: float) -> sparse.csr_matrix:
    """Linear operator with the mobility frozen at ``field`` (fixed-point iteration)."""
    grid = field.grid
    grad = gradient(field)
    mat = sparse.csr_matrix((grid.size, grid.size))
    for sides, ops in grid.quadrant_operators.items():
        g = grad.quadrant(sides)
        mobility = sparse.diags(((np.sum(g**2, axis=0) + delta**2) ** ((p - 2.0) / 2.0)).ravel())
        for a in range(grid.d):
            mat = mat + ops[a].T @ mobility @ ops[a]
    mat = mat / 2**grid.d
    if epsilon:
        mat = mat - epsilon * grid.laplacian_matrix
    return mat.tocsr()


@dataclass
class ProxResult:
    """Outcome of one proximal solve."""

    field: ScalarField
    residual: float
    iterations: int
    method: str
    merit_history: list[float] = field(default_factory=list)


class ProxSolver:
    """Resolvent (I + lam A_eps)^-1 for fixed p, epsilon and solver settings.

    Args:
        p (float): Exponent of the p-Laplacian.
        cfg (ProxConfig): Tolerance, iteration budgets, inner method and delta.
        epsilon (float): Viscosity of the regularized operator.
    """

    def __init__(self, p: float, cfg: ProxConfig, epsilon: float = 0.0):
        self.p = p
        self.cfg = cfg
        self.epsilon = epsilon
        self.delta = cfg.delta

    def apply(self, field: ScalarField) -> ScalarField:
        return apply_A(field, self.p, self.epsilon, self.delta)

    def merit(self, v: ScalarField, f: ScalarField, lam: float) -> float:
        """J(v) = 1/2 |v - f|_2^2 + lam Phi_eps(v)."""
        diff = v - f
        return 0.5 * l2_norm(diff) ** 2 + lam * regularized_energy(v, self.p, self.epsilon, self.delta)

    def residual(self, v: ScalarField, f: ScalarField, lam: float) -> ScalarField:
        return v - f + lam * self.apply(v)

    def relative_residual(self, v: ScalarField, f: ScalarField, lam: float) -> float:
        scale = l2_norm(f)
        res = l2_norm(self.residual(v, f, lam))
        return res / scale if scale > 0 else res

    def _linear_solve(self, matrix: sparse.csr_matrix, rhs: np.ndarray) -> np.ndarray:
        if self.cfg.linear_solver == "cg":
            solution, info = splinalg.cg(matrix, rhs, rtol=1e-3 * self.cfg.tol, atol=0.0, maxiter=10 * rhs.size)
            if info != 0:
                logger.debug("CG stopped with info=%d, switching to direct solve", info)
                return splinalg.spsolve(matrix.tocsc(), rhs)
            return solution
        return splinalg.spsolve(matrix.tocsc(), rhs)

    def solve(self, f: ScalarField, lam: float) -> ProxResult:
        """Computes argmin 1/2 |v - f|^2 + lam Phi_eps(v).

        Raises:
            ValueError: If lam is not positive.
            NonConvergence: If neither Newton nor the fixed-point iteration reaches tol.
        """
        if lam <= 0:
            raise ValueError("lam must be positive")
        if l2_norm(f) == 0.0:
            return ProxResult(ScalarField.zeros(f.grid), 0.0, 0, "trivial", [0.0])
        if self.cfg.method == "newton":
            result = self._newton(f, lam)
            if result is not None:
                return result
            logger.warning("Newton stalled (lam=%.3e); falling back to the damped fixed-point iteration", lam)
        return self._fixed_point(f, lam)

    def _newton(self, f: ScalarField, lam: float) -> ProxResult | None:
        grid = f.grid
        identity = sparse.identity(grid.size, format="csr")
        v = f
        merit = self.merit(v, f, lam)
        history = [merit]
        res = self.residual(v, f, lam)
        rel = l2_norm(res) / l2_norm(f)
        for iteration in range(1, self.cfg.max_iter + 1):
            if rel <= self.cfg.tol:
                return ProxResult(v, rel, iteration - 1, "newton", history)
            matrix = identity + lam * jacobian_matrix(v, self.p, self.epsilon, self.delta)
            step = self._linear_solve(matrix, -res.values.ravel()).reshape(grid.shape)
            slope = float(np.sum(res.values * step) * grid.cell_volume)
            alpha = 1.0
            while alpha >= MIN_STEP:
                trial = v.with_values(v.values + alpha * step)
                trial_merit = self.merit(trial, f, lam)
                if trial_merit <= merit + ARMIJO * alpha * slope:
                    break
                if trial_merit - merit <= MERIT_ROUNDOFF * abs(merit):
                    trial_res = self.residual(trial, f, lam)
                    if l2_norm(trial_res) < l2_norm(res):
                        break
                alpha *= 0.5
            else:
                return None
            v, merit = trial, min(trial_merit, merit)
            history.append(trial_merit)
            res = self.residual(v, f, lam)
            rel = l2_norm(res) / l2_norm(f)
            logger.debug("Newton iteration %d: residual %.3e, step %.3g", iteration, rel, alpha)
        if rel <= self.cfg.tol:
            return ProxResult(v, rel, self.cfg.max_iter, "newton", history)
        return None

    def _fixed_point(self, f: ScalarField, lam: float) -> ProxResult:
        grid = f.grid
        identity = sparse.identity(grid.size, format="csr")
        damping = self.cfg.fixed_point_damping
        v = f
        history = [self.merit(v, f, lam)]
        rel = self.relative_residual(v, f, lam)
        for iteration in range(1, self.cfg.fixed_point_max_iter + 1):
            if rel <= self.cfg.tol:
                return ProxResult(v, rel, iteration - 1, "fixed-point", history)
            matrix = identity + lam * lagged_matrix(v, self.p, self.epsilon, self.delta)
            update = self._linear_solve(matrix, f.values.ravel()).reshape(grid.shape)
            v = v.with_values((1.0 - damping) * v.values + damping * update)
            history.append(self.merit(v, f, lam))
            rel = self.relative_residual(v, f, lam)
        if rel <= self.cfg.tol:
            return ProxResult(v, rel, self.cfg.fixed_point_max_iter, "fixed-point", history)
        raise NonConvergence(self.cfg.fixed_point_max_iter, rel)


def prox_step(
    f: ScalarField, lam: float, cfg: ProxConfig, p: float, epsilon: float = 0.0
) -> ScalarField:
    """(I + lam A_eps)^-1 f, i.e. the proximal map of lam * Phi_eps at f."""
    return ProxSolver(p, cfg, epsilon).solve(f, lam).field


@dataclass(frozen=True)
class StepDiagnostics:
    """Per-step monitors of a trajectory."""

    t: float
    mass: float
    l1: float
    l2: float
    sup: float
    phi: float
    support_radius: float
    residual: float
    iters: int
    min: float

    @classmethod
    def measure(
        cls, t: float, u: ScalarField, p: float, threshold: float, residual: float, iters: int
    ) -> StepDiagnostics:
        return cls(
            t=t,
            mass=mass(u),
            l1=l1_norm(u),
            l2=l2_norm(u),
            sup=sup_norm(u),
            phi=lp_gradient_energy(u, p),
            support_radius=support_radius(u, threshold),
            residual=residual,
            iters=iters,
            min=float(np.min(u.values)),
        )


@dataclass
class FlowTrajectory:
    """Time-indexed sequence of fields with per-step diagnostics.

    ``meta`` carries provenance used by the verifier (init type, Barenblatt start
    time ``t0``, initial support radius ``R``, calibrated ``c_support``).
    """

    grid: Grid
    p: float
    epsilon: float
    delta: float
    times: list[float]
    fields: list[ScalarField]
    diagnostics: list[StepDiagnostics]
    threshold: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.times and self.times[0] != 0.0:
            raise ValueError("trajectories start at t = 0")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("trajectory times must be strictly increasing")
        if not len(self.times) == len(self.fields) == len(self.diagnostics):
            raise ValueError("every step needs a field and diagnostics")

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def step_sizes(self) -> np.ndarray:
        return np.diff(np.asarray(self.times))

    @property
    def final(self) -> ScalarField:
        return self.fields[-1]

    def save(self, path) -> None:
        """Stores all fields and solver monitors in a compressed ``.npz`` archive."""
        np.savez_compressed(
            path,
            times=np.asarray(self.times),
            fields=np.stack([u.values for u in self.fields]),
            residuals=np.array([s.residual for s in self.diagnostics]),
            iters=np.array([s.iters for s in self.diagnostics]),
            grid=np.array([self.grid.d, self.grid.n, self.grid.L]),
            params=np.array([self.p, self.epsilon, self.delta, self.threshold]),
        )

    @classmethod
    def load(cls, path, meta: dict | None = None) -> FlowTrajectory:
        with np.load(path) as data:
            d, n, half_width = data["grid"]
            grid = Grid(int(d), int(n), float(half_width))
            p, epsilon, delta, threshold = (float(x) for x in data["params"])
            times = [float(t) for t in data["times"]]
            fields = [ScalarField(grid, values) for values in data["fields"]]
            residuals, iters = data["residuals"], data["iters"]
        diagnostics = [
            StepDiagnostics.measure(t, u, p, threshold, float(r), int(k))
            for t, u, r, k in zip(times, fields, residuals, iters)
        ]
        return cls(grid, p, epsilon, delta, times, fields, diagnostics, threshold, dict(meta or {}))


def _check_initial_datum(u0: ScalarField, prob: Problem) -> None:
    total = mass(u0)
    if np.min(u0.values) < 0:
        warnings.warn("u0 has negative values; the verifier's bounds assume u0 >= 0", stacklevel=3)
        logger.warning("u0 has negative values (min %.3e)", np.min(u0.values))
    if abs(total - 1.0) > 1e-6 and total != 0.0:
        logger.warning("u0 has mass %.6g instead of 1", total)
    outside = (u0.grid.radius > prob.R) & (u0.values != 0)
    if np.any(outside):
        logger.warning("u0 is nonzero outside B_R (R = %.4g)", prob.R)


def _advance(solver: ProxSolver, u: ScalarField, dt: float, step: int) -> ProxResult:
    """One time step; on NonConvergence retries with 2, 4, ... equal substeps."""
    for attempt in Retrying(
        stop=stop_after_attempt(solver.cfg.max_step_splits + 1),
        retry=retry_if_exception_type(NonConvergence),
        before_sleep=before_sleep_log(logger, logging.WARNING),
        reraise=True,
    ):
        with attempt:
            splits = 2 ** (attempt.retry_state.attempt_number - 1)
            if splits > 1:
                logger.warning("Step %d: splitting dt=%.3e into %d substeps", step, dt, splits)
            v, iterations = u, 0
            for _ in range(splits):
                result = solver.solve(v, dt / splits)
                v, iterations = result.field, iterations + result.iterations
            return ProxResult(v, result.residual, iterations, result.method, result.merit_history)
    raise AssertionError("unreachable")


def evolve(
    u0: ScalarField,
    prob: Problem,
    cfg: ProxConfig,
    threshold: float | None = None,
    on_step: Callable[[int, float, ScalarField], None] | None = None,
) -> FlowTrajectory:
    """Backward Euler trajectory u_{k+1} = prox_step(u_k, dt) over ceil(T/dt) steps.

    Nonnegativity is monitored, never enforced.

    Args:
        u0 (ScalarField): Initial datum, expected nonnegative with unit mass.
        prob (Problem): Exponent, viscosity, time step and horizon.
        cfg (ProxConfig): Solver settings (cfg.delta is the flux regularization).
        threshold (float | None): Support threshold; defaults to 1e-8 sup |u0|.
        on_step (Callable | None): Called with (k, t_k, u_k) after every step.

    Raises:
        NonConvergence: With the index of the failing step.
    """
    _check_initial_datum(u0, prob)
    if threshold is None:
        threshold = 1e-8 * sup_norm(u0) if sup_norm(u0) > 0 else 1e-300
    solver = ProxSolver(prob.p, cfg, prob.epsilon)
    times, fields = [0.0], [u0]
    diagnostics = [StepDiagnostics.measure(0.0, u0, prob.p, threshold, 0.0, 0)]
    if on_step:
        on_step(0, 0.0, u0)
    u, t = u0, 0.0
    for k in range(1, prob.n_steps + 1):
        dt = min(prob.dt, prob.T - t) if k == prob.n_steps else prob.dt
        try:
            result = _advance(solver, u, dt, k)
        except NonConvergence as e:
            raise NonConvergence(e.iterations, e.residual, step=k) from e
        u, t = result.field, k * prob.dt if k < prob.n_steps else prob.T
        times.append(t)
        fields.append(u)
        diagnostics.append(StepDiagnostics.measure(t, u, prob.p, threshold, result.residual, result.iterations))
        if on_step:
            on_step(k, t, u)
    logger.info(
        "Evolved %d steps to T=%.4g (p=%.3g, d=%d, n=%d); final mass %.12g",
        prob.n_steps, prob.T, prob.p, prob.d, prob.n, diagnostics[-1].mass,
    )
    return FlowTrajectory(u0.grid, prob.p, prob.epsilon, cfg.delta, times, fields, diagnostics, threshold)


def crandall_liggett(
    u0: ScalarField, t: float, n_steps: int, cfg: ProxConfig, p: float, epsilon: float = 0.0
) -> ScalarField:
    """(I + (t/n) A)^-n u0: evolve with the constant step t / n_steps.

    Failing resolvents are split like the steps of ``evolve``.

    Raises:
        NonConvergence: With the index of the failing step.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    solver = ProxSolver(p, cfg, epsilon)
    lam = t / n_steps
    u = u0
    for k in range(1, n_steps + 1):
        try:
            u = _advance(solver, u, lam, k).field
        except NonConvergence as e:
            raise NonConvergence(e.iterations, e.residual, step=k) from e
    return u


def default_delta(u0: ScalarField, factor: float = 1e-8) -> float:
    """delta = factor * max |grad u0| over the faces."""
    grad = gradient(u0)
    peak = max(float(np.max(np.abs(face))) for face in grad.faces) if grad.faces else 0.0
    return factor * peak if math.isfinite(peak) else 0.0
