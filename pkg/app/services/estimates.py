"""Quantitative checks of the a priori estimates on a finished trajectory.

Each check computes its left side by quadrature over the stored fields and its
right side from the closed-form bound, then records both with the relation and
the tolerance that decide it. Time integrals use left-endpoint sums starting at
t = 0, except the energy identity, which mirrors backward Euler's right-endpoint
dissipation.
"""

from __future__ import annotations

import logging
import math
import sys

import numpy as np

from app.exceptions import MissingCalibration
from app.models.experiment_schema import support_exponent
from app.models.report_schema import ComparisonEntry, ComparisonReport, EstimateCheck, EstimateReport
from app.services.fp_coefficients import drift_coeff, mobility
from app.services.grid import (
    ScalarField,
    gradient,
    gradient_l2_norm,
    gradient_power_integral,
    l1_norm,
    l2_norm,
    lp_gradient_energy,
    mass,
    support_radius,
)
from app.services.marginals import effective_count, ensemble_distance, expected_sampling_l1
from app.services.oracles import ball_volume, fit_power_law
from app.services.particles import SimulationResult
from app.services.prox_solver import FlowTrajectory

logger = logging.getLogger(__name__)

DEFAULT_SETTINGS = {
    "mass_rtol": 1e-8,
    "bound_rtol": 1e-8,
    "grad_tol": 0.05,
    "energy_one_sided_atol": 1e-8,
    "energy_dt_constant": 10.0,
    "superposition_fraction": 0.05,
    "superposition_noise_factor": 1.5,
    "particle_radius_inflation": 1.1,
    "support_threshold": 1e-8,
}

# Right side of the integrability checks: any finite value passes.
FINITE_BOUND = sys.float_info.max


def _initial_mass(traj: FlowTrajectory) -> float:
    return l1_norm(traj.fields[0])


def check_energy_identity(
    traj: FlowTrajectory, dt_constant: float = 10.0, one_sided_atol: float = 1e-8
) -> list[EstimateCheck]:
    """1/2 |u_K|^2 + sum_k dt_k <A u_k, u_k> against 1/2 |u_0|^2.

    With epsilon = 0, <A u, u> = p Phi(u). The deficit equals the backward Euler
    dissipation 1/2 sum |u_k - u_{k-1}|^2, so the identity carries the tolerance
    ``dt_constant * dt * rhs`` and the one-sided inequality must hold at every step.
    """
    if traj.epsilon:
        logger.warning("Energy identity evaluated with epsilon=%g; the viscous term is included", traj.epsilon)
    rhs = 0.5 * l2_norm(traj.fields[0]) ** 2
    lhs = peak = rhs
    worst_step = 0
    dissipated = 0.0
    for k in range(1, len(traj.fields)):
        u = traj.fields[k]
        rate = traj.p * lp_gradient_energy(u, traj.p)
        if traj.epsilon:
            rate += traj.epsilon * gradient_l2_norm(u) ** 2
        dissipated += traj.step_sizes[k - 1] * rate
        lhs = 0.5 * l2_norm(u) ** 2 + dissipated
        if lhs > peak:
            peak, worst_step = lhs, k
    dt = float(np.max(traj.step_sizes)) if traj.n_steps else 0.0
    tolerance = dt_constant * dt * rhs
    identity = EstimateCheck.evaluate(
        "energy_identity",
        lhs,
        rhs,
        "eq_tol",
        "energy identity: 1/2|u(t)|^2 + int_0^t int |grad u|^p = 1/2|u0|^2",
        tolerance,
        dt=dt,
        dt_constant=dt_constant,
        residual=rhs - lhs,
    )
    dissipation = EstimateCheck.evaluate(
        "energy_dissipation",
        peak,
        rhs,
        "le",
        "energy identity, one-sided at every step",
        one_sided_atol,
        worst_step=worst_step,
    )
    return [identity, dissipation]


def check_conservation_and_bounds(
    traj: FlowTrajectory, mass_rtol: float = 1e-8, bound_rtol: float = 1e-8
) -> list[EstimateCheck]:
    """Mass drift, max principle, nonnegativity and L1 contraction over all steps."""
    u0 = traj.fields[0]
    m0, l1_0 = mass(u0), l1_norm(u0)
    sup0 = float(np.max(u0.values))
    masses = np.array([mass(u) for u in traj.fields])
    sups = np.array([np.max(u.values) for u in traj.fields])
    mins = np.array([np.min(u.values) for u in traj.fields])
    l1s = np.array([l1_norm(u) for u in traj.fields])
    drift = np.abs(masses - m0)
    return [
        EstimateCheck.evaluate(
            "mass_conservation",
            float(drift.max()),
            0.0,
            "eq_tol",
            "conservation of mass: int u(t) = int u0",
            mass_rtol * max(abs(m0), l1_0),
            worst_step=int(drift.argmax()),
        ),
        EstimateCheck.evaluate(
            "max_principle",
            float(sups.max()),
            sup0,
            "le",
            "L-infinity contraction: |u(t)|_inf <= |u0|_inf",
            bound_rtol * abs(sup0),
            worst_step=int(sups.argmax()),
        ),
        EstimateCheck.evaluate(
            "nonnegativity",
            float(max(-mins.min(), 0.0)),
            0.0,
            "le",
            "nonnegativity: u >= 0 a.e.",
            bound_rtol * abs(sup0),
            worst_step=int(mins.argmin()),
        ),
        EstimateCheck.evaluate(
            "l1_contraction",
            float(l1s.max()),
            l1_0,
            "le",
            "L1 contraction: |u(t)|_1 <= |u0|_1",
            bound_rtol * l1_0,
            worst_step=int(l1s.argmax()),
        ),
    ]


def check_gradient_sup_bound(traj: FlowTrajectory, grad_tol: float = 0.05) -> list[EstimateCheck]:
    """max_k |D_i u_k|_inf <= |D_i u_0|_inf (1 + grad_tol) for every axis i."""
    axes = "xy"
    peaks = np.array(
        [[float(np.max(np.abs(face))) for face in gradient(u).faces] for u in traj.fields]
    )
    checks = []
    for i in range(traj.grid.d):
        initial = peaks[0, i]
        lhs = float(peaks[:, i].max())
        checks.append(
            EstimateCheck.evaluate(
                f"gradient_sup_{axes[i]}",
                lhs,
                initial,
                "le",
                "gradient bound: |D_i u(t)|_inf <= |D_i u0|_inf",
                grad_tol * initial,
                overshoot=max(0.0, lhs / initial - 1.0) if initial > 0 else 0.0,
                worst_step=int(peaks[:, i].argmax()),
            )
        )
    return checks


def support_law(traj: FlowTrajectory, c_support: float, T: float) -> float:
    """R(T) = C T^beta |u0|_1^((p-2) beta)."""
    beta = support_exponent(traj.p, traj.grid.d)
    return c_support * T**beta * _initial_mass(traj) ** ((traj.p - 2.0) * beta)


def _left_sum(traj: FlowTrajectory, integrand) -> float:
    return float(sum(dt * integrand(u) for dt, u in zip(traj.step_sizes, traj.fields[:-1])))


def _mobility_gradient_energy(u: ScalarField, p: float) -> float:
    """int |grad |grad u|^(p/2)|^2 dx."""
    power = ScalarField(u.grid, gradient(u).magnitude_squared() ** (p / 4.0))
    return gradient_l2_norm(power) ** 2


def check_second_order(traj: FlowTrajectory, c_support: float | None, R: float) -> tuple[list[EstimateCheck], dict]:
    """Time-integrated second order bounds down to t = 0.

    mu(T, R) is the volume of the ball of radius 2R + R(T). The smaller
    variant with radius R(T) is returned alongside for logging.

    Raises:
        MissingCalibration: If no support constant is available.
    """
    if c_support is None:
        raise MissingCalibration(traj.p, traj.grid.d)
    p, d = traj.p, traj.grid.d
    T = traj.times[-1]
    u0 = traj.fields[0]
    radius = 2.0 * R + support_law(traj, c_support, T)
    mu = ball_volume(radius, d)
    mu_inner = ball_volume(support_law(traj, c_support, T), d)
    l2_0, grad_0 = l2_norm(u0), gradient_l2_norm(u0)

    mobility_integral = _left_sum(traj, lambda u: gradient_power_integral(u, p - 2.0))
    mobility_bound = (T * mu) ** (2.0 / p) * l2_0 ** (2.0 * (p - 2.0) / p)

    def mobility_rhs(volume: float) -> float:
        if grad_0 == 0:
            return 0.0
        return math.sqrt(d) * (p - 2.0) / 2.0 * (2.0 * T * volume) ** (2.0 / p) * l2_0 ** ((p - 4.0) / p) * grad_0

    second = _left_sum(traj, lambda u: _mobility_gradient_energy(u, p))
    second_order_bound = d * p**2 / 8.0 * grad_0**2

    variant = {"mu_support_ball": mu, "mu_growth_ball": mu_inner, "mobility_rhs_growth_ball": mobility_rhs(mu_inner)}
    logger.info(
        "Second order bound with mu=%.6g (ball 2R+R(T)); ball R(T) gives mu=%.6g, rhs=%.6g",
        mu, mu_inner, variant["mobility_rhs_growth_ball"],
    )
    checks = [
        EstimateCheck.evaluate(
            "mobility_integral",
            mobility_integral,
            mobility_bound,
            "le",
            "int_0^T int |grad u|^(p-2) <= (T mu)^(2/p) |u0|_2^(2(p-2)/p)",
            mu=mu,
        ),
        EstimateCheck.evaluate(
            "mobility_integral_gradient_form",
            mobility_integral,
            mobility_rhs(mu),
            "le",
            "int_0^T int |grad u|^(p-2) <= (sqrt(d)(p-2)/2)(2T mu)^(2/p) |u0|_2^((p-4)/p) |grad u0|_2",
            mu=mu,
            requires_p_ge_4=True,
        ),
        EstimateCheck.evaluate(
            "second_order_energy",
            second,
            second_order_bound,
            "le",
            "int_0^T int |grad |grad u|^(p/2)|^2 <= (d p^2 / 8) |grad u0|_2^2",
        ),
    ]
    return checks, variant


def check_support_growth(
    traj: FlowTrajectory,
    c_support: float | None,
    R: float,
    threshold: float | None = None,
    t0: float | None = None,
) -> list[EstimateCheck]:
    """Containment in B_{2R + R(t)} at every step, plus the growth exponent for Barenblatt runs.

    ``t0`` is the profile time of a Barenblatt initial datum; radii are then fitted
    against t0 + t after dropping the steps whose measured radius has not moved. The
    fit needs (t0 + T) / t0 >= 10.

    Raises:
        MissingCalibration: If no support constant is available.
    """
    if c_support is None:
        raise MissingCalibration(traj.p, traj.grid.d)
    threshold = threshold or traj.threshold
    radii = np.array([support_radius(u, threshold) for u in traj.fields])
    bounds = np.array([2.0 * R + support_law(traj, c_support, t) for t in traj.times])
    worst = int(np.argmax(radii - bounds))
    checks = [
        EstimateCheck.evaluate(
            "support_containment",
            float(radii[worst]),
            float(bounds[worst]),
            "le",
            "finite speed of propagation: support u(t) in B_{2R+R(t)}",
            worst_step=worst,
            c_support=c_support,
        )
    ]
    if t0 is None:
        return checks
    beta = support_exponent(traj.p, traj.grid.d)
    clock = t0 + np.asarray(traj.times)
    moved = radii > radii[0]
    moved[0] = True
    span = clock[-1] / clock[0]
    if span < 10:
        logger.warning("Support fit needs a decade of time, run spans %.3g; exponent check skipped", math.log10(span))
        return checks
    try:
        slope = fit_power_law(clock[moved], radii[moved])
    except ValueError:
        logger.warning("Support radius never moved; exponent check skipped")
        return checks
    checks.append(
        EstimateCheck.evaluate(
            "support_exponent",
            slope,
            beta,
            "eq_tol",
            "support radius grows like t^(1/(d(p-2)+p))",
            0.1 * beta,
            decades=math.log10(span),
            samples=int(moved.sum()),
        )
    )
    return checks


def check_integrability(traj: FlowTrajectory) -> list[EstimateCheck]:
    """int int |grad u|^(p-2) u and int int |grad(|grad u|^(p-2))| u are finite."""
    grid = traj.grid

    def diffusion_weight(u: ScalarField) -> float:
        return float(np.sum(mobility(u, traj.p) * u.values) * grid.cell_volume)

    def drift_weight(u: ScalarField) -> float:
        drift = np.sqrt(np.sum(drift_coeff(u, traj.p) ** 2, axis=0))
        return float(np.sum(drift * np.abs(u.values)) * grid.cell_volume)

    checks = []
    for name, fn, anchor in (
        ("diffusion_integrability", diffusion_weight, "int_0^T int |grad u|^(p-2) u < infinity"),
        ("drift_integrability", drift_weight, "int_0^T int |grad(|grad u|^(p-2))| u < infinity"),
    ):
        value = _left_sum(traj, fn)
        finite = math.isfinite(value)
        checks.append(
            EstimateCheck.evaluate(
                name, value if finite else FINITE_BOUND, FINITE_BOUND if finite else 0.0, "le", anchor, finite=finite
            )
        )
    return checks


def compare_ensembles(
    traj: FlowTrajectory,
    result: SimulationResult,
    label: str = "",
    coefficients: tuple[float, float, float] | None = None,
    fraction: float = 0.05,
    noise_factor: float = 1.5,
) -> ComparisonReport:
    """Distance of every stored snapshot to the PDE density at the same time."""
    entries = []
    for snap in result.snapshots:
        if snap.ensemble.N == 0:
            continue
        field = traj.fields[snap.k]
        metric, distance = ensemble_distance(snap.ensemble, field)
        entries.append(
            ComparisonEntry(t=snap.t, metric=metric, distance=distance, N_effective=effective_count(snap.ensemble, traj.grid))
        )
    diameter = 2.0 * support_radius(traj.final, traj.threshold)
    return ComparisonReport(
        label=label,
        N=result.N,
        seed=result.seed,
        substeps=result.substeps,
        entries=entries,
        terminal_tolerance=superposition_tolerance(traj, result.N, diameter, coefficients, fraction, noise_factor),
        support_diameter=diameter,
    )


def superposition_tolerance(
    traj: FlowTrajectory,
    N: int,
    diameter: float,
    coefficients: tuple[float, float, float] | None = None,
    fraction: float = 0.05,
    noise_factor: float = 1.5,
) -> float:
    """Budget of the terminal particle-to-PDE distance.

    With fitted coefficients the budget is a/sqrt(N) + b dt + c h in either
    dimension. Otherwise W1 (a length) gets ``fraction`` of the support diameter,
    and the dimensionless histogram L1 gets ``noise_factor`` times the mean L1
    distance that sampling u(T) with N particles alone produces.
    """
    if coefficients is not None:
        a, b, c = coefficients
        dt = float(np.max(traj.step_sizes)) if traj.n_steps else 0.0
        return a / math.sqrt(max(N, 1)) + b * dt + c * traj.grid.h
    if traj.grid.d == 1:
        return fraction * diameter
    return noise_factor * expected_sampling_l1(traj.final, N)


def check_superposition(
    traj: FlowTrajectory,
    result: SimulationResult,
    coefficients: tuple[float, float, float] | None = None,
    fraction: float = 0.05,
    noise_factor: float = 1.5,
) -> list[EstimateCheck]:
    """Terminal distance between the particle law and u(T)."""
    comparison = compare_ensembles(
        traj, result, coefficients=coefficients, fraction=fraction, noise_factor=noise_factor
    )
    if comparison.terminal is None:
        return []
    terminal = comparison.terminal
    return [
        EstimateCheck.evaluate(
            f"superposition_N{result.N}_seed{result.seed}_sub{result.substeps}",
            terminal.distance,
            comparison.terminal_tolerance,
            "le",
            "superposition: u(t,x)dx is the law of X(t)",
            metric=terminal.metric,
            t=terminal.t,
            coefficients=list(coefficients) if coefficients else None,
            support_diameter=comparison.support_diameter,
            distances=[entry.distance for entry in comparison.entries],
        )
    ]


def check_particle_containment(
    traj: FlowTrajectory,
    result: SimulationResult,
    c_support: float | None,
    R: float,
    inflation: float = 1.1,
) -> EstimateCheck:
    """No particle leaves the ball of radius inflation * (2R + R(T)).

    Raises:
        MissingCalibration: If no support constant is available.
    """
    if c_support is None:
        raise MissingCalibration(traj.p, traj.grid.d)
    bound = 2.0 * R + support_law(traj, c_support, traj.times[-1])
    return EstimateCheck.evaluate(
        f"particle_containment_N{result.N}_seed{result.seed}_sub{result.substeps}",
        result.peak_radius,
        inflation * bound,
        "le",
        "particles stay in the inflated support ball B_{2R+R(T)}",
        inflation=inflation,
        worst_step=int(np.argmax(result.max_radius)) if result.max_radius.size == len(traj.times) else None,
    )


def check_superposition_improvement(coarse: list[float], fine: list[float]) -> EstimateCheck:
    """Median distance over seeds at (10 N, dt/2) does not exceed the median at (N, dt)."""
    return EstimateCheck.evaluate(
        "superposition_improvement",
        float(np.median(fine)),
        float(np.median(coarse)),
        "le",
        "superposition under refinement of N and dt",
        seeds=len(fine),
        coarse=list(coarse),
        fine=list(fine),
    )


def build_report(
    traj: FlowTrajectory,
    c_support: float | None,
    R: float,
    simulations: list[SimulationResult] | None = None,
    settings: dict | None = None,
    t0: float | None = None,
    coefficients: tuple[float, float, float] | None = None,
) -> EstimateReport:
    """Runs every check on a trajectory and its particle ensembles."""
    settings = {**DEFAULT_SETTINGS, **(settings or {})}
    out_of_theory = traj.p < 4
    if out_of_theory:
        logger.warning("p=%g lies outside the range p >= 4 of the second order estimates", traj.p)
    report = EstimateReport(p=traj.p, d=traj.grid.d, out_of_theory=out_of_theory)
    report.checks += check_energy_identity(
        traj, settings["energy_dt_constant"], settings["energy_one_sided_atol"]
    )
    report.checks += check_conservation_and_bounds(traj, settings["mass_rtol"], settings["bound_rtol"])
    report.checks += check_gradient_sup_bound(traj, settings["grad_tol"])
    second, variant = check_second_order(traj, c_support, R)
    report.checks += second
    report.logged.update(variant)
    report.checks += check_support_growth(traj, c_support, R, t0=t0)
    report.checks += check_integrability(traj)
    for result in simulations or []:
        report.checks += check_superposition(
            traj, result, coefficients, settings["superposition_fraction"], settings["superposition_noise_factor"]
        )
        if result.N > 0:
            report.checks.append(
                check_particle_containment(traj, result, c_support, R, settings["particle_radius_inflation"])
            )
    logger.info("Verified %d checks, %d failed", len(report.checks), len(report.failed))
    for check in report.failed:
        logger.info("Failed check %s: lhs=%.6g rhs=%.6g tol=%.3g", check.name, check.lhs, check.rhs, check.tolerance)
    return report
