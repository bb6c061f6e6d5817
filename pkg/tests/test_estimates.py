from __future__ import annotations

import numpy as np
import pytest

from app.exceptions import MissingCalibration
from app.models.experiment_schema import ProxConfig, Problem
from app.models.report_schema import EstimateCheck
from app.services.estimates import (
    build_report,
    check_conservation_and_bounds,
    check_energy_identity,
    check_gradient_sup_bound,
    check_particle_containment,
    check_second_order,
    check_superposition,
    check_superposition_improvement,
    check_support_growth,
    compare_ensembles,
    superposition_tolerance,
)
from app.services.grid import Grid, ScalarField
from app.services.marginals import expected_sampling_l1
from app.services.oracles import BarenblattProfile
from app.services.particles import ParticleEnsemble, SimulationResult, Snapshot, simulate
from app.services.prox_solver import FlowTrajectory, ProxResult, ProxSolver, StepDiagnostics, evolve


@pytest.fixture(scope="module")
def profile():
    return BarenblattProfile.calibrate(4.0, 1)


def _barenblatt_run(profile, dt: float = 0.01, T: float = 0.1) -> FlowTrajectory:
    grid = Grid(1, 64, 8.0)
    u0 = profile.field(grid, 1.0)
    problem = Problem(p=4.0, d=1, L=8.0, n=64, dt=dt, T=T, R=profile.free_boundary(1.0))
    return evolve(u0, problem, ProxConfig())


@pytest.fixture(scope="module")
def trajectory(profile):
    return _barenblatt_run(profile)


@pytest.fixture(scope="module")
def c_support(profile):
    return 1.2 * profile.c_fb


def _exact_trajectory(profile, grid: Grid, times) -> FlowTrajectory:
    fields = [profile.field(grid, 1.0 + t) for t in times]
    threshold = 1e-8 * float(np.max(fields[0].values))
    diagnostics = [StepDiagnostics.measure(t, u, profile.p, threshold, 0.0, 0) for t, u in zip(times, fields)]
    return FlowTrajectory(grid, profile.p, 0.0, 0.0, list(times), fields, diagnostics, threshold)


class TestReportSchema:
    def test_pass_alias(self):
        check = EstimateCheck.evaluate("x", 1.0, 2.0, "le", "anchor")
        assert check.passed
        assert check.model_dump(by_alias=True)["pass"] is True

    def test_eq_tol(self):
        assert not EstimateCheck.evaluate("x", 1.0, 1.5, "eq_tol", "anchor", 0.1).passed

    def test_rejects_infinite_sides(self):
        with pytest.raises(ValueError):
            EstimateCheck.evaluate("x", float("inf"), 1.0, "le", "anchor")


class TestZeroDatum:
    def test_all_checks_pass_trivially(self):
        grid = Grid(1, 16, 4.0)
        problem = Problem(p=4.0, d=1, L=4.0, n=16, dt=0.1, T=0.2, R=1.0)
        traj = evolve(ScalarField.zeros(grid), problem, ProxConfig())
        report = build_report(traj, c_support=2.0, R=1.0)
        assert report.failed == []
        assert report.check("energy_identity").lhs == 0.0
        assert report.check("second_order_energy").rhs == 0.0


class TestNominalRun:
    def test_energy_identity(self, trajectory):
        identity, dissipation = check_energy_identity(trajectory)
        assert identity.passed
        assert identity.lhs <= identity.rhs
        assert dissipation.passed

    def test_energy_residual_is_first_order(self, profile, trajectory):
        coarse = check_energy_identity(_barenblatt_run(profile, dt=0.02))[0]
        fine = check_energy_identity(trajectory)[0]
        ratio = (coarse.rhs - coarse.lhs) / (fine.rhs - fine.lhs)
        assert ratio == pytest.approx(2.0, rel=0.25)

    def test_conservation_and_bounds(self, trajectory):
        checks = check_conservation_and_bounds(trajectory)
        assert [c.name for c in checks] == ["mass_conservation", "max_principle", "nonnegativity", "l1_contraction"]
        assert all(c.passed for c in checks)

    def test_second_order_bounds(self, trajectory, c_support, profile):
        checks, variant = check_second_order(trajectory, c_support, profile.free_boundary(1.0))
        assert all(c.passed for c in checks)
        assert variant["mu_growth_ball"] < variant["mu_support_ball"]

    def test_second_order_needs_calibration(self, trajectory):
        with pytest.raises(MissingCalibration):
            check_second_order(trajectory, None, 1.0)

    def test_full_report(self, trajectory, c_support, profile):
        report = build_report(trajectory, c_support, profile.free_boundary(1.0), t0=1.0)
        assert not report.out_of_theory
        assert report.failed == []
        names = {c.name for c in report.checks}
        assert {"gradient_sup_x", "support_containment", "drift_integrability"} <= names


def test_leaking_step_fails_mass_check(profile, monkeypatch):
    original = ProxSolver.solve

    def leaking(self, f, lam):
        result = original(self, f, lam)
        return ProxResult(result.field * (1.0 - 1e-6), result.residual, result.iterations, result.method)

    monkeypatch.setattr(ProxSolver, "solve", leaking)
    checks = check_conservation_and_bounds(_barenblatt_run(profile, T=0.03))
    mass_check = next(c for c in checks if c.name == "mass_conservation")
    assert not mass_check.passed


class TestSupportGrowth:
    @pytest.mark.parametrize("d, n, L", [(1, 1024, 5.0), (2, 160, 3.5)])
    def test_exponent_of_exact_profile(self, d, n, L):
        profile = BarenblattProfile.calibrate(4.0, d)
        times = [0.0, 1.0, 3.0, 7.0, 15.0, 31.0, 63.0, 99.0]
        traj = _exact_trajectory(profile, Grid(d, n, L), times)
        checks = check_support_growth(traj, 1.2 * profile.c_fb, profile.free_boundary(1.0), t0=1.0)
        containment, exponent = checks
        assert containment.passed
        assert exponent.rhs == pytest.approx(1.0 / (d * 2.0 + 4.0))
        assert exponent.passed

    @pytest.mark.slow
    def test_exponent_of_the_computed_flow(self, profile):
        grid = Grid(1, 512, 8.0)
        problem = Problem(p=4.0, d=1, L=8.0, n=512, dt=0.01, T=9.0, R=profile.free_boundary(1.0))
        traj = evolve(profile.field(grid, 1.0), problem, ProxConfig())
        containment, exponent = check_support_growth(traj, 1.2 * profile.c_fb, profile.free_boundary(1.0), t0=1.0)
        assert containment.passed
        assert exponent.rhs == pytest.approx(1.0 / 6.0)
        assert exponent.passed

    def test_containment_detects_overflow(self, profile):
        traj = _exact_trajectory(profile, Grid(1, 256, 5.0), [0.0, 10.0])
        check = check_support_growth(traj, 0.1, 0.1)[0]
        assert not check.passed


class TestSuperposition:
    def test_frozen_ensemble_distance_is_stable(self, trajectory):
        rng = np.random.default_rng(0)
        ens = ParticleEnsemble(rng.normal(scale=0.5, size=(1000, 1)), 0)
        frozen = FlowTrajectory(
            trajectory.grid, 4.0, 0.0, 0.0, trajectory.times[:3], [trajectory.fields[0]] * 3,
            trajectory.diagnostics[:3], trajectory.threshold,
        )
        result = SimulationResult(1000, 0, 1, [Snapshot(k, frozen.times[k], ens) for k in range(3)], np.zeros(1000))
        distances = [entry.distance for entry in compare_ensembles(frozen, result).entries]
        assert distances[0] == distances[1] == distances[2]

    def test_particles_follow_the_density(self, trajectory):
        result = simulate(trajectory, 5000, seed=3)
        (check,) = check_superposition(trajectory, result)
        assert check.details["metric"] == "w1"
        assert check.passed

    def test_improvement(self):
        assert check_superposition_improvement([0.3, 0.2, 0.25], [0.1, 0.15, 0.12]).passed
        assert not check_superposition_improvement([0.1], [0.2]).passed

    def test_two_dimensional_budget_covers_sampling_noise(self):
        profile = BarenblattProfile.calibrate(4.0, 2)
        traj = _exact_trajectory(profile, Grid(2, 128, 4.0), [0.0])
        result = simulate(traj, 100_000, seed=5)
        (check,) = check_superposition(traj, result)
        assert check.details["metric"] == "l1"
        assert check.rhs == pytest.approx(1.5 * expected_sampling_l1(traj.final, 100_000))
        assert check.passed

    @pytest.mark.slow
    def test_two_dimensional_flow_at_desk_scale(self):
        profile = BarenblattProfile.calibrate(4.0, 2)
        grid = Grid(2, 128, 4.0)
        problem = Problem(p=4.0, d=2, L=4.0, n=128, dt=1e-3, T=0.05, R=profile.free_boundary(1.0))
        traj = evolve(profile.field(grid, 1.0), problem, ProxConfig())
        (check,) = check_superposition(traj, simulate(traj, 100_000, seed=42, snapshot_every=10))
        assert check.passed

    def test_one_dimensional_budget_is_a_length(self, trajectory):
        assert superposition_tolerance(trajectory, 1000, 4.0, fraction=0.05) == pytest.approx(0.2)

    def test_fitted_coefficients(self, trajectory):
        budget = superposition_tolerance(trajectory, 10_000, 4.0, coefficients=(1.0, 2.0, 3.0))
        assert budget == pytest.approx(0.01 + 2.0 * 0.01 + 3.0 * trajectory.grid.h)


class TestParticleContainment:
    def test_particles_stay_in_the_support_ball(self, trajectory, c_support, profile):
        result = simulate(trajectory, 2000, seed=8)
        check = check_particle_containment(trajectory, result, c_support, profile.free_boundary(1.0))
        assert check.passed
        assert check.lhs == pytest.approx(float(np.max(result.max_radius)))
        assert check.rhs > check.lhs

    def test_detects_escaping_particles(self, trajectory):
        result = simulate(trajectory, 2000, seed=8)
        assert not check_particle_containment(trajectory, result, 0.01, 0.01).passed

    def test_needs_calibration(self, trajectory):
        result = simulate(trajectory, 10, seed=8)
        with pytest.raises(MissingCalibration):
            check_particle_containment(trajectory, result, None, 1.0)

    def test_report_carries_one_check_per_ensemble(self, trajectory, c_support, profile):
        results = [simulate(trajectory, 1000, seed=s) for s in (1, 2)] + [simulate(trajectory, 0, seed=3)]
        report = build_report(trajectory, c_support, profile.free_boundary(1.0), simulations=results)
        names = [c.name for c in report.checks if c.name.startswith("particle_containment")]
        assert names == ["particle_containment_N1000_seed1_sub1", "particle_containment_N1000_seed2_sub1"]


def _gradient_overshoot(n: int) -> float:
    grid = Grid(2, n, 2.0)
    u0 = ScalarField.from_function(grid, lambda x, y: np.maximum(1.0 - x**2 - y**2, 0.0) ** 2)
    problem = Problem(p=4.0, d=2, L=2.0, n=n, dt=0.01, T=0.05, R=1.0)
    traj = evolve(u0, problem, ProxConfig())
    return max(check.details["overshoot"] for check in check_gradient_sup_bound(traj))


@pytest.mark.slow
def test_gradient_overshoot_shrinks_under_refinement():
    coarse, fine = _gradient_overshoot(32), _gradient_overshoot(64)
    assert fine <= coarse
    assert fine <= 0.05
