from __future__ import annotations

import numpy as np
import pytest

from app.exceptions import NonConvergence
from app.models.experiment_schema import ProxConfig, Problem
from app.services.grid import Grid, ScalarField, cell_inner, l1_norm, l2_norm, mass, sup_norm
from app.services.oracles import BarenblattProfile
from app.services.prox_solver import (
    FlowTrajectory,
    ProxSolver,
    apply_A,
    crandall_liggett,
    default_delta,
    evolve,
    flux,
    flux_jacobian,
    jacobian_matrix,
    prox_step,
    regularized_energy,
)
from tests.dual import jacobian


def _bump(grid: Grid) -> ScalarField:
    if grid.d == 1:
        return ScalarField.from_function(grid, lambda x: np.maximum(1 - x**2, 0) ** 2)
    return ScalarField.from_function(grid, lambda x, y: np.maximum(1 - x**2 - y**2, 0) ** 2)


class TestFlux:
    @pytest.mark.parametrize("p", [3.0, 4.0, 6.0])
    @pytest.mark.parametrize("delta", [0.0, 0.1])
    def test_jacobian_matches_dual_numbers(self, p, delta):
        rng = np.random.default_rng(int(p * 10))

        def reference(g):
            s = g[0] * g[0] + g[1] * g[1] + delta**2
            mobility = s ** ((p - 2.0) / 2.0)
            return [mobility * g[0], mobility * g[1]]

        for _ in range(100):
            g = rng.normal(size=2)
            expected = np.array(jacobian(reference, list(g)))
            actual = flux_jacobian(g.reshape(2, 1), p, delta)[:, :, 0]
            np.testing.assert_allclose(actual, expected, rtol=1e-12, atol=1e-14)

    @pytest.mark.parametrize("p", [3.0, 4.0, 6.0])
    def test_jacobian_matches_finite_differences(self, p):
        rng = np.random.default_rng(7)
        step = 1e-6
        for _ in range(100):
            g = rng.normal(size=(2, 1))
            actual = flux_jacobian(g, p, 0.0)[:, :, 0]
            for j in range(2):
                e = np.zeros((2, 1))
                e[j] = step
                column = (flux(g + e, p, 0.0) - flux(g - e, p, 0.0))[:, 0] / (2 * step)
                np.testing.assert_allclose(actual[:, j], column, rtol=1e-5, atol=1e-8)

    def test_flux_vanishes_at_zero_gradient(self):
        assert np.all(flux(np.zeros((2, 3)), 4.0, 0.0) == 0.0)
        assert np.all(flux_jacobian(np.zeros((1, 3)), 4.0, 0.0) == 0.0)


class TestOperator:
    @pytest.fixture(params=[1, 2])
    def grid(self, request):
        return Grid(request.param, 12, 1.5)

    def test_operator_is_energy_gradient(self, grid):
        rng = np.random.default_rng(17)
        u = ScalarField(grid, rng.random(grid.shape))
        w = ScalarField(grid, rng.normal(size=grid.shape))
        t = 1e-6
        for p, epsilon, delta in [(4.0, 0.0, 0.0), (3.0, 0.1, 0.05)]:
            fd = (
                regularized_energy(u + t * w, p, epsilon, delta) - regularized_energy(u - t * w, p, epsilon, delta)
            ) / (2 * t)
            assert cell_inner(apply_A(u, p, epsilon, delta), w) == pytest.approx(fd, rel=1e-6)

    def test_jacobian_matrix_matches_operator_derivative(self, grid):
        rng = np.random.default_rng(19)
        u = ScalarField(grid, rng.random(grid.shape))
        w = ScalarField(grid, rng.normal(size=grid.shape))
        t = 1e-6
        fd = (apply_A(u + t * w, 4.0, 0.1, 0.0).values - apply_A(u - t * w, 4.0, 0.1, 0.0).values) / (2 * t)
        jw = (jacobian_matrix(u, 4.0, 0.1, 0.0) @ w.values.ravel()).reshape(grid.shape)
        np.testing.assert_allclose(jw, fd, rtol=1e-5, atol=1e-6 * np.max(np.abs(fd)))

    def test_operator_is_mass_free(self, grid):
        assert abs(mass(apply_A(_bump(grid), 4.0, 0.2, 0.0))) < 1e-12


def _cubic_operator_error(n: int) -> float:
    grid = Grid(1, n, 2.0)
    result = apply_A(ScalarField.from_function(grid, lambda x: x**3 / 3.0), 4.0)
    inner = np.abs(grid.axis) <= 1.5
    return float(np.max(np.abs(result.values[inner] + 6.0 * grid.axis[inner] ** 5)))


def test_operator_is_second_order_on_a_cubic():
    # -(|u'|^2 u')' = -6 x^5 for u = x^3 / 3
    assert _cubic_operator_error(128) < 0.05
    assert _cubic_operator_error(128) / _cubic_operator_error(256) == pytest.approx(4.0, rel=0.1)


class TestProxSolver:
    @pytest.fixture
    def grid(self):
        return Grid(1, 32, 2.0)

    @pytest.mark.parametrize("method, tol", [("newton", 1e-10), ("fixed-point", 1e-8)])
    def test_residual_and_mass(self, grid, method, tol):
        f = _bump(grid)
        cfg = ProxConfig(tol=tol, method=method, fixed_point_max_iter=5000)
        solver = ProxSolver(4.0, cfg)
        result = solver.solve(f, 0.05)
        assert solver.relative_residual(result.field, f, 0.05) <= tol
        assert result.method == method
        assert mass(result.field) == pytest.approx(mass(f), rel=1e-12)
        assert sup_norm(result.field) <= sup_norm(f) * (1 + 1e-10)

    def test_newton_merit_decreases(self, grid):
        f = _bump(grid)
        result = ProxSolver(4.0, ProxConfig()).solve(f, 0.1)
        history = result.merit_history
        assert all(b <= a * (1 + 1e-12) for a, b in zip(history, history[1:]))
        assert result.method == "newton"

    def test_cg_and_direct_agree(self, grid):
        f = _bump(grid)
        direct = prox_step(f, 0.05, ProxConfig(linear_solver="direct"), 4.0)
        iterative = prox_step(f, 0.05, ProxConfig(linear_solver="cg"), 4.0)
        assert l2_norm(direct - iterative) <= 1e-8 * l2_norm(f)

    def test_zero_datum_is_fixed(self, grid):
        result = ProxSolver(4.0, ProxConfig()).solve(ScalarField.zeros(grid), 0.1)
        assert np.all(result.field.values == 0.0)
        assert result.iterations == 0

    def test_rejects_nonpositive_step(self, grid):
        with pytest.raises(ValueError):
            ProxSolver(4.0, ProxConfig()).solve(_bump(grid), 0.0)

    def test_two_dimensional_step(self):
        grid = Grid(2, 16, 1.5)
        f = _bump(grid)
        solver = ProxSolver(4.0, ProxConfig(tol=1e-10))
        result = solver.solve(f, 0.05)
        assert solver.relative_residual(result.field, f, 0.05) <= 1e-10
        assert mass(result.field) == pytest.approx(mass(f), rel=1e-12)

    def test_crandall_liggett_single_step_is_resolvent(self, grid):
        f = _bump(grid)
        cfg = ProxConfig()
        one = crandall_liggett(f, 0.1, 1, cfg, 4.0)
        np.testing.assert_allclose(one.values, prox_step(f, 0.1, cfg, 4.0).values)

    def test_crandall_liggett_is_cauchy_in_the_step_count(self, grid):
        f = _bump(grid)
        cfg = ProxConfig()
        levels = [crandall_liggett(f, 0.1, m, cfg, 4.0) for m in (4, 8, 16, 32)]
        gaps = [l2_norm(b - a) for a, b in zip(levels, levels[1:])]
        assert gaps[0] > gaps[1] > gaps[2]
        assert gaps[1] / gaps[2] == pytest.approx(2.0, rel=0.3)

    def test_crandall_liggett_splits_failing_resolvents(self, grid, monkeypatch):
        original = ProxSolver.solve
        calls = []

        def fails_on_full_step(self, f, lam):
            calls.append(lam)
            if lam > 0.03:
                raise NonConvergence(3, 1.0)
            return original(self, f, lam)

        monkeypatch.setattr(ProxSolver, "solve", fails_on_full_step)
        u = crandall_liggett(_bump(grid), 0.1, 2, ProxConfig(max_step_splits=1), 4.0)
        assert calls == [0.05, 0.025, 0.025, 0.05, 0.025, 0.025]
        assert mass(u) == pytest.approx(mass(_bump(grid)), rel=1e-12)

    def test_crandall_liggett_reports_step(self, grid, monkeypatch):
        def stalled(self, f, lam):
            raise NonConvergence(3, 1.0)

        monkeypatch.setattr(ProxSolver, "solve", stalled)
        with pytest.raises(NonConvergence) as info:
            crandall_liggett(_bump(grid), 0.1, 3, ProxConfig(max_step_splits=1), 4.0)
        assert info.value.step == 1


def _barenblatt_error(n: int, dt: float, T: float) -> float:
    """L1 distance at time T between the run started from B(1) and B(1 + T)."""
    profile = BarenblattProfile.calibrate(4.0, 1)
    grid = Grid(1, n, 8.0)
    problem = Problem(p=4.0, d=1, L=8.0, n=n, dt=dt, T=T, R=profile.free_boundary(1.0))
    traj = evolve(profile.field(grid, 1.0), problem, ProxConfig())
    exact = profile.field(grid, 1.0 + T)
    return l1_norm(traj.final - exact)


class TestEvolve:
    @pytest.fixture
    def problem(self):
        return Problem(p=4.0, d=1, L=2.0, n=32, dt=0.02, T=0.1, R=1.0)

    @pytest.fixture
    def trajectory(self, problem):
        grid = Grid(problem.d, problem.n, problem.L)
        return evolve(_bump(grid), problem, ProxConfig())

    def test_time_levels(self, trajectory, problem):
        assert trajectory.n_steps == problem.n_steps == 5
        assert trajectory.times[-1] == pytest.approx(problem.T)
        assert len(trajectory.diagnostics) == problem.n_steps + 1

    def test_monitors(self, trajectory):
        masses = [s.mass for s in trajectory.diagnostics]
        assert max(masses) - min(masses) <= 1e-12 * masses[0]
        sups = [s.sup for s in trajectory.diagnostics]
        assert all(b <= a * (1 + 1e-10) for a, b in zip(sups, sups[1:]))
        assert min(s.min for s in trajectory.diagnostics) >= -1e-12

    def test_energy_decreases(self, trajectory):
        energies = [s.phi for s in trajectory.diagnostics]
        assert all(b <= a * (1 + 1e-12) for a, b in zip(energies, energies[1:]))

    def test_last_step_is_shortened(self):
        problem = Problem(p=4.0, d=1, L=2.0, n=16, dt=0.04, T=0.1, R=1.0)
        traj = evolve(_bump(Grid(1, 16, 2.0)), problem, ProxConfig())
        assert traj.n_steps == 3
        assert traj.step_sizes[-1] == pytest.approx(0.02)

    def test_save_and_load(self, trajectory, tmp_path):
        trajectory.save(tmp_path / "trajectory.npz")
        loaded = FlowTrajectory.load(tmp_path / "trajectory.npz")
        assert loaded.times == trajectory.times
        np.testing.assert_array_equal(loaded.final.values, trajectory.final.values)

    def test_non_convergence_reports_step(self, problem, monkeypatch):
        def stalled(self, f, lam):
            raise NonConvergence(3, 1.0)

        monkeypatch.setattr(ProxSolver, "solve", stalled)
        grid = Grid(problem.d, problem.n, problem.L)
        with pytest.raises(NonConvergence) as info:
            evolve(_bump(grid), problem, ProxConfig(max_step_splits=1))
        assert info.value.step == 1

    def test_barenblatt_error_decreases_under_refinement(self):
        coarse = _barenblatt_error(64, 0.02, 0.1)
        fine = _barenblatt_error(128, 0.01, 0.1)
        assert fine < coarse

    @pytest.mark.slow
    def test_barenblatt_is_reproduced_at_desk_scale(self):
        nominal = _barenblatt_error(256, 1e-3, 0.5)
        assert nominal <= 0.02
        assert _barenblatt_error(512, 5e-4, 0.5) < nominal

    def test_default_delta_scales_with_gradient(self):
        grid = Grid(1, 32, 2.0)
        u = _bump(grid)
        assert default_delta(2.0 * u) == pytest.approx(2.0 * default_delta(u))
        assert default_delta(ScalarField.zeros(grid)) == 0.0
