from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import integrate

from app.services.grid import Grid, mass
from app.services.oracles import (
    BarenblattProfile,
    SelfSimilarBox,
    SupportRun,
    ball_volume,
    calibrate_support_constant,
    fit_power_law,
    flux_balance_gap,
    oracle_entry,
    pde_residual,
    solve_profile_coefficient,
    validate_profile,
)


class TestBarenblatt:
    @pytest.fixture
    def profile(self):
        return BarenblattProfile.calibrate(4.0, 1)

    def test_one_dimensional_constants(self, profile):
        # 8 q^3 = beta for d = 1, p = 4
        assert profile.beta == pytest.approx(1.0 / 6.0)
        assert profile.q == pytest.approx((1.0 / 48.0) ** (1.0 / 3.0), rel=1e-8)
        assert flux_balance_gap(profile.q, 4.0, 1) == pytest.approx(0.0, abs=1e-10)

    def test_unit_mass(self, profile):
        radius = profile.free_boundary(1.0)
        total, _ = integrate.quad(lambda x: profile.value(1.0, x), -radius, radius, epsabs=1e-12)
        assert total == pytest.approx(1.0, rel=1e-8)

    def test_mass_scaling(self):
        heavy = BarenblattProfile.calibrate(4.0, 1, mass=2.0)
        radius = heavy.free_boundary(1.0)
        total, _ = integrate.quad(lambda x: heavy.value(1.0, x), -radius, radius, epsabs=1e-12)
        assert total == pytest.approx(2.0, rel=1e-8)

    def test_free_boundary_law(self, profile):
        ratio = profile.free_boundary(64.0) / profile.free_boundary(1.0)
        assert ratio == pytest.approx(64.0 ** (1.0 / 6.0))
        assert profile.value(1.0, 1.01 * profile.free_boundary(1.0)) == 0.0

    def test_two_dimensional_mass(self):
        profile = BarenblattProfile.calibrate(4.0, 2)
        assert profile.beta == pytest.approx(1.0 / 8.0)
        radius = profile.free_boundary(1.0)
        total, _ = integrate.quad(lambda r: 2 * math.pi * r * profile.radial(1.0, r), 0.0, radius, epsabs=1e-12)
        assert total == pytest.approx(1.0, rel=1e-8)

    def test_rejects_nonpositive_time(self, profile):
        with pytest.raises(ValueError):
            profile.radial(0.0, np.array([0.0]))

    def test_field_mass_on_grid(self, profile):
        grid = Grid(1, 512, 3.0)
        assert mass(profile.field(grid, 1.0)) == pytest.approx(1.0, rel=1e-3)

    @pytest.mark.parametrize("d", [1, 2])
    @pytest.mark.parametrize("scale", [2.0, 10.0])
    def test_self_similar_scaling(self, d, scale):
        profile = BarenblattProfile.calibrate(4.0, d)
        radius = profile.free_boundary(1.0)
        points = np.linspace(-1.2 * radius, 1.2 * radius, 25)
        x = points if d == 1 else np.stack([points, 0.5 * points], axis=-1)
        t = 0.7
        scaled = profile.value(scale * t, scale**profile.beta * x) * scale ** (d * profile.beta)
        np.testing.assert_allclose(scaled, profile.value(t, x), rtol=1e-10, atol=1e-14)


class TestResidual:
    def test_residual_converges_for_the_true_profile(self):
        profile = BarenblattProfile.calibrate(4.0, 1)
        assert validate_profile(profile, n=128)

    def test_perturbed_profile_is_detected(self):
        profile = BarenblattProfile.calibrate(4.0, 1)
        grid = Grid(1, 256, 3.0)
        exact = pde_residual(profile, 1.0, grid)
        wrong = pde_residual(profile.with_q(1.1 * profile.q), 1.0, grid)
        assert wrong > 10 * exact

    def test_box_profile_is_not_a_solution(self):
        profile = BarenblattProfile.calibrate(4.0, 1)
        box = SelfSimilarBox(profile)
        grid = Grid(1, 256, 3.0)
        assert box.radial(1.0, np.array([0.0]))[0] == pytest.approx(1.0 / ball_volume(profile.free_boundary(1.0), 1))
        assert pde_residual(box, 1.0, grid) > 10 * pde_residual(profile, 1.0, grid)


class TestCalibration:
    def test_support_constant_has_headroom(self):
        profile = BarenblattProfile.calibrate(4.0, 1)
        runs = [SupportRun.from_profile(profile, (0.5, 1.0, 2.0)), SupportRun.from_profile(profile, (1.0, 4.0))]
        assert calibrate_support_constant(runs, 1.2) == pytest.approx(1.2 * profile.c_fb)

    def test_needs_two_distinct_runs(self):
        profile = BarenblattProfile.calibrate(4.0, 1)
        run = SupportRun.from_profile(profile, (1.0, 2.0))
        with pytest.raises(ValueError):
            calibrate_support_constant([run])
        with pytest.raises(ValueError):
            calibrate_support_constant([run, run])

    def test_oracle_entry(self):
        entry = oracle_entry(4.0, 1, validate=False)
        assert set(entry) >= {"p", "d", "q", "C1", "c_fb", "C_support", "available"}
        assert entry["C_support"] > entry["c_fb"]

    def test_power_law_fit(self):
        t = np.array([1.0, 2.0, 4.0, 8.0])
        assert fit_power_law(t, 3.0 * t**0.25) == pytest.approx(0.25)
        with pytest.raises(ValueError):
            fit_power_law([1.0], [1.0])

    def test_profile_coefficient_depends_on_dimension(self):
        assert solve_profile_coefficient(4.0, 1) != pytest.approx(solve_profile_coefficient(4.0, 2))
