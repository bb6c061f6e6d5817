from __future__ import annotations

import numpy as np
import pytest

from app.services.fp_coefficients import (
    CoefficientField,
    coefficients,
    diffusion_coeff,
    drift_coeff,
    fp_consistency_residual,
    interior_mask,
    mobility,
)
from app.services.grid import Grid, ScalarField
from tests.dual import Dual


class TestCoefficients:
    @pytest.fixture
    def grid(self):
        return Grid(1, 64, 4.0)

    def test_constant_field_has_no_coefficients(self, grid):
        field = ScalarField(grid, np.ones(grid.shape))
        inner = interior_mask(grid, 2)
        assert np.all(diffusion_coeff(field, 4.0).values[inner] == 0.0)
        assert np.all(drift_coeff(field, 4.0)[0][inner] == 0.0)

    def test_affine_field_has_constant_diffusion_and_no_drift(self, grid):
        field = ScalarField(grid, 2.0 * grid.axis + 10.0)
        inner = interior_mask(grid, 3)
        sigma = diffusion_coeff(field, 4.0).values[inner]
        np.testing.assert_allclose(sigma, 2.0 ** ((4.0 - 2.0) / 2.0), rtol=1e-12)
        np.testing.assert_allclose(drift_coeff(field, 4.0)[0][inner], 0.0, atol=1e-10)

    def test_p_equal_two_limit_is_brownian(self, grid):
        field = ScalarField(grid, np.exp(-(grid.axis**2)))
        coeff = coefficients(field, 2.0)
        inner = interior_mask(grid, 2)
        np.testing.assert_allclose(coeff.sigma, 1.0)
        np.testing.assert_allclose(coeff.drift[0][inner], 0.0)

    def test_sigma_squared_is_mobility(self, grid):
        field = ScalarField(grid, np.exp(-(grid.axis**2)))
        np.testing.assert_allclose(diffusion_coeff(field, 5.0).values ** 2, mobility(field, 5.0), rtol=1e-12)

    def test_drift_of_a_parabola(self, grid):
        # u = x^2 / 2, p = 4: b = (u'^2)' = 2 x
        field = ScalarField(grid, 0.5 * grid.axis**2)
        inner = interior_mask(grid, 2)
        drift = drift_coeff(field, 4.0)[0]
        np.testing.assert_allclose(drift[inner], 2.0 * grid.axis[inner], rtol=1e-10)
        assert np.interp(1.5, grid.axis, drift) == pytest.approx(3.0, rel=1e-10)

    @pytest.mark.parametrize("p", [3.0, 5.0, 6.5])
    def test_drift_follows_the_chain_rule(self, p):
        grid = Grid(1, 512, 4.0)
        field = ScalarField(grid, np.sin(grid.axis) + 2.0)
        # u' and u'' at x = 0.75 carried as one dual number
        slope = Dual(np.cos(0.75), -np.sin(0.75))
        expected = (slope * slope) ** ((p - 2.0) / 2.0)
        drift = drift_coeff(field, p)[0]
        assert np.interp(0.75, grid.axis, drift) == pytest.approx(expected.slope, rel=5e-3)

    def test_rows_and_header(self):
        grid = Grid(2, 4, 1.0)
        coeff = CoefficientField.constant(grid, (1.0, -1.0), 0.5)
        assert coeff.header() == ["x", "y", "b1", "b2", "sigma"]
        rows = coeff.rows()
        assert len(rows) == grid.size
        assert rows[0][2:] == [1.0, -1.0, 0.5]

    def test_rejects_negative_sigma(self):
        grid = Grid(1, 4, 1.0)
        with pytest.raises(ValueError):
            CoefficientField(grid, np.zeros((1, 4)), -np.ones(4))


def _consistency(n: int) -> float:
    grid = Grid(1, n, 4.0)
    field = ScalarField(grid, np.exp(-(grid.axis**2)) + 0.5)
    return fp_consistency_residual(field, 4.0, margin=n // 8)


def test_fokker_planck_form_is_consistent_under_refinement():
    coarse, fine = _consistency(64), _consistency(128)
    assert fine < 0.5 * coarse
