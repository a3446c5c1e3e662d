"""Bernstein and B-spline bases, penalties, and the row-wise tensor product."""

import numpy as np
import pytest

from ctmflow import (
    BernsteinBasis,
    DataValidationError,
    PenaltyMatrix,
    SplineBasis,
    bernstein_deriv,
    bernstein_eval,
    bspline_eval,
    difference_penalty,
    kron_sum_penalty,
    tensor_basis,
)


class TestBernstein:
    def test_order_one_midpoint(self):
        basis = BernsteinBasis(order=1, lower=0.0, upper=1.0)
        np.testing.assert_allclose(
            bernstein_eval([0.5], basis), [[0.5, 0.5]], atol=1e-15
        )

    def test_order_two_midpoint(self):
        basis = BernsteinBasis(order=2, lower=0.0, upper=1.0)
        np.testing.assert_allclose(
            bernstein_eval([0.5], basis), [[0.25, 0.5, 0.25]], atol=1e-15
        )

    def test_partition_of_unity(self):
        basis = BernsteinBasis(order=12, lower=-2.0, upper=5.0)
        y = np.linspace(-2.0, 5.0, 41)
        rows = bernstein_eval(y, basis)
        assert rows.min() >= 0.0
        np.testing.assert_allclose(rows.sum(axis=1), np.ones(41), atol=1e-12)

    def test_high_order_stays_finite_and_normalized(self):
        # Orders beyond ~30 overflow naive binomial coefficients; the
        # log-space evaluation must stay exact.
        basis = BernsteinBasis(order=80, lower=0.0, upper=1.0)
        rows = bernstein_eval(np.linspace(0, 1, 17), basis)
        assert np.isfinite(rows).all()
        np.testing.assert_allclose(rows.sum(axis=1), np.ones(17), atol=1e-10)

    def test_support_clamping_counted(self):
        basis = BernsteinBasis(order=3, lower=0.0, upper=1.0)
        counter = {}
        bernstein_eval([-0.5, 0.3, 1.7], basis, counter)
        assert counter["clamped"] == 2

    def test_derivative_order_one_is_slope(self):
        # h(y) = 0*(1-t) + 1*t on [0, 1] has slope one everywhere.
        basis = BernsteinBasis(order=1, lower=0.0, upper=1.0)
        deriv = bernstein_deriv([0.1, 0.5, 0.9], basis)
        np.testing.assert_allclose(deriv @ np.array([0.0, 1.0]), [1, 1, 1], atol=1e-14)

    def test_derivative_rows_sum_to_zero(self):
        basis = BernsteinBasis(order=7, lower=-1.0, upper=3.0)
        deriv = bernstein_deriv(np.linspace(-1, 3, 23), basis)
        np.testing.assert_allclose(deriv.sum(axis=1), np.zeros(23), atol=1e-12)

    def test_derivative_order_two_value(self):
        # At t=0.25 with coefficients (0,0,1): d/dy t^2 = 2t = 0.5.
        basis = BernsteinBasis(order=2, lower=0.0, upper=1.0)
        deriv = bernstein_deriv([0.25], basis)
        np.testing.assert_allclose(deriv @ np.array([0.0, 0.0, 1.0]), [0.5], atol=1e-14)

    def test_derivative_matches_finite_differences(self):
        basis = BernsteinBasis(order=9, lower=-2.0, upper=4.0)
        gamma = np.cumsum(np.abs(np.random.default_rng(3).standard_normal(10)))
        y = np.linspace(-1.8, 3.8, 15)
        step = 1e-6
        numeric = (
            bernstein_eval(y + step, basis) - bernstein_eval(y - step, basis)
        ) @ gamma / (2 * step)
        analytic = bernstein_deriv(y, basis) @ gamma
        np.testing.assert_allclose(analytic, numeric, atol=1e-6)

    def test_from_data_pads_support(self):
        basis = BernsteinBasis.from_data([0.0, 10.0], order=3, padding=0.05)
        assert basis.lower == pytest.approx(-0.5)
        assert basis.upper == pytest.approx(10.5)

    def test_invalid_construction(self):
        with pytest.raises(DataValidationError):
            BernsteinBasis(order=0, lower=0.0, upper=1.0)
        with pytest.raises(DataValidationError):
            BernsteinBasis(order=2, lower=1.0, upper=1.0)
        with pytest.raises(DataValidationError):
            BernsteinBasis.from_data([2.0, 2.0], order=3)


class TestSpline:
    def test_rows_sum_to_one_inside_domain(self):
        gen = np.random.default_rng(0)
        x = gen.uniform(0.0, 4.0, 200)
        basis = SplineBasis.from_data(x, num_basis=10)
        rows = bspline_eval(np.linspace(x.min(), x.max(), 33), basis)
        assert rows.shape == (33, 10)
        assert rows.min() >= 0.0
        np.testing.assert_allclose(rows.sum(axis=1), np.ones(33), atol=1e-12)

    def test_degree_one_hat_functions(self):
        x = np.array([0.0, 1.0, 2.0, 3.0])
        basis = SplineBasis.from_data(x, num_basis=4, degree=1)
        rows = bspline_eval(x, basis)
        # Degree-1 splines on these knots interpolate: one-hot at the knots.
        np.testing.assert_allclose(rows, np.eye(4), atol=1e-12)

    def test_clamps_outside_domain(self):
        x = np.linspace(0, 1, 50)
        basis = SplineBasis.from_data(x, num_basis=6)
        counter = {}
        inside = bspline_eval([0.0, 1.0], basis)
        outside = bspline_eval([-5.0, 6.0], basis, counter)
        np.testing.assert_allclose(outside, inside, atol=1e-12)
        assert counter["clamped"] == 2

    def test_invalid_construction(self):
        with pytest.raises(DataValidationError):
            SplineBasis.from_data(np.ones(10), num_basis=6)
        with pytest.raises(DataValidationError):
            SplineBasis.from_data(np.linspace(0, 1, 10), num_basis=3, degree=3)


class TestTensorBasis:
    def test_small_example(self):
        out = tensor_basis(np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]]))
        np.testing.assert_allclose(out, [[3.0, 4.0, 6.0, 8.0]])

    def test_ones_factor_reproduces_other(self):
        gen = np.random.default_rng(5)
        b = gen.standard_normal((7, 4))
        np.testing.assert_allclose(tensor_basis(np.ones((7, 1)), b), b)

    def test_partition_of_unity_is_preserved(self):
        gen = np.random.default_rng(6)
        x = gen.uniform(0, 1, 40)
        z = gen.uniform(0, 1, 40)
        bx = bspline_eval(x, SplineBasis.from_data(x, 5))
        bz = bspline_eval(z, SplineBasis.from_data(z, 6))
        prod = tensor_basis(bx, bz)
        assert prod.shape == (40, 30)
        np.testing.assert_allclose(prod.sum(axis=1), np.ones(40), atol=1e-12)

    def test_row_count_mismatch(self):
        with pytest.raises(DataValidationError):
            tensor_basis(np.ones((3, 2)), np.ones((4, 2)))


class TestPenalties:
    def test_first_difference_matrix(self):
        pen = difference_penalty(3, order=1)
        expected = np.array([[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]])
        np.testing.assert_allclose(pen.matrix, expected)
        assert pen.nullspace_dim == 1

    def test_second_difference_nullspace(self):
        pen = difference_penalty(5, order=2)
        # Constants and linear ramps are unpenalized.
        for vec in (np.ones(5), np.arange(5.0)):
            assert float(vec @ pen.matrix @ vec) == pytest.approx(0.0, abs=1e-12)
        assert np.linalg.matrix_rank(pen.matrix) == 3
        assert pen.nullspace_dim == 2

    def test_difference_penalty_errors(self):
        with pytest.raises(DataValidationError):
            difference_penalty(2, order=2)
        with pytest.raises(DataValidationError):
            difference_penalty(5, order=0)

    def test_kron_sum_identity_example(self):
        # Outcome-direction identity penalty alone replicates per feature
        # column: kron(I_3, I_2) = I_6.
        pen_f = PenaltyMatrix(matrix=np.zeros((3, 3)), nullspace_dim=3)
        pen_o = PenaltyMatrix(matrix=np.eye(2), nullspace_dim=0)
        total = kron_sum_penalty(pen_f, 0.0, pen_o, 1.0, n_feature=3)
        np.testing.assert_allclose(total.matrix, np.eye(6))
        assert total.nullspace_dim == 0

    def test_kron_sum_block_structure(self):
        import scipy.linalg

        pen_f = difference_penalty(3, 1)
        pen_o = difference_penalty(4, 2)
        only_outcome = kron_sum_penalty(pen_f, 0.0, pen_o, 2.5, n_feature=3)
        np.testing.assert_allclose(
            only_outcome.matrix,
            scipy.linalg.block_diag(*[2.5 * pen_o.matrix] * 3),
        )
        assert only_outcome.nullspace_dim == 3 * 2

        only_feature = kron_sum_penalty(pen_f, 1.5, pen_o, 0.0, n_feature=3)
        np.testing.assert_allclose(
            only_feature.matrix, 1.5 * np.kron(pen_f.matrix, np.eye(4))
        )
        assert only_feature.nullspace_dim == 1 * 4

        both = kron_sum_penalty(pen_f, 1.5, pen_o, 2.5, n_feature=3)
        np.testing.assert_allclose(
            both.matrix, only_feature.matrix + only_outcome.matrix
        )
        assert both.nullspace_dim == 1 * 2

    def test_kron_sum_nullspace_vector(self):
        # A vector constant in both directions is unpenalized.
        pen = difference_penalty(3, 1)
        total = kron_sum_penalty(pen, 1.0, pen, 1.0, n_feature=3)
        vec = np.ones(9)
        assert float(vec @ total.matrix @ vec) == pytest.approx(0.0, abs=1e-12)

    def test_kron_sum_errors(self):
        pen = difference_penalty(3, 1)
        with pytest.raises(DataValidationError):
            kron_sum_penalty(pen, -1.0, pen, 0.0, n_feature=3)
        with pytest.raises(DataValidationError):
            kron_sum_penalty(pen, 1.0, pen, 1.0, n_feature=4)
