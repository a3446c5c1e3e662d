"""Monotone reparameterization, likelihood, estimator predictions, storage."""

import json

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from ctmflow import (
    ConfigError,
    DctmRegressor,
    DegenerateOutcomeError,
    NumericGuardError,
    get_error_distribution,
    interaction_predict,
    linear,
    monotone_reparam,
    smooth,
    transformation_nll,
)
from ctmflow.model import (
    monotone_reparam_backward,
    softplus,
    softplus_inverse,
    y_direction_penalty,
)

GAUSSIAN = get_error_distribution("gaussian")


class TestMonotoneReparam:
    def test_frozen_example(self):
        gamma = monotone_reparam(np.array([0.5, -1.0, 2.0]))
        np.testing.assert_allclose(
            gamma, [0.5, 0.81326169, 2.9401897], atol=1e-7
        )

    def test_zero_raw(self):
        np.testing.assert_allclose(
            monotone_reparam(np.array([0.0, 0.0])), [0.0, np.log(2.0)], atol=1e-12
        )

    def test_columns_strictly_increase(self):
        raw = np.random.default_rng(0).standard_normal((26, 4)) * 3.0
        gamma = monotone_reparam(raw)
        assert np.all(np.diff(gamma, axis=0) > 0.0)

    def test_first_row_passes_through(self):
        raw = np.random.default_rng(1).standard_normal((5, 3))
        np.testing.assert_allclose(monotone_reparam(raw)[0], raw[0])

    def test_backward_matches_finite_differences(self):
        gen = np.random.default_rng(2)
        raw = gen.standard_normal((6, 2))
        weights = gen.standard_normal((6, 2))

        def scalar(r):
            return float(np.sum(monotone_reparam(r) * weights))

        analytic = monotone_reparam_backward(raw, weights)
        step = 1e-7
        numeric = np.zeros_like(raw)
        for i in range(raw.shape[0]):
            for j in range(raw.shape[1]):
                bumped = raw.copy()
                bumped[i, j] += step
                dipped = raw.copy()
                dipped[i, j] -= step
                numeric[i, j] = (scalar(bumped) - scalar(dipped)) / (2 * step)
        np.testing.assert_allclose(analytic, numeric, atol=1e-6)

    def test_softplus_inverse_round_trip(self):
        x = np.array([1e-6, 0.5, 5.0, 30.0, 400.0])
        np.testing.assert_allclose(softplus(softplus_inverse(x)), x, rtol=1e-10)


class TestInteractionPredict:
    def test_one_hot_selects_column(self):
        gen = np.random.default_rng(3)
        a = gen.standard_normal((5, 4))
        gamma = gen.standard_normal((4, 3))
        b = np.zeros((5, 3))
        b[:, 1] = 1.0
        np.testing.assert_allclose(
            interaction_predict(a, b, gamma), (a @ gamma)[:, 1], atol=1e-14
        )

    def test_zero_coefficients(self):
        np.testing.assert_allclose(
            interaction_predict(np.ones((3, 2)), np.ones((3, 2)), np.zeros((2, 2))),
            np.zeros(3),
        )

    def test_methods_agree(self):
        gen = np.random.default_rng(4)
        a = gen.standard_normal((10, 6))
        b = gen.standard_normal((10, 3))
        gamma = gen.standard_normal((6, 3))
        np.testing.assert_allclose(
            interaction_predict(a, b, gamma, "factored"),
            interaction_predict(a, b, gamma, "khatri-rao"),
            atol=1e-12,
        )

    def test_unknown_method(self):
        with pytest.raises(ConfigError):
            interaction_predict(np.ones((1, 1)), np.ones((1, 1)), np.ones((1, 1)), "x")


class TestTransformationNll:
    def test_frozen_gaussian_value(self):
        value, violations = transformation_nll(
            np.array([0.5]), np.array([1.0]), GAUSSIAN
        )
        assert value == pytest.approx(1.0439385332046727, abs=1e-9)
        assert violations == 0

    def test_frozen_logistic_value(self):
        value, _ = transformation_nll(
            np.array([0.5]), np.array([1.0]), get_error_distribution("logistic")
        )
        # -log f_L(0.5) = 0.5 + 2 log(1 + exp(-0.5)).
        assert value == pytest.approx(1.4481539683602134, abs=1e-9)

    def test_shift_changes_only_density_part(self):
        # The Jacobian term does not depend on where the density sits.
        h = np.array([0.2, -0.4])
        jac = np.array([1.7, 0.3])
        base, _ = transformation_nll(h, jac, GAUSSIAN)
        moved, _ = transformation_nll(h + 1.0, jac, GAUSSIAN)
        expected = -np.mean(GAUSSIAN.log_pdf(h + 1.0)) - np.mean(np.log(jac))
        assert moved == pytest.approx(float(expected), abs=1e-12)
        assert base != pytest.approx(moved)

    def test_violations_counted_and_clamped(self):
        value, violations = transformation_nll(
            np.array([0.0, 0.0]), np.array([-1.0, 1.0]), GAUSSIAN, floor=1e-12
        )
        assert violations == 1
        assert np.isfinite(value)

    def test_strict_mode_raises(self):
        with pytest.raises(NumericGuardError):
            transformation_nll(
                np.array([0.0]), np.array([0.0]), GAUSSIAN, strict=True
            )


def test_y_direction_penalty_small_orders():
    zero = y_direction_penalty(1)
    np.testing.assert_allclose(zero.matrix, np.zeros((2, 2)))
    assert zero.nullspace_dim == 2
    pen = y_direction_penalty(6)
    assert pen.dim == 7 and pen.nullspace_dim == 2


def fit_small(terms=None, order=4, n=80, data_seed=0, **kwargs):
    gen = np.random.default_rng(data_seed)
    X = pd.DataFrame({"x1": gen.uniform(-1, 1, n), "x2": gen.uniform(-1, 1, n)})
    y = 0.5 + X["x1"].to_numpy() + 0.8 * gen.standard_normal(n)
    settings = {"max_epochs": 60, "seed": data_seed, "val_fraction": 0.2}
    settings.update(kwargs)
    model = DctmRegressor(terms=terms, order=order, **settings)
    return model.fit(X, y), X, y


class TestEstimator:
    def test_fitted_attributes(self):
        model, X, y = fit_small(terms=[linear("x1")])
        assert model.n_features_in_ == 2
        assert list(model.feature_names_in_) == ["x1", "x2"]
        assert model.gamma_.shape == (5, 1)
        assert model.psi_.shape == (1,)
        assert model.training_log_.stopping_reason in ("early-stopping", "max-epochs")
        assert model.diagnostics_["jacobian_violations"] == 0

    def test_cdf_reduction_line_order_one(self):
        # With an intercept-only interaction and order 1, the modeled
        # distribution is an affine probit: F(y|x) = Phi(g0 + (g1-g0) t).
        model, X, _ = fit_small(terms=None, order=1)
        model.gamma_raw_ = np.array([[-1.0], [1.5]])
        from ctmflow import monotone_reparam as reparam

        model.gamma_ = reparam(model.gamma_raw_)
        basis = model.bernstein_
        grid = np.linspace(basis.lower, basis.upper, 21)
        t = (grid - basis.lower) / (basis.upper - basis.lower)
        g0, g1 = model.gamma_[:, 0]
        expected = stats.norm.cdf(g0 + (g1 - g0) * t)
        got = model.predict_cdf(X.head(3), grid)
        for row in got:
            np.testing.assert_allclose(row, expected, atol=1e-12)

    def test_cdf_rows_are_increasing_with_proper_limits(self):
        model, X, _ = fit_small(terms=[linear("x1"), smooth("x2", q=5)])
        grid = np.linspace(model.bernstein_.lower, model.bernstein_.upper, 101)
        cdf = model.predict_cdf(X.head(10), grid)
        assert np.all(np.diff(cdf, axis=1) >= 0.0)
        assert cdf[:, 0].max() < 0.2
        assert cdf[:, -1].min() > 0.8

    def test_density_is_nonnegative(self):
        model, X, _ = fit_small(terms=[linear("x1")])
        grid = np.linspace(model.bernstein_.lower, model.bernstein_.upper, 51)
        assert model.predict_density(X.head(5), grid).min() >= 0.0

    def test_quantile_inverts_cdf(self):
        model, X, _ = fit_small(terms=[linear("x1")])
        for p in (0.2, 0.5, 0.9):
            q = model.predict_quantile(X.head(8), p)
            levels = GAUSSIAN.cdf(model.transformation(X.head(8), q))
            np.testing.assert_allclose(levels, np.full(8, p), atol=1e-6)

    def test_quantile_clamps_with_warning(self):
        model, X, _ = fit_small(terms=None, order=1)
        # Flatten the transformation so extreme levels cannot be reached.
        model.gamma_raw_ = np.array([[0.0], [-5.0]])
        from ctmflow import monotone_reparam as reparam

        model.gamma_ = reparam(model.gamma_raw_)
        with pytest.warns(RuntimeWarning, match="clamped"):
            low = model.predict_quantile(X.head(4), 0.001)
        np.testing.assert_allclose(low, np.full(4, model.bernstein_.lower))

    def test_predict_is_median(self):
        model, X, _ = fit_small(terms=[linear("x1")])
        np.testing.assert_array_equal(
            model.predict(X.head(5)), model.predict_quantile(X.head(5), 0.5)
        )

    def test_score_is_mean_log_density(self):
        model, X, y = fit_small(terms=[linear("x1")])
        assert model.score(X, y) == pytest.approx(
            float(np.mean(model.log_density(X, y)))
        )

    def test_shift_part_matches_coefficients(self):
        model, X, _ = fit_small(terms=[linear("x1"), linear("x2")])
        coefs = model.shift_coefficients()
        manual = (
            coefs["lin(x1)"][0] * X["x1"].to_numpy()
            + coefs["lin(x2)"][0] * X["x2"].to_numpy()
        )
        np.testing.assert_allclose(model.shift_part(X), manual, atol=1e-12)

    def test_feature_count_mismatch(self):
        model, X, _ = fit_small(terms=[linear("x1")])
        with pytest.raises(ConfigError, match="features"):
            model.predict(X[["x1"]])

    def test_unfitted_raises(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            DctmRegressor().predict(np.ones((3, 2)))

    def test_get_params_round_trip(self):
        est = DctmRegressor(order=6, learning_rate=0.02)
        clone = DctmRegressor(**est.get_params(deep=False))
        assert clone.get_params(deep=False) == est.get_params(deep=False)


class TestValidation:
    def test_order_zero_rejected(self):
        with pytest.raises(ConfigError, match="order"):
            fit_small(order=0)

    def test_constant_outcome_rejected(self):
        gen = np.random.default_rng(0)
        X = pd.DataFrame({"x1": gen.uniform(-1, 1, 30)})
        with pytest.raises(DegenerateOutcomeError):
            DctmRegressor().fit(X, np.ones(30))

    def test_too_few_rows_rejected(self):
        X = pd.DataFrame({"x1": np.linspace(0, 1, 10)})
        with pytest.raises(Exception, match="at least 20"):
            DctmRegressor().fit(X, np.linspace(0, 1, 10))

    def test_bad_settings_rejected(self):
        cases = [
            {"val_fraction": 0.7},
            {"patience": 0},
            {"learning_rate": 0.0},
            {"max_epochs": 0},
            {"lambda_y": -1.0},
            {"jacobian_floor": 0.0},
            {"batch_size": 0},
            {"seed": -1},
        ]
        for bad in cases:
            with pytest.raises(ConfigError):
                fit_small(**bad)

    def test_unknown_distribution_rejected(self):
        with pytest.raises(ConfigError):
            fit_small(error_distribution="cauchy")


class TestSerialization:
    def test_round_trip_preserves_predictions(self, tmp_path):
        model, X, y = fit_small(terms=[linear("x1"), smooth("x2", q=5)])
        path = tmp_path / "model.json"
        model.save(str(path))
        loaded = DctmRegressor.load(str(path))
        np.testing.assert_array_equal(loaded.gamma_raw_, model.gamma_raw_)
        np.testing.assert_array_equal(loaded.psi_, model.psi_)
        np.testing.assert_array_equal(
            loaded.log_density(X, y), model.log_density(X, y)
        )

    def test_unknown_top_level_key_rejected(self, tmp_path):
        model, _, _ = fit_small(terms=[linear("x1")])
        path = tmp_path / "model.json"
        model.save(str(path))
        payload = json.loads(path.read_text())
        payload["surprise"] = 1
        path.write_text(json.dumps(payload))
        with pytest.raises(ConfigError, match="unknown"):
            DctmRegressor.load(str(path))

    def test_missing_fit_key_rejected(self, tmp_path):
        model, _, _ = fit_small(terms=[linear("x1")])
        path = tmp_path / "model.json"
        model.save(str(path))
        payload = json.loads(path.read_text())
        del payload["fit"]["gamma_raw"]
        path.write_text(json.dumps(payload))
        with pytest.raises(ConfigError, match="missing"):
            DctmRegressor.load(str(path))

    def test_format_version_mismatch_rejected(self, tmp_path):
        model, _, _ = fit_small(terms=[linear("x1")])
        path = tmp_path / "model.json"
        model.save(str(path))
        payload = json.loads(path.read_text())
        payload["format_version"] = 99
        path.write_text(json.dumps(payload))
        with pytest.raises(ConfigError, match="format_version"):
            DctmRegressor.load(str(path))
