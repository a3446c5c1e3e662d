"""Term specs, side-specific transforms, and the additive predictor."""

import numpy as np
import pytest

from ctmflow import ConfigError, DataValidationError, deep, linear, smooth, tensor_smooth
from ctmflow.terms import (
    AdditivePredictor,
    apply_nonneg_shift,
    apply_sum_to_zero,
    assemble_design,
    evaluate_term_raw,
    intercept,
    orthogonalize,
    term_penalty,
    term_width,
)


def make_X(n=60, p=2, seed=0):
    gen = np.random.default_rng(seed)
    return gen.uniform(-1.0, 1.0, size=(n, p))


class TestTermSpecs:
    def test_labels(self):
        assert intercept().label == "intercept"
        assert linear("x1").label == "lin(x1)"
        assert smooth("x1").label == "s(x1)"
        assert tensor_smooth("a", "b").label == "te(a,b)"
        assert deep(["a", "b"]).label == "deep(a+b)"
        assert smooth("x1", name="custom").label == "custom"

    def test_widths(self):
        assert term_width(intercept()) == 1
        assert term_width(linear("x")) == 1
        assert term_width(smooth("x", q=10)) == 10
        assert term_width(tensor_smooth("a", "b", q=6)) == 36
        assert term_width(deep(["a"], target="shift")) == 1
        assert term_width(deep(["a"], target="interaction", width=7)) == 7

    def test_penalties(self):
        assert term_penalty(linear("x")) is None
        pen = term_penalty(smooth("x", q=8, penalty_order=2))
        assert pen.dim == 8 and pen.nullspace_dim == 2
        tensor_pen = term_penalty(tensor_smooth("a", "b", q=5))
        assert tensor_pen.dim == 25

    def test_invalid_specs(self):
        with pytest.raises(ConfigError):
            smooth("x", q=3)
        with pytest.raises(ConfigError):
            deep(["a", "b"], target="both")
        with pytest.raises(ConfigError):
            deep([])
        with pytest.raises(ConfigError):
            deep(["a"], layers=(0,))
        with pytest.raises(ConfigError):
            smooth("x", df=-1.0)
        with pytest.raises(ConfigError):
            smooth("x", lam=-0.5)
        with pytest.raises(ConfigError):
            linear("x", target="nowhere")

    def test_round_trip_dict(self):
        spec = tensor_smooth("a", "b", q=5, df=4.0, name="surf")
        from ctmflow.terms import TermSpec

        assert TermSpec.from_dict(spec.to_dict()) == spec


class TestSideTransforms:
    def test_sum_to_zero_centering_arithmetic(self):
        cols = np.array([[1.0, 0.0], [2.0, -1.0]])
        state = {}
        centered = apply_sum_to_zero(cols, state, training=True)
        np.testing.assert_allclose(state["center"], [1.5, -0.5])
        np.testing.assert_allclose(centered.mean(axis=0), [0.0, 0.0], atol=1e-15)
        replay = apply_sum_to_zero(np.array([[2.0, 0.0]]), state, training=False)
        np.testing.assert_allclose(replay, [[0.5, 0.5]])

    def test_sum_to_zero_flags_constant_columns(self):
        cols = np.column_stack([np.ones(5), np.arange(5.0)])
        state = {}
        with pytest.warns(RuntimeWarning, match="frozen at 0"):
            apply_sum_to_zero(cols, state, training=True)
        assert state["degenerate"] == [True, False]

    def test_nonneg_shift_training_values(self):
        state = {}
        shifted = apply_nonneg_shift(np.array([[-2.0], [3.0]]), state, training=True)
        np.testing.assert_allclose(state["shift"], [2.001])
        np.testing.assert_allclose(shifted, [[0.001], [5.001]])

        state = {}
        apply_nonneg_shift(np.array([[0.0], [1.0]]), state, training=True)
        np.testing.assert_allclose(state["shift"], [0.001])

        state = {}
        apply_nonneg_shift(np.array([[0.5], [1.0]]), state, training=True)
        np.testing.assert_allclose(state["shift"], [0.0])

    def test_nonneg_shift_clamps_new_data(self):
        state = {}
        apply_nonneg_shift(np.array([[-2.0], [3.0]]), state, training=True)
        replay = apply_nonneg_shift(np.array([[-50.0]]), state, training=False)
        np.testing.assert_allclose(replay, [[0.0]])

    def test_orthogonalize_annihilates_span(self):
        gen = np.random.default_rng(8)
        n = 80
        span = np.column_stack([np.ones(n), gen.standard_normal(n)])
        cols = gen.standard_normal((n, 3)) + 2.0 * span[:, 1:2]
        resid, w = orthogonalize(cols, span)
        np.testing.assert_allclose(span.T @ resid, np.zeros((2, 3)), atol=1e-8)
        # Centering falls out of projecting off the ones column.
        np.testing.assert_allclose(resid.mean(axis=0), np.zeros(3), atol=1e-10)
        again, _ = orthogonalize(resid, span)
        np.testing.assert_allclose(again, resid, atol=1e-10)

    def test_orthogonalize_replays_with_stored_coefficients(self):
        gen = np.random.default_rng(9)
        span = np.column_stack([np.ones(30), gen.standard_normal(30)])
        cols = gen.standard_normal((30, 2))
        _, w = orthogonalize(cols, span)
        new_span = np.column_stack([np.ones(4), gen.standard_normal(4)])
        new_cols = gen.standard_normal((4, 2))
        replay, w_back = orthogonalize(new_cols, new_span, w)
        np.testing.assert_allclose(replay, new_cols - new_span @ w)
        assert w_back is w


class TestAssembleDesign:
    def test_widths_and_slices(self):
        mat, index_map = assemble_design(
            [
                ("a", np.ones((4, 1))),
                ("b", np.zeros((4, 10))),
                ("c", np.full((4, 3), 2.0)),
            ]
        )
        assert mat.shape == (4, 14)
        assert index_map["a"] == slice(0, 1)
        assert index_map["b"] == slice(1, 11)
        assert index_map["c"] == slice(11, 14)

    def test_duplicate_names_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            assemble_design([("a", np.ones((2, 1))), ("a", np.ones((2, 1)))])


class TestEvaluateTermRaw:
    def test_intercept_is_ones(self):
        X = make_X()
        cols = evaluate_term_raw(intercept(), X, ["x1", "x2"], {})
        np.testing.assert_allclose(cols, np.ones((X.shape[0], 1)))

    def test_linear_passes_feature_through(self):
        X = make_X()
        cols = evaluate_term_raw(linear("x2"), X, ["x1", "x2"], {}, training=True)
        np.testing.assert_allclose(cols[:, 0], X[:, 1])

    def test_constant_feature_rejected(self):
        X = make_X()
        X[:, 0] = 3.0
        with pytest.raises(DataValidationError, match="constant"):
            evaluate_term_raw(linear("x1"), X, ["x1", "x2"], {}, training=True)

    def test_unknown_feature_rejected(self):
        with pytest.raises(DataValidationError, match="unknown feature"):
            evaluate_term_raw(linear("zz"), make_X(), ["x1", "x2"], {}, training=True)

    def test_smooth_replays_knots(self):
        X = make_X()
        state = {}
        train_cols = evaluate_term_raw(
            smooth("x1", q=7), X, ["x1", "x2"], state, training=True
        )
        assert train_cols.shape == (X.shape[0], 7)
        replay = evaluate_term_raw(smooth("x1", q=7), X, ["x1", "x2"], state)
        np.testing.assert_array_equal(train_cols, replay)


class TestAdditivePredictor:
    def test_design_widths_and_order(self):
        X = make_X(p=3)
        pred = AdditivePredictor(
            "shift", [intercept(), smooth("x2", q=6), linear("x1")]
        )
        pred.initialize(X, ["x1", "x2", "x3"], np.random.default_rng(0))
        mat, index_map = pred.design(X)
        assert mat.shape == (X.shape[0], 8)
        assert index_map["intercept"] == slice(0, 1)
        assert index_map["s(x2)"] == slice(1, 7)
        assert index_map["lin(x1)"] == slice(7, 8)

    def test_shift_smooth_columns_are_centered(self):
        X = make_X()
        pred = AdditivePredictor("shift", [smooth("x1", q=10)])
        pred.initialize(X, ["x1", "x2"], np.random.default_rng(0))
        cols = pred.term_columns("s(x1)", X)
        np.testing.assert_allclose(cols.mean(axis=0), np.zeros(10), atol=1e-10)

    def test_interaction_columns_are_nonnegative(self):
        X = make_X()
        pred = AdditivePredictor("interaction", [smooth("x1", target="interaction")])
        pred.initialize(X, ["x1", "x2"], np.random.default_rng(0))
        cols = pred.term_columns("s(x1)", X)
        assert cols.min() >= 0.0

    def test_replay_is_bitwise_deterministic(self):
        X = make_X()
        pred = AdditivePredictor(
            "shift", [linear("x1"), smooth("x2", q=5), deep(["x1", "x2"], layers=(4,))]
        )
        pred.initialize(X, ["x1", "x2"], np.random.default_rng(3))
        first, _ = pred.design(X)
        second, _ = pred.design(X)
        np.testing.assert_array_equal(first, second)

        clone = AdditivePredictor(
            "shift", [linear("x1"), smooth("x2", q=5), deep(["x1", "x2"], layers=(4,))]
        )
        clone.states = {}
        clone.load_state_dict(pred.state_dict(), ["x1", "x2"])
        third, _ = clone.design(X)
        np.testing.assert_array_equal(first, third)

    def test_orthogonalized_deep_columns_are_span_free(self):
        X = make_X(n=100)
        pred = AdditivePredictor(
            "shift",
            [linear("x1"), deep(["x1", "x2"], layers=(8,), orthogonalize=True)],
        )
        pred.initialize(X, ["x1", "x2"], np.random.default_rng(5))
        cols = pred.term_columns("deep(x1+x2)", X)
        span = np.column_stack([np.ones(X.shape[0]), pred.term_columns("lin(x1)", X)])
        np.testing.assert_allclose(span.T @ cols, np.zeros((2, 1)), atol=1e-8)

    def test_duplicate_labels_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            AdditivePredictor("shift", [linear("x1"), linear("x1")])

    def test_unknown_term_lookup(self):
        pred = AdditivePredictor("shift", [linear("x1")])
        pred.initialize(make_X(), ["x1", "x2"], np.random.default_rng(0))
        with pytest.raises(ConfigError, match="no term named"):
            pred.term_columns("nope", make_X())
