import numpy as np
import pytest

from treesparse.loss import (
    Dataset,
    indicator_response,
    lipschitz_bound,
    logistic_ova_value_grad,
    multinomial_proba,
    multinomial_value_grad,
    squared_value_grad,
    top_singular_value,
)

from oracles import finite_difference


def assert_rel_close(a, b, rtol=1e-5):
    scale = max(np.abs(b).max(), 1e-8)
    assert np.abs(a - b).max() <= rtol * scale


def classification_problem(rng, n=12, d=4, c=3):
    X = rng.standard_normal((n, d))
    y = rng.integers(0, c, size=n)
    y[:c] = np.arange(c)
    return X, y


class TestDataset:
    def test_labels_encoded_in_sorted_order(self):
        ds = Dataset(np.zeros((4, 2)), [7, 3, 7, 5], task="classification")
        np.testing.assert_array_equal(ds.classes, [3, 5, 7])
        np.testing.assert_array_equal(ds.codes, [2, 0, 2, 1])

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            Dataset(np.zeros((3, 1)), [1, 1, 1], task="classification")

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            Dataset(np.array([[np.nan]]), [0.0])

    def test_subset_keeps_coding(self):
        ds = Dataset(np.zeros((4, 1)), [1, 2, 3, 3], task="classification")
        sub = ds.subset([2, 3])  # a single class is allowed in a part
        np.testing.assert_array_equal(sub.classes, [1, 2, 3])
        np.testing.assert_array_equal(sub.codes, [2, 2])

    def test_indicator_response(self):
        Y = indicator_response([0, 2, 1], 3)
        np.testing.assert_array_equal(Y, [[1, -1, -1], [-1, -1, 1], [-1, 1, -1]])
        with pytest.raises(ValueError):
            indicator_response([3], 3)


class TestSquared:
    def test_exact_fit(self, rng):
        X = rng.standard_normal((5, 3))
        w = rng.standard_normal(3)
        val, grad = squared_value_grad(w, X, X @ w)
        assert val == 0.0
        np.testing.assert_allclose(grad, 0.0, atol=1e-15)

    def test_scalar_case(self):
        val, grad = squared_value_grad(np.array([2.0]), np.array([[1.0]]), np.array([0.0]))
        assert val == 2.0 and grad[0] == 2.0

    def test_gradient_finite_difference(self, rng):
        X = rng.standard_normal((8, 5))
        y = rng.standard_normal(8)
        w = rng.standard_normal(5)
        _, grad = squared_value_grad(w, X, y)
        assert_rel_close(grad, finite_difference(lambda v: squared_value_grad(v, X, y)[0], w))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            squared_value_grad(np.zeros(2), np.zeros((3, 3)), np.zeros(3))


class TestLogisticOVA:
    def test_zero_model(self, rng):
        X, y = classification_problem(rng)
        val, _, _ = logistic_ova_value_grad(np.zeros((4, 3)), np.zeros(3), X, indicator_response(y, 3))
        assert val == pytest.approx(3 * np.log(2))

    def test_confident_margins(self, rng):
        # with one indicator column per sample the scores can equal 1e4 * Ybar
        X, y = classification_problem(rng)
        Y = indicator_response(y, 3)
        Xa = np.column_stack([X, np.eye(12)])
        Wa = np.vstack([np.zeros((4, 3)), 1e4 * Y])
        val, _, _ = logistic_ova_value_grad(Wa, np.zeros(3), Xa, Y)
        assert val == pytest.approx(0.0, abs=1e-300)

    def test_gradient_finite_difference(self, rng):
        X, y = classification_problem(rng)
        Y = indicator_response(y, 3)
        W = rng.standard_normal((4, 3))
        b = rng.standard_normal(3)
        _, gW, gb = logistic_ova_value_grad(W, b, X, Y)
        assert_rel_close(gW, finite_difference(lambda V: logistic_ova_value_grad(V, b, X, Y)[0], W))
        assert_rel_close(gb, finite_difference(lambda c: logistic_ova_value_grad(W, c, X, Y)[0], b))

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            logistic_ova_value_grad(np.zeros((4, 3)), np.zeros(3), np.zeros((5, 4)), np.ones((5, 2)))


class TestMultinomial:
    def test_zero_model(self, rng):
        X, y = classification_problem(rng)
        val, _, _ = multinomial_value_grad(np.zeros((4, 3)), np.zeros(3), X, y)
        assert val == pytest.approx(np.log(3))
        np.testing.assert_allclose(multinomial_proba(np.zeros((4, 3)), np.zeros(3), X), 1 / 3)

    def test_probabilities_sum_to_one(self, rng):
        X, _ = classification_problem(rng)
        P = multinomial_proba(rng.standard_normal((4, 3)) * 5, rng.standard_normal(3), X)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)

    def test_matches_pairwise_difference_form(self, rng):
        # loss_i = log sum_k exp(x_i (w_k - w_yi) + b_k - b_yi)
        X, y = classification_problem(rng)
        W = rng.standard_normal((4, 3))
        b = rng.standard_normal(3)
        S = X @ W + b
        ref = np.mean([np.log(np.exp(S[i] - S[i, y[i]]).sum()) for i in range(len(y))])
        assert multinomial_value_grad(W, b, X, y)[0] == pytest.approx(ref, rel=1e-12)

    def test_gradient_finite_difference(self, rng):
        X, y = classification_problem(rng)
        W = rng.standard_normal((4, 3))
        b = rng.standard_normal(3)
        _, gW, gb = multinomial_value_grad(W, b, X, y)
        assert_rel_close(gW, finite_difference(lambda V: multinomial_value_grad(V, b, X, y)[0], W))
        assert_rel_close(gb, finite_difference(lambda c: multinomial_value_grad(W, c, X, y)[0], b))

    def test_label_out_of_range(self, rng):
        X, _ = classification_problem(rng)
        with pytest.raises(ValueError):
            multinomial_value_grad(np.zeros((4, 3)), np.zeros(3), X, np.full(12, 3))


class TestStability:
    def test_extreme_margins_are_finite(self, rng):
        X, y = classification_problem(rng)
        for scale in (1e4, -1e4):
            W = np.full((4, 3), scale)
            v1, g1, _ = logistic_ova_value_grad(W, np.zeros(3), X, indicator_response(y, 3))
            v2, g2, _ = multinomial_value_grad(W * rng.standard_normal((4, 3)), np.zeros(3), X, y)
            assert np.isfinite(v1) and np.isfinite(v2)
            assert np.all(np.isfinite(g1)) and np.all(np.isfinite(g2))


class TestLipschitz:
    def test_identity(self):
        assert lipschitz_bound(np.eye(6), "squared") == pytest.approx(1 / 6, rel=0.011)

    def test_column_scaling(self, rng):
        X = np.zeros((5, 3))
        X[:, 0] = rng.standard_normal(5)
        L1 = lipschitz_bound(X, "squared")
        assert lipschitz_bound(10 * X, "squared") == pytest.approx(100 * L1, rel=1e-6)

    def test_power_iteration_matches_svd(self, rng):
        for _ in range(20):
            X = rng.standard_normal((rng.integers(2, 15), rng.integers(2, 15)))
            s = np.linalg.svd(X, compute_uv=False)[0]
            assert top_singular_value(X) == pytest.approx(s, rel=1e-4)

    def test_factors(self, rng):
        X = rng.standard_normal((10, 4))
        sq = lipschitz_bound(X, "squared")
        assert lipschitz_bound(X, "ova_logistic") == pytest.approx(sq / 4)
        assert lipschitz_bound(X, "multinomial") == pytest.approx(sq / 2)
        s = np.linalg.svd(X, compute_uv=False)[0]
        assert sq == pytest.approx(1.01 * s * s / 10, rel=1e-5)

    @pytest.mark.parametrize("kind", ["squared", "ova_logistic", "multinomial"])
    def test_descent_lemma(self, rng, kind):
        X, y = classification_problem(rng, n=15, d=4, c=3)
        Y = indicator_response(y, 3)
        t = rng.standard_normal(15)
        L = lipschitz_bound(X, kind, intercept=kind != "squared")

        def f(P):
            if kind == "squared":
                v, g = squared_value_grad(P, X, t)
                return v, g
            W, b = P[:-1], P[-1]
            fn = logistic_ova_value_grad if kind == "ova_logistic" else multinomial_value_grad
            v, gW, gb = fn(W, b, X, Y if kind == "ova_logistic" else y)
            return v, np.vstack([gW, gb])

        shape = (4,) if kind == "squared" else (5, 3)
        for _ in range(200):
            u, v = rng.standard_normal((2,) + shape) * 2
            fu, _ = f(u)
            fv, gv = f(v)
            assert fu <= fv + np.sum(gv * (u - v)) + 0.5 * L * np.sum((u - v) ** 2) + 1e-12
