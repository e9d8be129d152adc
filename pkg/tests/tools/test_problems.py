"""Tests for src/tools/problems.py"""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.tools.problems import (
    LogisticProblem,
    MLPProblem,
    MLPShape,
    NonFiniteActivationError,
    QuadraticProblem,
    gradient_check,
    logistic_gradient,
    make_classification,
    mlp_forward_backward,
    quadratic_gradient,
)
from src.tools.rng import CounterStream


@pytest.fixture
def clusters():
    return make_classification(60, n_features=12, n_classes=10, seed=1)


class TestQuadratic:
    def test_zero_gradient_at_optimum(self):
        problem = QuadraticProblem.create(d=16, n=10, seed=0)
        assert_allclose(quadratic_gradient(problem.spec, problem.spec.x_star, 0), np.zeros(16), atol=1e-15)

    def test_identity_hessian(self, rng):
        problem = QuadraticProblem.create(d=8, n=5, mu=1.0, L=1.0, rotate=False)
        x = rng.normal(8)
        assert_allclose(quadratic_gradient(problem.spec, x, 2), x - problem.spec.x_star)

    def test_dataset_mean_is_exact_gradient(self, rng):
        problem = QuadraticProblem.create(d=32, n=40, tau=0.5, seed=3)
        x = rng.normal(32)
        grads = problem.per_sample_gradients(x, np.arange(40))
        assert_allclose(grads.mean(axis=0), problem.full_gradient(x), atol=1e-9)

    def test_full_gradient_matches_dense_hessian(self, rng):
        problem = QuadraticProblem.create(d=10, n=5, mu=0.2, L=3.0, seed=2)
        x = rng.normal(10)
        assert_allclose(problem.full_gradient(x), problem.spec.hessian() @ (x - problem.spec.x_star), atol=1e-12)
        eig = np.linalg.eigvalsh(problem.spec.hessian())
        assert eig.min() == pytest.approx(0.2) and eig.max() == pytest.approx(3.0)

    def test_gradient_descent_contraction(self):
        problem = QuadraticProblem.create(d=20, n=4, mu=0.1, L=1.0, seed=5)
        x = problem.initial_point(CounterStream(0, "init"))
        errors = []
        for _ in range(101):
            errors.append(np.linalg.norm(x - problem.spec.x_star))
            x = x - problem.full_gradient(x) / problem.smoothness
        rate = (errors[100] / errors[50]) ** (1 / 50)
        assert rate == pytest.approx(1 - problem.strong_convexity / problem.smoothness, rel=0.05)

    def test_finite_differences(self, rng):
        problem = QuadraticProblem.create(d=16, n=20, tau=0.3, seed=4)
        assert gradient_check(problem, rng.normal(16), np.arange(5), rng) <= 1e-5

    def test_seeded_construction(self):
        a = QuadraticProblem.create(d=8, n=4, tau=0.1, seed=9)
        b = QuadraticProblem.create(d=8, n=4, tau=0.1, seed=9)
        assert_array_equal(a.spec.x_star, b.spec.x_star)
        assert_array_equal(a.spec.zeta, b.spec.zeta)

    def test_rejects_bad_spectrum(self):
        with pytest.raises(ValueError):
            QuadraticProblem.create(d=4, n=2, mu=2.0, L=1.0)

    def test_counts_batch_evaluations(self):
        problem = QuadraticProblem.create(d=4, n=10)
        problem.per_sample_gradients(np.zeros(4), [0, 1])
        problem.per_sample_gradients(np.zeros(4), [])
        assert problem.gradient_evaluations == 2

    def test_empty_batch(self):
        problem = QuadraticProblem.create(d=4, n=10)
        assert problem.per_sample_gradients(np.zeros(4), []).shape == (0, 4)


class TestLogistic:
    def test_uniform_softmax_gradient(self, rng):
        feature = rng.normal(5)
        grad = logistic_gradient(np.zeros(5 * 10 + 10), feature, label=3)
        residual = np.full(10, 0.1)
        residual[3] -= 1.0
        assert_allclose(grad[-10:], residual)
        assert_allclose(grad[:-10].reshape(5, 10), np.outer(feature, residual))

    def test_binary_zero_weights(self, rng):
        feature = rng.normal(6)
        grad = logistic_gradient(np.zeros(6), feature, label=1, n_classes=2, fit_intercept=False)
        assert np.linalg.norm(grad) == pytest.approx(np.linalg.norm(feature) * 0.5)

    def test_multinomial_finite_differences(self, clusters, rng):
        problem = LogisticProblem(clusters, n_classes=10)
        x = rng.normal(problem.d) * 0.1
        assert gradient_check(problem, x, np.arange(10), rng, directions=20) <= 1e-5

    def test_binary_finite_differences(self, rng):
        data = make_classification(30, n_features=8, n_classes=2, seed=2)
        problem = LogisticProblem(data, n_classes=2)
        assert problem.d == 9
        assert gradient_check(problem, rng.normal(problem.d) * 0.1, np.arange(10), rng) <= 1e-5

    def test_accuracy_on_separable_clusters(self):
        train = make_classification(400, n_features=20, n_classes=4, separation=6.0, seed=0)
        problem = LogisticProblem(train, test=train, n_classes=4)
        x = problem.initial_point(CounterStream(0, "init"))
        for _ in range(200):
            x = x - 0.5 * problem.per_sample_gradients(x, np.arange(train.n)).mean(axis=0)
        assert problem.test_accuracy(x) > 0.9

    def test_no_test_split(self, clusters):
        problem = LogisticProblem(clusters)
        assert problem.test_accuracy(np.zeros(problem.d)) is None
        assert not problem.has_exact_gradient

    def test_initial_loss_is_log_classes(self, clusters):
        problem = LogisticProblem(clusters, n_classes=10)
        assert problem.loss(np.zeros(problem.d)) == pytest.approx(math.log(10))


class TestMLP:
    def test_default_size(self):
        assert MLPShape().size == 50_890

    def test_zero_input_zero_weights(self):
        loss, grad = mlp_forward_backward(np.zeros(50_890), np.zeros(784), 7)
        assert loss == pytest.approx(math.log(10))
        assert grad.shape == (50_890,)

    def test_finite_differences(self, clusters, rng):
        problem = MLPProblem(clusters, n_hidden=6)
        x = problem.initial_point(rng)
        assert gradient_check(problem, x, np.arange(8), rng, directions=10) <= 1e-4

    def test_single_example_matches_batch(self, clusters, rng):
        problem = MLPProblem(clusters, n_hidden=5)
        x = problem.initial_point(rng)
        loss, grad = mlp_forward_backward(x, clusters.features[3], int(clusters.labels[3]), problem.shape)
        assert_allclose(grad, problem.per_sample_gradients(x, [3])[0])
        assert loss == pytest.approx(problem.per_sample_losses(x, [3])[0])

    def test_hidden_permutation_symmetry(self, rng):
        shape = MLPShape(n_inputs=4, n_hidden=5, n_classes=3)
        params = rng.normal(shape.size)
        w1, b1, w2, b2 = shape.unflatten(params)
        perm = np.array([3, 0, 4, 1, 2])
        permuted = np.concatenate([w1[:, perm].ravel(), b1[perm], w2[perm].ravel(), b2])
        feature = rng.normal(4)
        loss_a, grad_a = mlp_forward_backward(params, feature, 2, shape)
        loss_b, grad_b = mlp_forward_backward(permuted, feature, 2, shape)
        assert loss_a == pytest.approx(loss_b)
        assert_allclose(np.sort(grad_a), np.sort(grad_b), atol=1e-12)

    def test_overflow_in_output_layer(self):
        shape = MLPShape(n_inputs=2, n_hidden=2, n_classes=2)
        params = np.concatenate([np.ones(4), np.zeros(2), np.full(4, 1e308), np.zeros(2)])
        with pytest.raises(NonFiniteActivationError) as info:
            mlp_forward_backward(params, np.ones(2), 0, shape)
        assert info.value.layer == "output"

    def test_overflow_in_hidden_layer(self):
        shape = MLPShape(n_inputs=2, n_hidden=2, n_classes=2)
        params = np.concatenate([np.full(4, 1e308), np.zeros(2), np.ones(4), np.zeros(2)])
        with pytest.raises(NonFiniteActivationError) as info:
            mlp_forward_backward(params, np.full(2, 1e10), 0, shape)
        assert info.value.layer == "hidden"

    def test_wrong_parameter_count(self):
        with pytest.raises(ValueError, match="Expected"):
            MLPShape().unflatten(np.zeros(10))


class TestMakeClassification:
    def test_shapes_and_labels(self):
        data = make_classification(50, n_features=7, n_classes=5, seed=0)
        assert data.features.shape == (50, 7)
        assert set(np.unique(data.labels)) == set(range(5))

    def test_seeded(self):
        a = make_classification(20, n_features=3, seed=4)
        b = make_classification(20, n_features=3, seed=4)
        assert_array_equal(a.features, b.features)
