"""Randomized invariants of divergences, interpolants, clustering and training."""

import numpy as np
import pytest

from src.core import InterpolantSolution, bregman, divergence_matrix, evaluate, interpolant_to_model
from src.learn import TrainConfig, fit_pbdl
from src.supervision import QuadrupletSet
from src.tasks import bregman_kmeans
from tests.conftest import random_model

CASES = 1000


def _case(rng):
    d = int(rng.integers(1, 4))
    model = random_model(rng, K=int(rng.integers(1, 9)), d=d)
    return model, rng.uniform(-2, 2, size=(int(rng.integers(2, 12)), d))


def test_divergences_are_non_negative(rng):
    for _ in range(CASES):
        model, X = _case(rng)
        assert divergence_matrix(model, X, X).min() >= -1e-12
        assert divergence_matrix(model, X, X, tie_break="max_divergence").min() >= -1e-12


def test_divergence_of_a_point_to_itself_is_zero(rng):
    for _ in range(CASES):
        model, X = _case(rng)
        assert np.all(np.diag(divergence_matrix(model, X, X)) == 0.0)
        assert bregman(model, X[0], X[0]).value == 0.0


def test_active_slope_is_a_subgradient(rng):
    for _ in range(CASES):
        model, X = _case(rng)
        value, k = evaluate(model, X[0])
        assert np.all(model(X) >= value + (X - X[0]) @ model.slopes[k] - 1e-12)


def test_interpolant_reproduces_sampled_values(rng):
    for _ in range(CASES):
        model, X = _case(rng)
        active = np.argmax(X @ model.slopes.T + model.offsets, axis=1)
        sol = InterpolantSolution(values=model(X), subgradients=model.slopes[active], points=X)
        rebuilt = interpolant_to_model(sol)
        np.testing.assert_allclose(rebuilt(X), sol.values, atol=1e-9)
        # the interpolant is the smallest max-affine function with these tangents
        Y = rng.uniform(-2, 2, size=(20, X.shape[1]))
        assert np.all(rebuilt(Y) <= model(Y) + 1e-9)


def test_kmeans_objective_never_increases(rng):
    for _ in range(CASES):
        model, X = _case(rng)
        k = int(rng.integers(1, X.shape[0] + 1))
        history = np.asarray(bregman_kmeans(model, X, k, seed=int(rng.integers(1000))).history)
        assert np.all(np.diff(history) <= 1e-9 * max(1.0, abs(history[0])))


@pytest.mark.slow
def test_trained_models_are_feasible(rng):
    for _ in range(CASES):
        d = int(rng.integers(1, 3))
        n = int(rng.integers(3, 8))
        X = rng.uniform(-1, 1, size=(n, d))
        idx = np.array([rng.choice(n, 3, replace=False) for _ in range(int(rng.integers(1, 6)))])
        S = QuadrupletSet(np.column_stack([idx[:, 0], idx[:, 1], idx[:, 0], idx[:, 2]]))
        result = fit_pbdl(X, S, TrainConfig(lam=float(10.0 ** rng.uniform(-4, 2))))
        model = result.model
        assert divergence_matrix(model, X, X).min() >= -1e-6
        assert np.abs(model.slopes).sum(axis=1).max() <= model.lipschitz + 1e-6
        assert result.report.max_violation <= 1e-6
