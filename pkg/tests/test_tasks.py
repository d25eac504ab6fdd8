"""Tests for clustering, ranking and nearest-neighbor tasks."""

import logging

import numpy as np
import pytest
from sklearn.cluster import KMeans

from src.core import MaxAffineModel, divergence_matrix, grid_approximator, squared_norm_spec
from src.errors import ConfigError, DimensionMismatchError
from src.tasks import (
    bregman_kmeans,
    knn_classify,
    knn_leave_one_out,
    knn_predict,
    purity,
    rand_index,
    rank_all,
)
from tests.conftest import random_model

# cell boundaries of this model sit at multiples of 0.4
LINE_MODEL = grid_approximator(squared_norm_spec(1, radius=4.0), 20)
FLAT_MODEL = MaxAffineModel([[1.0, -1.0]], [0.0], 2.0)
BLOB_MODEL = grid_approximator(squared_norm_spec(1, radius=12.0), 120)


def _brute_force_scores(D_row: np.ndarray, relevant: np.ndarray):
    pos = D_row[relevant]
    neg = D_row[~relevant]
    wins = sum(1.0 if p < q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    auc = wins / (pos.size * neg.size)
    order = sorted(range(D_row.size), key=lambda t: (D_row[t], t))
    hits, precisions = 0, []
    for rank, t in enumerate(order, start=1):
        if relevant[t]:
            hits += 1
            precisions.append(hits / rank)
    return auc, float(np.mean(precisions))


def test_kmeans_recovers_blobs():
    X = np.array([[0.05], [0.15], [10.05], [10.15]])
    result = bregman_kmeans(BLOB_MODEL, X, 2, seed=0, restarts=3)
    assert rand_index(result.assignment, [0, 0, 1, 1]) == 1.0
    np.testing.assert_allclose(np.sort(result.centers.ravel()), [0.1, 10.1])


def test_kmeans_every_point_its_own_cluster():
    X = np.array([[0.05], [1.05], [2.05], [3.05], [-1.95]])
    result = bregman_kmeans(LINE_MODEL, X, 5, seed=1)
    assert result.objective == 0.0
    assert sorted(result.assignment.tolist()) == list(range(5))


def test_kmeans_objective_never_increases(squared_model):
    rng = np.random.default_rng(21)
    X = np.vstack([rng.normal(loc, 0.8, size=(15, 2)) for loc in ([-4, 0], [3, 3], [2, -5])])
    result = bregman_kmeans(squared_model, X, 3, seed=2)
    history = np.asarray(result.history)
    assert np.all(np.diff(history) <= 1e-9 * max(1.0, history[0]))


def test_kmeans_is_a_lloyd_fixed_point(squared_model):
    rng = np.random.default_rng(4)
    X = np.vstack([rng.normal(loc, 0.5, size=(20, 2)) for loc in ([-5, -5], [5, 5], [5, -5])])
    result = bregman_kmeans(squared_model, X, 3, seed=0, restarts=5)
    km = KMeans(n_clusters=3, init=result.centers, n_init=1).fit(X)
    assert np.array_equal(km.labels_, result.assignment)
    np.testing.assert_allclose(km.cluster_centers_, result.centers, atol=1e-9)
    assert result.objective == history[-1]


def test_kmeans_reseeds_empty_clusters(tangent_model, caplog):
    X = np.array([[0.0], [0.0], [0.0], [10.0]])
    with caplog.at_level(logging.WARNING, logger="src.tasks"):
        result = bregman_kmeans(tangent_model, X, 4)
    assert result.objective == 0.0
    assert sum("empty" in r.message for r in caplog.records) == 2


def test_kmeans_rejects_bad_k(tangent_model):
    with pytest.raises(ConfigError):
        bregman_kmeans(tangent_model, [[0.0], [1.0]], 3)
    with pytest.raises(ConfigError):
        bregman_kmeans(tangent_model, [[0.0], [1.0]], 1, restarts=0)


def test_ranking_perfect_separation(squared_model, toy_separable):
    scores = rank_all(squared_model, toy_separable.X, toy_separable.y)
    assert scores.mean_auc == 1.0
    assert scores.mean_ave_p == 1.0
    assert scores.excluded == 0


def test_ranking_constant_divergence():
    X = np.random.default_rng(4).normal(size=(6, 2))
    scores = rank_all(FLAT_MODEL, X, ["a", "a", "a", "b", "b", "b"])
    np.testing.assert_allclose(scores.auc, 0.5)


def test_ranking_single_query_example():
    X = np.array([[0.05], [1.05], [2.05], [3.05]])
    scores = rank_all(LINE_MODEL, X, ["a", "a", "b", "a"])
    assert scores.queries[0] == 0
    assert scores.auc[0] == pytest.approx(0.5)
    assert scores.ave_p[0] == pytest.approx(5.0 / 6.0)


def test_ranking_matches_pair_counting(rng):
    model = random_model(rng, K=4, d=2)
    X = rng.uniform(-1, 1, size=(12, 2))
    labels = rng.integers(0, 3, size=12)
    labels[:3] = [0, 1, 2]
    scores = rank_all(model, X, labels)
    D = divergence_matrix(model, X, X)
    for t, q in enumerate(scores.queries):
        others = np.flatnonzero(np.arange(12) != q)
        auc, ave_p = _brute_force_scores(D[q, others], labels[others] == labels[q])
        assert scores.auc[t] == pytest.approx(auc)
        assert scores.ave_p[t] == pytest.approx(ave_p)


def test_ranking_argument_order(rng):
    model = random_model(rng, K=5, d=2)
    X = rng.uniform(-1, 1, size=(10, 2))
    labels = np.array([0, 1] * 5)
    forward = rank_all(model, X, labels, query_first=True)
    backward = rank_all(model, X, labels, query_first=False)
    D = divergence_matrix(model, X, X).T
    others = np.arange(1, 10)
    auc, _ = _brute_force_scores(D[0, others], labels[others] == labels[0])
    assert backward.auc[0] == pytest.approx(auc)
    assert forward.queries.tolist() == backward.queries.tolist()


def test_ranking_excludes_singleton_classes():
    X = np.array([[0.05], [1.05], [2.05]])
    scores = rank_all(LINE_MODEL, X, ["a", "a", "b"])
    assert scores.excluded == 1
    assert scores.to_dict()["n_queries"] == 2


def test_ranking_needs_two_classes():
    with pytest.raises(ConfigError):
        rank_all(LINE_MODEL, [[0.0], [1.0]], ["a", "a"])
    with pytest.raises(DimensionMismatchError):
        rank_all(LINE_MODEL, [[0.0], [1.0]], ["a"])


def test_knn_exact_match():
    X_train = np.array([[0.05], [1.05], [2.05]])
    pred = knn_predict(LINE_MODEL, X_train, ["a", "b", "c"], [[1.05]], k=1)
    assert pred.tolist() == ["b"]


def test_knn_separated_blobs(squared_model, toy_separable):
    assert knn_leave_one_out(squared_model, toy_separable.X, toy_separable.y, k=3) == 1.0
    acc = knn_classify(
        squared_model, toy_separable.X, toy_separable.y, [[0.05, 0.05], [10.05, 10.05]], ["a", "b"], k=3
    )
    assert acc == 1.0


def test_knn_constant_divergence_votes_majority():
    X = np.random.default_rng(8).normal(size=(3, 2))
    pred = knn_predict(FLAT_MODEL, X, ["a", "b", "b"], X, k=3)
    assert pred.tolist() == ["b", "b", "b"]


def test_knn_vote_ties_order_numeric_labels_by_value():
    X = np.random.default_rng(8).normal(size=(2, 2))
    assert knn_predict(FLAT_MODEL, X, ["10", "9"], X[:1], k=2).tolist() == ["9"]
    assert knn_predict(FLAT_MODEL, X, ["b", "a"], X[:1], k=2).tolist() == ["a"]
    assert knn_predict(FLAT_MODEL, X, ["cat", "10"], X[:1], k=2).tolist() == ["10"]


def test_knn_rejects_bad_k():
    with pytest.raises(ConfigError):
        knn_predict(LINE_MODEL, [[0.0]], ["a"], [[0.0]], k=2)
    with pytest.raises(ConfigError):
        knn_leave_one_out(LINE_MODEL, [[0.0], [1.0]], ["a", "b"], k=2)


def test_rand_index_examples():
    assert rand_index([0, 0, 1], [0, 1, 1]) == pytest.approx(1.0 / 3.0)
    assert rand_index([2, 2, 5, 5], [0, 0, 1, 1]) == 1.0
    assert rand_index([0], [3]) == 1.0
    with pytest.raises(DimensionMismatchError):
        rand_index([0, 1], [0])


def test_rand_index_symmetric_and_label_invariant(rng):
    for _ in range(20):
        a = rng.integers(0, 4, size=30)
        b = rng.integers(0, 3, size=30)
        assert rand_index(a, b) == pytest.approx(rand_index(b, a))
        relabeled = rng.permutation(4)[a] + 10
        assert rand_index(relabeled, b) == pytest.approx(rand_index(a, b))


def test_purity_examples():
    assert purity([0, 0, 0, 1, 1], ["a", "a", "b", "b", "b"]) == pytest.approx(0.8)
    assert purity([0, 0, 0, 0], ["a", "b", "a", "b"]) == 0.5
    assert purity([1, 1, 0], ["x", "x", "y"]) == 1.0
