"""Tests for the comparison and regression learners, partitions and CV."""

from itertools import combinations

import numpy as np
import pytest
from pydantic import ValidationError

from src.core import bounds, divergence_matrix, generalization_terms, paired_divergences
from src.data import sample_triplets
from src.errors import ConfigError, DatasetError
from src.learn import (
    Partition,
    TrainConfig,
    cross_validate,
    farthest_point_partition,
    fit,
    fit_pbdl,
    fit_pbdl_partitioned,
    fit_regression,
    generalization_diagnostic,
    hinge_losses,
    resolve_hyperplanes,
)
from src.supervision import QuadrupletSet, RegressionSet

LINE = np.array([[0.0], [0.1], [10.0]])
LINE_S = QuadrupletSet([[0, 1, 0, 2]])

BLOBS = np.array([[0.0], [0.1], [10.0], [10.1]])
BLOBS_S = QuadrupletSet([[0, 1, 0, 2], [2, 3, 2, 0], [1, 0, 1, 3], [3, 2, 3, 1]])


def test_pbdl_orders_toy_line():
    result = fit_pbdl(LINE, LINE_S, TrainConfig(lam=1e-4))
    assert result.report.optimal
    assert result.model.K == 3
    # zero slack: D(x0, x2) reaches 20 L at best, so L = 1 / 20
    assert result.learned_lipschitz == pytest.approx(0.05, abs=1e-5)
    assert result.objective == pytest.approx(1e-4 * 0.05, abs=1e-6)
    # x2 sits on a kink of the optimum, where the widest subgradient is the LP's own
    near = paired_divergences(result.model, LINE[[0]], LINE[[1]], tie_break="max_divergence")[0]
    far = paired_divergences(result.model, LINE[[0]], LINE[[2]], tie_break="max_divergence")[0]
    assert near + 1.0 <= far + 1e-4


def test_pbdl_model_is_feasible_and_within_budget():
    result = fit_pbdl(BLOBS, BLOBS_S, TrainConfig(lam=1e-3))
    model = result.model
    assert np.abs(model.slopes).sum(axis=1).max() <= model.lipschitz + 1e-7
    assert result.learned_lipschitz >= np.abs(model.slopes).sum(axis=1).max() - 1e-6
    D = divergence_matrix(model, BLOBS, BLOBS)
    assert D.min() >= -1e-12


def test_pbdl_without_comparisons_is_flat():
    X = np.random.default_rng(0).uniform(-1, 1, size=(5, 2))
    result = fit_pbdl(X, QuadrupletSet(np.zeros((0, 4))), TrainConfig(lam=1.0))
    assert result.objective == pytest.approx(0.0, abs=1e-6)
    assert result.model.lipschitz <= 1e-6
    assert divergence_matrix(result.model, X, X).max() <= 1e-6
    assert result.observed.tolist() == list(range(5))


def test_pbdl_huge_lambda_collapses():
    result = fit_pbdl(LINE, LINE_S, TrainConfig(lam=1e8))
    assert result.learned_lipschitz <= 1e-6
    assert result.train_loss == pytest.approx(1.0, abs=1e-4)


def test_partition_identity_matches_interpolant():
    cfg = TrainConfig(lam=1e-4)
    plain = fit_pbdl(LINE, LINE_S, cfg)
    partitioned = fit_pbdl_partitioned(LINE, LINE_S, Partition.identity(3), cfg)
    assert partitioned.kind == "pbdl_partitioned"
    assert partitioned.objective == pytest.approx(plain.objective, abs=1e-5)


def test_single_cell_partition_is_affine():
    partition = Partition(np.zeros(3, dtype=np.int64), np.array([0]), 10.0)
    result = fit_pbdl_partitioned(LINE, LINE_S, partition, TrainConfig(lam=1e-4))
    assert result.model.K == 1
    assert divergence_matrix(result.model, LINE, LINE).max() == 0.0
    assert result.train_loss == pytest.approx(1.0, abs=1e-6)


def test_two_cell_partition_separates_blobs():
    partition = farthest_point_partition(BLOBS, 2, first=0)
    result = fit_pbdl_partitioned(BLOBS, BLOBS_S, partition, TrainConfig(lam=1e-4))
    assert result.model.K == 2
    assert result.train_loss <= 1e-4
    assert np.all(hinge_losses(result.model, BLOBS, BLOBS_S) <= 1e-4)


def test_partition_drops_unobserved_cells():
    X = np.array([[0.0], [0.1], [10.0], [50.0]])
    partition = Partition(np.array([0, 0, 1, 2]), np.array([0, 2, 3]), 0.1)
    result = fit_pbdl_partitioned(X, LINE_S, partition, TrainConfig(lam=1e-4))
    assert result.model.K == 2


def test_fit_dispatches_on_hyperplanes():
    result = fit(BLOBS, BLOBS_S, TrainConfig(lam=1e-4, hyperplanes=2))
    assert result.kind == "pbdl_partitioned"
    assert result.model.K == 2
    result = fit(BLOBS, BLOBS_S, TrainConfig(lam=1e-4))
    assert result.kind == "pbdl"
    assert result.model.K == 4


def test_resolve_hyperplanes():
    S = QuadrupletSet(np.zeros((100, 4), dtype=np.int64))
    assert resolve_hyperplanes(TrainConfig(), S, 50, 1) is None
    assert resolve_hyperplanes(TrainConfig(hyperplanes="auto"), S, 50, 1) == 3
    assert resolve_hyperplanes(TrainConfig(hyperplanes=80), S, 50, 1) == 50


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(hyperplanes=0)
    with pytest.raises(ValidationError):
        TrainConfig(lambda_grid=[])
    with pytest.raises(ValidationError):
        TrainConfig(lam=-1.0)


def test_comparison_index_out_of_range():
    with pytest.raises(DatasetError):
        fit_pbdl(LINE, QuadrupletSet([[0, 1, 0, 5]]))


def test_regression_recovers_squared_euclidean():
    rng = np.random.default_rng(11)
    X = rng.uniform(-1, 1, size=(12, 2))
    pairs = np.array([(i, j) for i in range(12) for j in range(12) if i != j])
    targets = np.sum((X[pairs[:, 0]] - X[pairs[:, 1]]) ** 2, axis=1)
    result = fit_regression(X, RegressionSet(pairs, targets))
    assert result.report.optimal
    assert result.train_loss <= 1e-8
    assert result.learned_lipschitz is None


def test_regression_zero_targets_gives_flat_model():
    X = np.random.default_rng(2).uniform(-1, 1, size=(6, 2))
    pairs = np.array([[0, 1], [2, 3], [4, 5]])
    result = fit_regression(X, RegressionSet(pairs, np.zeros(3)))
    assert result.train_loss <= 1e-8


def test_regression_single_pair_fits_exactly():
    X = np.array([[0.0, 0.0], [1.0, 2.0]])
    result = fit_regression(X, RegressionSet([[0, 1]], [5.0]))
    assert result.train_loss <= 1e-8
    assert paired_divergences(result.model, X[[0]], X[[1]])[0] == pytest.approx(5.0, abs=1e-4)


def test_regression_needs_pairs():
    with pytest.raises(ConfigError):
        fit_regression(LINE, RegressionSet(np.zeros((0, 2)), []))


def test_farthest_point_example():
    partition = farthest_point_partition([[0.0], [1.0], [2.0], [10.0]], 2, first=0)
    assert partition.centers.tolist() == [0, 3]
    assert partition.assignment.tolist() == [0, 0, 0, 1]
    assert partition.radius == 2.0


def test_farthest_point_every_point_its_own_center():
    X = np.random.default_rng(5).normal(size=(7, 3))
    partition = farthest_point_partition(X, 7, seed=3)
    assert sorted(partition.centers.tolist()) == list(range(7))
    assert partition.radius == 0.0
    assert np.array_equal(partition.assignment[partition.centers], np.arange(7))


def test_farthest_point_handles_duplicates():
    X = np.zeros((4, 2))
    partition = farthest_point_partition(X, 3, first=0)
    assert len(set(partition.centers.tolist())) == 3
    assert partition.radius == 0.0


def test_farthest_point_two_approximation():
    rng = np.random.default_rng(9)
    for _ in range(20):
        n = int(rng.integers(3, 9))
        X = rng.uniform(-1, 1, size=(n, 2))
        dist = np.abs(X[:, None, :] - X[None, :, :]).max(axis=2)
        optimal = min(dist[:, list(c)].min(axis=1).max() for c in combinations(range(n), 2))
        partition = farthest_point_partition(X, 2, seed=int(rng.integers(100)))
        assert partition.radius <= 2 * optimal + 1e-12


def test_farthest_point_rejects_bad_K():
    with pytest.raises(ConfigError):
        farthest_point_partition(LINE, 4)
    with pytest.raises(ConfigError):
        farthest_point_partition(LINE, 0)


def test_cross_validate_single_lambda(toy_separable):
    S = sample_triplets(toy_separable, m=12, seed=1)
    cv = cross_validate(toy_separable.X, S, TrainConfig(lambda_grid=[0.5]))
    assert cv.best_lambda == 0.5
    assert cv.scores.shape[0] == 3


def test_cross_validate_prefers_small_lambda(toy_separable):
    S = sample_triplets(toy_separable, m=12, seed=1)
    cv = cross_validate(toy_separable.X, S, TrainConfig(lambda_grid=[1e8, 1e-8]))
    assert cv.best_lambda == 1e-8
    summary = cv.summary()
    assert set(summary["lam"]) == {1e-8, 1e8}


def test_cross_validate_is_deterministic(toy_separable):
    S = sample_triplets(toy_separable, m=12, seed=1)
    cfg = TrainConfig(lambda_grid=[1e-4, 1.0], seed=4)
    first = cross_validate(toy_separable.X, S, cfg)
    second = cross_validate(toy_separable.X, S, cfg.model_copy(update={"n_jobs": 2}))
    assert first.best_lambda == second.best_lambda
    assert first.scores["score"].tolist() == second.scores["score"].tolist()


def test_cross_validate_needs_enough_rows():
    with pytest.raises(ConfigError):
        cross_validate(LINE, LINE_S, TrainConfig(folds=3))


def test_generalization_diagnostic_on_separable_data():
    model = fit(BLOBS, BLOBS_S, TrainConfig(lam=1e-4, hyperplanes=2)).model
    report = bounds(1.0, 10.1, model.K, 1, model.lipschitz, BLOBS_S.m, 0.05)
    diag = generalization_diagnostic(model, BLOBS, BLOBS_S, BLOBS_S, report)
    assert diag.test_error == 0.0
    assert diag.train_hinge <= 1e-4
    assert diag.within_bound
    assert diag.complexity == report.gen_bound_terms.complexity
    assert diag.confidence == report.gen_bound_terms.confidence
    assert diag.to_dict()["rhs"] == pytest.approx(diag.rhs)


def test_diagnostic_without_report_uses_data_radius():
    model = fit(BLOBS, BLOBS_S, TrainConfig(lam=1e-4, hyperplanes=2)).model
    diag = generalization_diagnostic(model, BLOBS, BLOBS_S, BLOBS_S)
    terms = generalization_terms(10.1, model.K, 1, model.lipschitz, BLOBS_S.m, 0.05)
    assert diag.complexity == pytest.approx(terms.complexity)
    assert diag.confidence == pytest.approx(terms.confidence)


@pytest.mark.parametrize("beta", [0.5, 1.0, 7.0])
def test_bound_terms_do_not_depend_on_smoothness(beta):
    report = bounds(beta, 3.0, 5, 2, 1.5, 40, 0.1)
    terms = generalization_terms(3.0, 5, 2, 1.5, 40, 0.1)
    assert report.gen_bound_terms == terms


def test_pbdl_with_duplicated_points():
    X = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [1.0, 1.0], [3.0, 0.5]])
    S = QuadrupletSet([[0, 1, 0, 4], [2, 3, 2, 4], [1, 0, 1, 2], [4, 2, 4, 0]])
    result = fit_pbdl(X, S, TrainConfig(lam=1e-3))
    model = result.model
    assert result.report.status.value in ("optimal", "max_iter")
    assert divergence_matrix(model, X, X).min() >= -1e-6
    assert np.abs(model.slopes).sum(axis=1).max() <= model.lipschitz + 1e-6
    np.testing.assert_allclose(divergence_matrix(model, X[[0]], X[[1]]), 0.0, atol=1e-6)


@pytest.mark.parametrize("hyperplanes", ["n", 6])
def test_lazy_convexity_rows_reach_full_optimum(monkeypatch, hyperplanes):
    rng = np.random.default_rng(17)
    X = rng.uniform(-1, 1, size=(20, 2))
    idx = np.array([rng.choice(20, 3, replace=False) for _ in range(40)])
    S = QuadrupletSet(np.column_stack([idx[:, 0], idx[:, 1], idx[:, 0], idx[:, 2]]))
    cfg = TrainConfig(lam=1e-2, hyperplanes=hyperplanes)
    full = fit(X, S, cfg)
    monkeypatch.setattr("src.learn.FULL_ROW_LIMIT", 0)
    lazy = fit(X, S, cfg)
    assert full.cut_rounds == 1
    assert lazy.cut_rounds >= 1
    assert lazy.objective == pytest.approx(full.objective, rel=1e-5, abs=1e-6)
    assert divergence_matrix(lazy.model, X, X).min() >= -1e-6
    assert np.abs(lazy.model.slopes).sum(axis=1).max() <= lazy.model.lipschitz + 1e-6


def test_lazy_convexity_rows_in_regression(monkeypatch):
    rng = np.random.default_rng(19)
    X = rng.uniform(-1, 1, size=(15, 2))
    pairs = np.array([rng.choice(15, 2, replace=False) for _ in range(40)])
    targets = np.sum((X[pairs[:, 0]] - X[pairs[:, 1]]) ** 2, axis=1) + rng.normal(0.0, 0.05, size=40)
    S = RegressionSet(pairs, targets)
    full = fit_regression(X, S)
    monkeypatch.setattr("src.learn.FULL_ROW_LIMIT", 0)
    lazy = fit_regression(X, S)
    assert lazy.objective == pytest.approx(full.objective, rel=1e-5, abs=1e-8)
    assert divergence_matrix(lazy.model, X, X).min() >= -1e-6
    assert lazy.to_dict()["cut_rounds"] == lazy.cut_rounds


def test_learned_lipschitz_shrinks_as_lambda_grows(toy_separable):
    S = sample_triplets(toy_separable, m=12, seed=1)
    learned = [fit_pbdl(toy_separable.X, S, TrainConfig(lam=lam)).learned_lipschitz for lam in (1e-2, 1.0, 100.0)]
    assert all(later <= earlier + 1e-3 for earlier, later in zip(learned, learned[1:]))
