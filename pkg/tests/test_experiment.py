"""Tests for the benchmark protocol and the synthetic regression comparison."""

import os

import numpy as np
import pandas as pd
import pytest

from src.data import (
    LabeledDataset,
    default_mahalanobis_matrix,
    growing_pairs,
    load_builtin,
    load_csv,
    true_divergence,
)
from src.errors import ConfigError
from src.experiment import (
    METRICS,
    ProtocolConfig,
    mahalanobis_regression,
    regression_experiment,
    regression_summary,
    run_protocol,
    run_repeats,
    summarize,
)
from src.supervision import RegressionSet


@pytest.fixture
def blobs():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(0.0, 0.3, size=(12, 2)), rng.normal(5.0, 0.3, size=(12, 2))])
    return LabeledDataset(X, ["a"] * 12 + ["b"] * 12, source="blobs")


def test_mahalanobis_regression_recovers_matrix():
    rng = np.random.default_rng(1)
    X = rng.uniform(-1, 1, size=(8, 2))
    pairs = growing_pairs(8)[:40]
    M = default_mahalanobis_matrix(2)
    targets = true_divergence("mahalanobis", X[pairs[:, 0]], X[pairs[:, 1]], M)
    model = mahalanobis_regression(X, RegressionSet(pairs, targets))
    np.testing.assert_allclose(model.matrix, M, atol=1e-3)
    assert np.all(np.linalg.eigvalsh(model.matrix) >= -1e-12)


def test_mahalanobis_regression_stays_psd_on_negative_targets():
    X = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    S = RegressionSet([[0, 1], [0, 2]], [-1.0, -2.0])
    model = mahalanobis_regression(X, S)
    assert np.all(np.linalg.eigvalsh(model.matrix) >= -1e-12)
    np.testing.assert_allclose(model.divergence(X[[0]], X[[1]]), 0.0, atol=1e-6)


def test_mahalanobis_regression_needs_pairs():
    with pytest.raises(ConfigError):
        mahalanobis_regression(np.zeros((2, 2)), RegressionSet(np.zeros((0, 2)), []))


def test_summarize():
    results = pd.DataFrame({"auc": [0.0, 1.0], "purity": [0.5, 0.5]})
    summary = summarize(results, ["auc", "purity"])
    assert summary.loc["auc", "mean"] == 0.5
    assert summary.loc["auc", "ci95"] == pytest.approx(1.96 * np.sqrt(0.5) / np.sqrt(2))
    assert summary.loc["purity", "ci95"] == 0.0
    single = summarize(pd.DataFrame({"auc": [0.7]}), ["auc"])
    assert single.loc["auc", "ci95"] == 0.0


def test_run_protocol_on_blobs(blobs):
    cfg = ProtocolConfig(folds=2, triplets=30, lam=1e-3, k_neighbors=3)
    result = run_protocol(blobs, cfg, seed=3)
    assert len(result["folds"]) == 2
    for metric in METRICS:
        assert 0.0 <= result[metric] <= 1.0
    assert all(fold["lambda"] == 1e-3 for fold in result["folds"])


def test_run_protocol_with_cross_validation(blobs):
    cfg = ProtocolConfig(folds=2, triplets=12, lambda_grid=[1e-3, 1e6], k_neighbors=3)
    result = run_protocol(blobs, cfg, seed=1)
    assert all(fold["lambda"] in (1e-3, 1e6) for fold in result["folds"])


def test_run_repeats_is_deterministic(blobs):
    cfg = ProtocolConfig(folds=2, triplets=20, lam=1e-3, k_neighbors=3)
    first = run_repeats(blobs, cfg, repeats=2, base_seed=5)
    second = run_repeats(blobs, cfg, repeats=2, base_seed=5, n_jobs=2)
    assert first["seed"].tolist() == [5, 6]
    pd.testing.assert_frame_equal(first, second)


def test_run_repeats_rejects_zero():
    with pytest.raises(ConfigError):
        run_repeats(LabeledDataset(np.zeros((2, 1)), ["a", "b"]), repeats=0)


def test_regression_experiment_shape():
    results = regression_experiment("squared_euclidean", schedule=(6, 12), seeds=[0], noise=0.0, n_test=30, test_pairs=40)
    assert results["m"].tolist() == [6, 12]
    assert np.all(np.isfinite(results["pbdl_mse"]))
    summary = regression_summary(results)
    assert list(summary.columns) == ["m", "pbdl_mse", "mahalanobis_mse"]


def test_regression_experiment_rejects_empty_schedule():
    with pytest.raises(ConfigError):
        regression_experiment("kl_dirichlet", schedule=())


@pytest.mark.slow
def test_benchmark_protocol_on_iris():
    ds = load_builtin("iris")
    result = run_protocol(ds, ProtocolConfig(triplets=300, lam=1e-3), seed=0)
    assert result["knn_acc"] >= 0.8
    assert result["auc"] >= 0.8


def _protocol_means(ds, repeats=20):
    results = run_repeats(ds, ProtocolConfig(triplets=2000), repeats=repeats)
    return 100.0 * summarize(results)["mean"]


def _assert_near(means, expected, tolerance):
    for metric, target in zip(("rand_index", "purity", "auc", "ave_p"), expected):
        assert abs(means[metric] - target) <= tolerance, f"{metric}: {means[metric]:.1f} vs {target}"


@pytest.mark.slow
def test_protocol_reproduces_iris_scores():
    _assert_near(_protocol_means(load_builtin("iris")), (94.5, 95.6, 96.5, 93.5), 3.0)


@pytest.mark.slow
def test_protocol_reproduces_balance_scale_scores():
    _assert_near(_protocol_means(load_builtin("balance_scale")), (84.4, 87.8, 86.0, 82.9), 4.0)


@pytest.mark.slow
@pytest.mark.xfail(strict=False, reason="reference scores on wine are not a release gate")
def test_protocol_reproduces_wine_scores():
    _assert_near(_protocol_means(load_builtin("wine")), (83.7, 85.0, 91.0, 86.7), 4.0)


@pytest.mark.slow
@pytest.mark.xfail(strict=False, reason="reference scores on transfusion are not a release gate")
def test_protocol_reproduces_transfusion_scores():
    path = os.environ.get("PBDL_TRANSFUSION_CSV")
    if not path:
        pytest.skip("set PBDL_TRANSFUSION_CSV to the transfusion CSV")
    ds = load_csv(path, os.environ.get("PBDL_TRANSFUSION_LABEL", "label"))
    _assert_near(_protocol_means(ds), (57.9, 75.9, 54.9, 68.2), 4.0)


@pytest.mark.slow
@pytest.mark.parametrize("kind", ["kl_dirichlet", "itakura_saito"])
def test_pbdl_beats_mahalanobis_on_non_quadratic_generators(kind):
    summary = regression_summary(regression_experiment(kind, seeds=range(10))).set_index("m")
    assert summary.loc[320, "pbdl_mse"] < summary.loc[320, "mahalanobis_mse"]


@pytest.mark.slow
def test_pbdl_close_to_mahalanobis_on_quadratic_generator():
    summary = regression_summary(regression_experiment("mahalanobis", seeds=range(10))).set_index("m")
    pbdl, baseline = summary.loc[320, "pbdl_mse"], summary.loc[320, "mahalanobis_mse"]
    assert max(pbdl, baseline) <= 2.0 * min(pbdl, baseline)


@pytest.mark.slow
def test_regression_error_falls_with_more_pairs():
    summary = regression_summary(regression_experiment("squared_euclidean", seeds=range(10))).set_index("m")
    mse = summary["pbdl_mse"]
    assert mse.loc[80] <= 1.05 * mse.loc[20]
    assert mse.loc[320] < mse.loc[20]
