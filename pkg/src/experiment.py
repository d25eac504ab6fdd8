"""Experiment pipelines: the classification benchmark protocol and the
synthetic regression comparison against a Mahalanobis baseline."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from src.data import (
    LabeledDataset,
    SyntheticSpec,
    generate_synthetic,
    sample_points,
    sample_triplets,
    split_folds,
)
from src.errors import ConfigError
from src.learn import DEFAULT_LAMBDA_GRID, TrainConfig, cross_validate, fit, fit_regression, regression_mse
from src.optim import SolverSettings
from src.supervision import RegressionSet
from src.tasks import bregman_kmeans, knn_classify, purity, rand_index, rank_all

logger = logging.getLogger(__name__)

METRICS = ["rand_index", "purity", "auc", "ave_p", "knn_acc"]


class ProtocolConfig(BaseModel):
    """Settings of the clustering / ranking / k-NN benchmark protocol"""

    model_config = ConfigDict(frozen=True)

    folds: int = Field(default=3, ge=2)
    triplets: int = Field(default=2000, ge=0)
    lam: Optional[float] = Field(default=None, ge=0)
    lambda_grid: List[float] = Field(default_factory=lambda: list(DEFAULT_LAMBDA_GRID))
    cv_folds: int = Field(default=3, ge=2)
    hyperplanes: Union[str, int] = "n"
    k_neighbors: int = Field(default=5, ge=1)
    kmeans_restarts: int = Field(default=1, ge=1)
    query_first: bool = True
    scale_features: bool = False
    solver: SolverSettings = Field(default_factory=SolverSettings)

    def train_config(self, seed: int, lam: float = 1.0) -> TrainConfig:
        return TrainConfig(
            lam=lam,
            hyperplanes=self.hyperplanes,
            folds=self.cv_folds,
            lambda_grid=self.lambda_grid,
            seed=seed,
            scale_features=self.scale_features,
            solver=self.solver,
        )


def run_protocol(ds: LabeledDataset, cfg: Optional[ProtocolConfig] = None, seed: int = 0) -> Dict[str, Any]:
    """One repeat of the benchmark: split points into folds, learn on the
    training part, evaluate clustering, ranking and k-NN on the held-out part.
    Metrics are averaged over folds; per-fold values are kept."""
    cfg = cfg or ProtocolConfig()
    rng = np.random.default_rng(seed)
    logger.info(f"Starting protocol on {ds.source or 'dataset'} (n={ds.n}, d={ds.d}) with seed {seed}")

    # Step 1: split points
    folds = split_folds(ds.n, cfg.folds, int(rng.integers(2**31)))
    per_fold: List[Dict[str, float]] = []

    for f, test in enumerate(folds):
        train = np.concatenate([folds[g] for g in range(cfg.folds) if g != f])
        train_ds, test_ds = ds.subset(train), ds.subset(test)
        fold_seed = int(rng.integers(2**31))

        # Step 2: sample comparisons on the training part
        S = sample_triplets(train_ds, cfg.triplets, seed=fold_seed)

        # Step 3: pick lambda
        lam = cfg.lam
        if lam is None:
            lam = cross_validate(train_ds.X, S, cfg.train_config(fold_seed)).best_lambda

        # Step 4: train
        result = fit(train_ds.X, S, cfg.train_config(fold_seed, lam))
        model = result.model

        # Step 5: evaluate on the held-out part
        k = test_ds.classes.shape[0]
        clusters = bregman_kmeans(model, test_ds.X, k, seed=fold_seed, restarts=cfg.kmeans_restarts)
        ranking = rank_all(model, test_ds.X, test_ds.y, cfg.query_first)
        knn = knn_classify(
            model, train_ds.X, train_ds.y, test_ds.X, test_ds.y, min(cfg.k_neighbors, train_ds.n), cfg.query_first
        )
        scores = {
            "rand_index": rand_index(clusters.assignment, test_ds.y),
            "purity": purity(clusters.assignment, test_ds.y),
            "auc": ranking.mean_auc,
            "ave_p": ranking.mean_ave_p,
            "knn_acc": knn,
            "lambda": lam,
            "K": model.K,
            "train_hinge": result.train_loss,
        }
        logger.info(f"Fold {f}: " + ", ".join(f"{m}={scores[m]:.4f}" for m in METRICS))
        per_fold.append(scores)

    summary: Dict[str, Any] = {"seed": seed}
    for metric in METRICS:
        summary[metric] = float(np.mean([s[metric] for s in per_fold]))
    summary["folds"] = per_fold
    return summary


def run_repeats(
    ds: LabeledDataset,
    cfg: Optional[ProtocolConfig] = None,
    repeats: int = 1,
    base_seed: int = 0,
    n_jobs: int = 1,
) -> pd.DataFrame:
    """Independent protocol runs with seeds base_seed + r, one row per repeat"""
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    seeds = [base_seed + r for r in range(repeats)]

    def one(seed: int) -> Dict[str, Any]:
        result = run_protocol(ds, cfg, seed)
        return {"seed": seed, **{m: result[m] for m in METRICS}}

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            rows = list(pool.map(one, seeds))
    else:
        rows = [one(s) for s in seeds]
    return pd.DataFrame(rows, columns=["seed"] + METRICS)


def summarize(results: pd.DataFrame, metrics: Sequence[str] = METRICS) -> pd.DataFrame:
    """Mean and 95% half-width (1.96 standard errors) per metric"""
    rows = []
    for metric in metrics:
        values = results[metric].to_numpy(dtype=float)
        n = values.shape[0]
        half = 1.96 * values.std(ddof=1) / np.sqrt(n) if n > 1 else 0.0
        rows.append({"metric": metric, "mean": float(values.mean()), "ci95": float(half), "n": n})
    return pd.DataFrame(rows).set_index("metric")


@dataclass(frozen=True, eq=False)
class MahalanobisModel:
    matrix: np.ndarray

    def divergence(self, A, B) -> np.ndarray:
        diff = np.atleast_2d(np.asarray(A, dtype=float)) - np.atleast_2d(np.asarray(B, dtype=float))
        return np.einsum("ti,ij,tj->t", diff, self.matrix, diff)


def _project_psd(M: np.ndarray) -> np.ndarray:
    M = (M + M.T) / 2.0
    w, V = np.linalg.eigh(M)
    return (V * np.maximum(w, 0.0)) @ V.T


def mahalanobis_regression(
    X, S: RegressionSet, max_iter: int = 2000, tol: float = 1e-10
) -> MahalanobisModel:
    """Least-squares PSD metric: min_M (1/m) sum ((x_i - x_j)^T M (x_i - x_j) - y)^2

    Accelerated projected gradient with a fixed 1/Lipschitz step and
    gradient-based momentum restart.
    """
    X = np.asarray(X, dtype=float)
    if S.m == 0:
        raise ConfigError("the Mahalanobis baseline needs at least one pair")
    diff = X[S.pairs[:, 0]] - X[S.pairs[:, 1]]
    d = X.shape[1]
    features = np.einsum("ti,tj->tij", diff, diff).reshape(S.m, d * d)
    lipschitz = 2.0 / S.m * np.linalg.norm(features, 2) ** 2
    if lipschitz == 0:
        return MahalanobisModel(np.zeros((d, d)))
    step = 1.0 / lipschitz

    def grad(M: np.ndarray) -> np.ndarray:
        r = features @ M.reshape(-1) - S.targets
        return (2.0 / S.m * (features.T @ r)).reshape(d, d)

    x = x_old = np.zeros((d, d))
    t_old = 1.0
    for it in range(max_iter):
        t = 0.5 + 0.5 * np.sqrt(1.0 + 4.0 * t_old**2)
        w = x + (t_old - 1.0) / t * (x - x_old)
        x_new = _project_psd(w - step * grad(w))
        if np.vdot(w - x_new, x_new - x) > 0:
            # momentum restart
            t = 1.0
        x_old, x, t_old = x, x_new, t
        if np.linalg.norm(x - x_old) <= tol * max(1.0, np.linalg.norm(x)):
            break
    logger.debug(f"Mahalanobis fit finished after {it + 1} iterations")
    return MahalanobisModel(x)


def _points_for_pairs(m: int) -> int:
    n = 2
    while n * (n - 1) < m:
        n += 1
    return n


def regression_experiment(
    kind: str,
    schedule: Sequence[int] = (20, 80, 320),
    seeds: Sequence[int] = tuple(range(10)),
    noise: float = 0.05,
    n_test: int = 1000,
    test_pairs: int = 1000,
    cfg: Optional[TrainConfig] = None,
) -> pd.DataFrame:
    """Test MSE against noiseless divergences as the number of training pairs grows.

    Training pairs are the first m ordered pairs of a growing point set;
    test pairs are drawn among fresh points.
    """
    if not schedule or min(schedule) < 1:
        raise ConfigError("schedule must hold positive pair counts")
    rows = []
    for seed in seeds:
        spec = SyntheticSpec(kind=kind, n=_points_for_pairs(max(schedule)), noise=noise, seed=seed)
        data = generate_synthetic(spec)
        rng = np.random.default_rng([seed, 1])
        X_test = sample_points(spec, n_test, rng)
        first = rng.integers(n_test, size=test_pairs)
        second = (first + rng.integers(1, n_test, size=test_pairs)) % n_test
        truth = data.oracle(X_test[first], X_test[second])
        test_set = RegressionSet(np.column_stack([first, second]), truth)

        for m in sorted(schedule):
            S = data.supervision.subset(np.arange(m))
            result = fit_regression(data.X, S, cfg)
            baseline = mahalanobis_regression(data.X, S)
            pred = baseline.divergence(X_test[first], X_test[second])
            row = {
                "kind": kind,
                "m": m,
                "seed": seed,
                "pbdl_mse": regression_mse(result.model, X_test, test_set),
                "mahalanobis_mse": float(np.mean(np.square(pred - truth))),
            }
            logger.info(f"{kind} m={m} seed={seed}: PBDL {row['pbdl_mse']:.4g}, Mahalanobis {row['mahalanobis_mse']:.4g}")
            rows.append(row)
    return pd.DataFrame(rows)


def regression_summary(results: pd.DataFrame) -> pd.DataFrame:
    """Median test MSE per m and method"""
    return results.groupby("m")[["pbdl_mse", "mahalanobis_mse"]].median().reset_index()
