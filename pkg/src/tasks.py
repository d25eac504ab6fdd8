"""Downstream uses of a learned divergence: clustering, ranking and k-NN"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
from scipy.stats import rankdata
from sklearn.metrics import rand_score
from sklearn.metrics.cluster import contingency_matrix

from src.core import MaxAffineModel, divergence_matrix
from src.errors import ConfigError, DimensionMismatchError

logger = logging.getLogger(__name__)

MAX_KMEANS_ITER = 200


@dataclass
class ClusteringResult:
    assignment: np.ndarray
    centers: np.ndarray
    objective: float
    iterations: int
    history: List[float] = field(default_factory=list)


@dataclass
class RankingScores:
    auc: np.ndarray
    ave_p: np.ndarray
    queries: np.ndarray
    excluded: int

    @property
    def mean_auc(self) -> float:
        return float(np.mean(self.auc)) if self.auc.size else float("nan")

    @property
    def mean_ave_p(self) -> float:
        return float(np.mean(self.ave_p)) if self.ave_p.size else float("nan")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "auc": self.mean_auc,
            "ave_p": self.mean_ave_p,
            "n_queries": int(self.queries.shape[0]),
            "excluded_queries": self.excluded,
        }


def _lloyd(model: MaxAffineModel, X: np.ndarray, centers: np.ndarray, max_iter: int) -> ClusteringResult:
    n, k = X.shape[0], centers.shape[0]
    assignment = np.full(n, -1)
    history: List[float] = []
    iterations = 0
    for iterations in range(1, max_iter + 1):
        D = divergence_matrix(model, X, centers)
        new_assignment = np.argmin(D, axis=1)
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        for c in range(k):
            members = assignment == c
            if members.any():
                centers[c] = X[members].mean(axis=0)
        empty = np.setdiff1d(np.arange(k), assignment)
        if empty.size:
            own = divergence_matrix(model, X, centers)[np.arange(n), assignment]
            for c in empty:
                far = int(np.argmax(own))
                logger.warning(f"Cluster {c} is empty, re-seeding it at point {far}")
                centers[c] = X[far]
                own[far] = -np.inf
        own = divergence_matrix(model, X, centers)[np.arange(n), assignment]
        history.append(float(own.sum()))
    return ClusteringResult(assignment, centers, history[-1], iterations, history)


def bregman_kmeans(
    model: MaxAffineModel,
    X,
    k: int,
    seed: int = 0,
    restarts: int = 1,
    max_iter: int = MAX_KMEANS_ITER,
) -> ClusteringResult:
    """k-means with assignments by D(x_i, mu_c) and mean representatives.

    The best of ``restarts`` seeded initializations (k distinct data points)
    is returned.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ConfigError(f"k must satisfy 1 <= k <= n = {n}, got {k}")
    if restarts < 1:
        raise ConfigError("restarts must be >= 1")
    rng = np.random.default_rng(seed)
    best: Optional[ClusteringResult] = None
    for r in range(restarts):
        init = np.sort(rng.choice(n, size=k, replace=False))
        result = _lloyd(model, X, X[init].copy(), max_iter)
        logger.debug(f"restart {r}: objective {result.objective:.6g} in {result.iterations} iterations")
        if best is None or result.objective < best.objective:
            best = result
    return best


def _query_scores(divergences: np.ndarray, relevant: np.ndarray):
    n_rel = int(relevant.sum())
    n_irr = relevant.shape[0] - n_rel
    # smaller divergence ranks first; ties share the average rank
    ranks = rankdata(-divergences)
    auc = (ranks[relevant].sum() - n_rel * (n_rel + 1) / 2.0) / (n_rel * n_irr)
    order = np.argsort(divergences, kind="stable")
    hits = np.cumsum(relevant[order])
    positions = np.flatnonzero(relevant[order]) + 1
    ave_p = float(np.mean(hits[positions - 1] / positions))
    return float(auc), ave_p


def rank_all(model: MaxAffineModel, X, labels, query_first: bool = True) -> RankingScores:
    """Rank every other point for each query by ascending divergence.

    ``query_first`` orders the arguments as D(x_query, x_other). Queries whose
    class has no other member are excluded and counted.
    """
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    n = X.shape[0]
    if labels.shape[0] != n:
        raise DimensionMismatchError(n, labels.shape[0], "labels")
    if n < 2 or np.unique(labels).shape[0] < 2:
        raise ConfigError("ranking needs at least two points and two classes")
    D = divergence_matrix(model, X, X)
    if not query_first:
        D = D.T
    aucs, aveps, queries = [], [], []
    excluded = 0
    for q in range(n):
        others = np.flatnonzero(np.arange(n) != q)
        relevant = labels[others] == labels[q]
        if not relevant.any():
            excluded += 1
            continue
        auc, ave_p = _query_scores(D[q, others], relevant)
        aucs.append(auc)
        aveps.append(ave_p)
        queries.append(q)
    if excluded:
        logger.info(f"{excluded} queries without same-class items were excluded")
    return RankingScores(np.asarray(aucs), np.asarray(aveps), np.asarray(queries, dtype=np.int64), excluded)


def _label_key(label: Any) -> tuple:
    """Numeric labels order by value (so "9" < "10"), the rest as text after them"""
    try:
        return (0, float(label), str(label))
    except (TypeError, ValueError):
        return (1, 0.0, str(label))


def _vote(neighbor_labels: np.ndarray) -> Any:
    values, counts = np.unique(neighbor_labels, return_counts=True)
    tied = values[counts == counts.max()]
    return min(tied, key=_label_key)


def _knn_from_divergences(D: np.ndarray, y_train: np.ndarray, k: int) -> np.ndarray:
    order = np.argsort(D, axis=1, kind="stable")[:, :k]
    return np.array([_vote(y_train[row]) for row in order])


def knn_predict(model: MaxAffineModel, X_train, y_train, X_test, k: int = 5, query_first: bool = True) -> np.ndarray:
    """Majority label of the k training points with smallest divergence.

    Ties in distance go to the lower training index, ties in the vote to the
    smallest label.
    """
    y_train = np.asarray(y_train)
    X_train = np.asarray(X_train, dtype=float)
    if not 1 <= k <= X_train.shape[0]:
        raise ConfigError(f"k_neighbors must satisfy 1 <= k <= {X_train.shape[0]}, got {k}")
    if y_train.shape[0] != X_train.shape[0]:
        raise DimensionMismatchError(X_train.shape[0], y_train.shape[0], "training labels")
    if query_first:
        D = divergence_matrix(model, X_test, X_train)
    else:
        D = divergence_matrix(model, X_train, X_test).T
    return _knn_from_divergences(D, y_train, k)


def knn_classify(model: MaxAffineModel, X_train, y_train, X_test, y_test, k: int = 5, query_first: bool = True) -> float:
    """k-NN accuracy on a labeled test set"""
    pred = knn_predict(model, X_train, y_train, X_test, k, query_first)
    return float(np.mean(pred == np.asarray(y_test)))


def knn_leave_one_out(model: MaxAffineModel, X, y, k: int = 5, query_first: bool = True) -> float:
    """k-NN accuracy where each point is classified by all the others"""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    n = X.shape[0]
    if not 1 <= k <= n - 1:
        raise ConfigError(f"k_neighbors must satisfy 1 <= k <= {n - 1}, got {k}")
    D = divergence_matrix(model, X, X)
    if not query_first:
        D = D.T
    D = D.copy()
    np.fill_diagonal(D, np.inf)
    pred = _knn_from_divergences(D, y, k)
    return float(np.mean(pred == y))


def rand_index(assignments, labels) -> float:
    """Fraction of point pairs on which two partitions agree"""
    a = np.asarray(assignments)
    b = np.asarray(labels)
    if a.shape[0] != b.shape[0]:
        raise DimensionMismatchError(a.shape[0], b.shape[0], "partition")
    if a.shape[0] <= 1:
        return 1.0
    return float(rand_score(b, a))


def purity(assignments, labels) -> float:
    """(1/n) sum over clusters of the largest class count in the cluster"""
    a = np.asarray(assignments)
    b = np.asarray(labels)
    if a.shape[0] != b.shape[0]:
        raise DimensionMismatchError(a.shape[0], b.shape[0], "partition")
    if a.shape[0] == 0:
        raise ConfigError("purity of an empty clustering is undefined")
    table = contingency_matrix(b, a)
    return float(table.max(axis=0).sum() / a.shape[0])
