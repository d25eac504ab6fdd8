"""Learning max-affine Bregman generators from supervision.

Two parameterizations share the same program assembly:

* interpolant: one (z_i, a_i) pair per observed point, tied together by the
  rows z_i - z_j >= a_j^T (x_i - x_j);
* partitioned: K shared hyperplanes (a_k, b_k) with a fixed point-to-cell map
  p_i and rows b_k + a_k^T x_j <= b_{p_j} + a_{p_j}^T x_j.

In both the divergence between two observed points is linear in the
variables, so comparison supervision gives an LP and regression supervision
a least-squares QP. One gauge variable is pinned to zero because divergences
are unchanged by adding a constant to the generator.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.spatial.distance import cdist

from src.core import (
    FEASIBILITY_TOL,
    BoundReport,
    FeatureScale,
    InterpolantSolution,
    MaxAffineModel,
    generalization_terms,
    interpolant_to_model,
    paired_divergences,
)
from src.data import split_folds
from src.errors import ConfigError, DimensionMismatchError, InfeasibleInterpolantError, SolverFailureError
from src.optim import (
    ConstraintBuilder,
    LinearProgram,
    QuadraticProgram,
    SolveReport,
    SolverSettings,
    SolveStatus,
    dump_program,
    solve_lp,
    solve_qp,
)
from src.supervision import QuadrupletSet, RegressionSet

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA_GRID = [10.0**e for e in range(-8, 5)]

# convexity rows are added lazily once a program would exceed FULL_ROW_LIMIT
FULL_ROW_LIMIT = 4000
INITIAL_NEIGHBORS = 10
CUTS_PER_POINT = 10
UNCAPPED_AFTER = 20

Supervision = Union[QuadrupletSet, RegressionSet]


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    lam: float = Field(default=1.0, ge=0)
    hyperplanes: Union[Literal["n", "auto"], int] = "n"
    folds: int = Field(default=3, ge=2)
    lambda_grid: List[float] = Field(default_factory=lambda: list(DEFAULT_LAMBDA_GRID))
    K_grid: Optional[List[int]] = None
    seed: int = 0
    margin: float = Field(default=1.0, ge=0)
    lipschitz: Optional[bool] = None
    scale_features: bool = False
    n_jobs: int = Field(default=1, ge=1)
    solver: SolverSettings = Field(default_factory=SolverSettings)
    dump_program: Optional[str] = None

    @field_validator("hyperplanes")
    @classmethod
    def _positive_hyperplanes(cls, value):
        if isinstance(value, int) and value < 1:
            raise ValueError("hyperplanes must be >= 1")
        return value

    @field_validator("lambda_grid")
    @classmethod
    def _valid_grid(cls, value):
        if not value or any(v < 0 for v in value):
            raise ValueError("lambda_grid must be non-empty with entries >= 0")
        return value


@dataclass(frozen=True, eq=False)
class Partition:
    """Assignment of points to K cells around data-point centers"""

    assignment: np.ndarray
    centers: np.ndarray
    radius: float

    @property
    def K(self) -> int:
        return self.centers.shape[0]

    @classmethod
    def identity(cls, n: int) -> "Partition":
        return cls(np.arange(n), np.arange(n), 0.0)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "K": self.K,
            "centers": self.centers.tolist(),
            "assignment": self.assignment.tolist(),
            "radius": self.radius,
        }


@dataclass
class TrainResult:
    model: MaxAffineModel
    objective: float
    train_loss: float
    learned_lipschitz: Optional[float]
    report: SolveReport
    observed: np.ndarray
    kind: str
    cut_rounds: int = 1

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "objective": self.objective,
            "train_loss": self.train_loss,
            "L": self.model.lipschitz,
            "learned_L": self.learned_lipschitz,
            "K": self.model.K,
            "dim": self.model.dim,
            "n_observed": int(self.observed.shape[0]),
            "cut_rounds": self.cut_rounds,
            "solver": self.report.to_dict(),
        }


def farthest_point_partition(X, K: int, seed: int = 0, first: Optional[int] = None) -> Partition:
    """Greedy K-center clustering in the infinity norm (2-approximation)"""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    n = X.shape[0]
    if not 1 <= K <= n:
        raise ConfigError(f"K must satisfy 1 <= K <= n = {n}, got {K}")
    if first is None:
        first = int(np.random.default_rng(seed).integers(n))
    elif not 0 <= first < n:
        raise ConfigError(f"first center {first} out of range")

    centers = [first]
    min_dist = cdist(X, X[[first]], metric="chebyshev")[:, 0]
    for _ in range(1, K):
        if min_dist.max() > 0:
            nxt = int(np.argmax(min_dist))
        else:
            # only duplicates left
            nxt = int(np.setdiff1d(np.arange(n), centers)[0])
        centers.append(nxt)
        min_dist = np.minimum(min_dist, cdist(X, X[[nxt]], metric="chebyshev")[:, 0])

    centers = np.asarray(centers, dtype=np.int64)
    dist = cdist(X, X[centers], metric="chebyshev")
    assignment = np.argmin(dist, axis=1)
    radius = float(dist[np.arange(n), assignment].max())
    logger.debug(f"Farthest-point partition with K={K}: radius {radius:.4g}")
    return Partition(assignment=assignment, centers=centers, radius=radius)


class _Layout:
    """Column layout of the generator variables plus optional norm budget"""

    n_cols: int
    slope_cols: np.ndarray

    def _add_norm_budget(self, lipschitz: bool) -> None:
        self.lipschitz = lipschitz
        if lipschitz:
            groups, d = self.slope_cols.shape
            self.s_cols = self.n_cols + np.arange(groups * d).reshape(groups, d)
            self.L_col = self.n_cols + groups * d
            self.n_cols = self.L_col + 1

    def norm_rows(self, builder: ConstraintBuilder) -> None:
        """|a_gk| <= s_gk and sum_k s_gk <= L"""
        if not self.lipschitz:
            return
        a = self.slope_cols.reshape(-1)
        s = self.s_cols.reshape(-1)
        ones = np.ones(a.shape[0])
        builder.add_rows(np.column_stack([a, s]), np.column_stack([ones, -ones]), np.zeros(a.shape[0]))
        builder.add_rows(np.column_stack([a, s]), np.column_stack([-ones, -ones]), np.zeros(a.shape[0]))
        groups, d = self.s_cols.shape
        cols = np.column_stack([self.s_cols, np.full(groups, self.L_col)])
        vals = np.column_stack([np.ones((groups, d)), -np.ones(groups)])
        builder.add_rows(cols, vals, np.zeros(groups))

    def learned_L(self, x: np.ndarray) -> Optional[float]:
        return float(x[self.L_col]) if self.lipschitz else None

    @staticmethod
    def _values(x: np.ndarray, cols: np.ndarray) -> np.ndarray:
        out = np.zeros(cols.shape)
        mask = cols >= 0
        out[mask] = x[cols[mask]]
        return out


class _InterpolantLayout(_Layout):
    def __init__(self, points: np.ndarray, lipschitz: bool):
        self.points = points
        n, d = points.shape
        self.z_cols = np.arange(n) - 1
        self.z_cols[0] = -1
        slope = np.arange(n * d).reshape(n, d) + (n - 1)
        if not lipschitz:
            # h - (tangent at x_0) gives the same divergences
            slope = slope - d
            slope[0] = -1
        self.slope_cols = slope
        self.n_cols = int(slope.max()) + 1 if slope.max() >= 0 else n - 1
        self._add_norm_budget(lipschitz)

    def divergence_terms(self, I: np.ndarray, J: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Coefficients of z_i - z_j - a_j^T (x_i - x_j)"""
        X = self.points
        r = I.shape[0]
        cols = np.column_stack([self.z_cols[I], self.z_cols[J], self.slope_cols[J]])
        vals = np.column_stack([np.ones(r), -np.ones(r), -(X[I] - X[J])])
        return cols, vals

    def candidate_rows(self) -> np.ndarray:
        """Mask of (i, j) rows: hyperplane j must stay below z_i at x_i"""
        return ~np.eye(self.points.shape[0], dtype=bool)

    def initial_rows(self, pairs: np.ndarray) -> np.ndarray:
        n = self.points.shape[0]
        mask = np.zeros((n, n), dtype=bool)
        k = min(INITIAL_NEIGHBORS, n - 1)
        if k > 0:
            nearest = np.argsort(cdist(self.points, self.points), axis=1, kind="stable")[:, 1 : k + 1]
            mask[np.repeat(np.arange(n), k), nearest.reshape(-1)] = True
        if pairs.size:
            mask[pairs[:, 0], pairs[:, 1]] = True
        mask |= mask.T
        return mask & self.candidate_rows()

    def convexity_rows(self, builder: ConstraintBuilder, mask: Optional[np.ndarray] = None) -> None:
        I, J = np.nonzero(self.candidate_rows() if mask is None else mask)
        cols, vals = self.divergence_terms(I, J)
        builder.add_rows(cols, -vals, np.zeros(cols.shape[0]))

    def convexity_gaps(self, x: np.ndarray) -> np.ndarray:
        z = self._values(x, self.z_cols)
        a = self._values(x, self.slope_cols)
        X = self.points
        tangent = X @ a.T + (z - np.sum(a * X, axis=1))[None, :]
        return tangent - z[:, None]

    def to_model(self, x: np.ndarray, feature_scale: Optional[FeatureScale]) -> MaxAffineModel:
        sol = InterpolantSolution(
            values=self._values(x, self.z_cols),
            subgradients=self._values(x, self.slope_cols),
            points=self.points,
        )
        return interpolant_to_model(sol, FEASIBILITY_TOL, feature_scale)


class _PartitionLayout(_Layout):
    def __init__(self, points: np.ndarray, cells: np.ndarray, K: int, lipschitz: bool):
        self.points = points
        self.cells = cells
        self.K = K
        d = points.shape[1]
        self.b_cols = np.arange(K) - 1
        self.b_cols[0] = -1
        slope = np.arange(K * d).reshape(K, d) + (K - 1)
        if not lipschitz:
            slope = slope - d
            slope[0] = -1
        self.slope_cols = slope
        self.n_cols = max(int(slope.max()) + 1, K - 1)
        self._add_norm_budget(lipschitz)

    def divergence_terms(self, I: np.ndarray, J: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Coefficients of b_{p_i} - b_{p_j} + (a_{p_i} - a_{p_j})^T x_i"""
        pi, pj = self.cells[I], self.cells[J]
        r = I.shape[0]
        xi = self.points[I]
        cols = np.column_stack([self.b_cols[pi], self.b_cols[pj], self.slope_cols[pi], self.slope_cols[pj]])
        vals = np.column_stack([np.ones(r), -np.ones(r), xi, -xi])
        return cols, vals

    def candidate_rows(self) -> np.ndarray:
        """Mask of (j, k) rows: hyperplane k must stay below cell p_j at x_j"""
        n = self.points.shape[0]
        mask = np.ones((n, self.K), dtype=bool)
        mask[np.arange(n), self.cells] = False
        return mask

    def initial_rows(self, pairs: np.ndarray) -> np.ndarray:
        n = self.points.shape[0]
        mask = np.zeros((n, self.K), dtype=bool)
        k = min(INITIAL_NEIGHBORS, self.K)
        centroids = np.vstack([self.points[self.cells == c].mean(axis=0) for c in range(self.K)])
        nearest = np.argsort(cdist(self.points, centroids), axis=1, kind="stable")[:, :k]
        mask[np.repeat(np.arange(n), k), nearest.reshape(-1)] = True
        if pairs.size:
            mask[pairs[:, 0], self.cells[pairs[:, 1]]] = True
            mask[pairs[:, 1], self.cells[pairs[:, 0]]] = True
        return mask & self.candidate_rows()

    def convexity_rows(self, builder: ConstraintBuilder, mask: Optional[np.ndarray] = None) -> None:
        J, Kk = np.nonzero(self.candidate_rows() if mask is None else mask)
        if J.size == 0:
            return
        pj = self.cells[J]
        xj = self.points[J]
        r = J.shape[0]
        cols = np.column_stack([self.b_cols[Kk], self.b_cols[pj], self.slope_cols[Kk], self.slope_cols[pj]])
        vals = np.column_stack([np.ones(r), -np.ones(r), xj, -xj])
        builder.add_rows(cols, vals, np.zeros(r))

    def convexity_gaps(self, x: np.ndarray) -> np.ndarray:
        slopes = self._values(x, self.slope_cols)
        offsets = self._values(x, self.b_cols)
        values = self.points @ slopes.T + offsets
        own = values[np.arange(self.points.shape[0]), self.cells]
        return values - own[:, None]

    def to_model(self, x: np.ndarray, feature_scale: Optional[FeatureScale]) -> MaxAffineModel:
        slopes = self._values(x, self.slope_cols)
        offsets = self._values(x, self.b_cols)
        gaps = self.convexity_gaps(x)
        j, k = np.unravel_index(int(np.argmax(gaps)), gaps.shape)
        if gaps[j, k] > FEASIBILITY_TOL:
            raise InfeasibleInterpolantError((int(j), int(k)), float(gaps[j, k]))
        lipschitz = float(np.abs(slopes).sum(axis=1).max())
        return MaxAffineModel(slopes, offsets, lipschitz, feature_scale)


def _anchor_points(X: np.ndarray, observed: np.ndarray, cfg: TrainConfig):
    anchors = X[observed]
    scale = FeatureScale.fit(anchors) if cfg.scale_features else None
    if scale is not None:
        anchors = scale.apply(anchors)
    return anchors, scale


def _observed(X: np.ndarray, S: Supervision) -> Tuple[np.ndarray, np.ndarray]:
    """Observed row indices and the global-to-local index map"""
    S.check_range(X.shape[0])
    observed = S.observed()
    if observed.size == 0:
        observed = np.arange(X.shape[0])
    local = np.full(X.shape[0], -1, dtype=np.int64)
    local[observed] = np.arange(observed.shape[0])
    return observed, local


def _as_data(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ConfigError(f"training data must be a non-empty n x d array, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ConfigError("training data contains non-finite values")
    return X


def _lipschitz_enabled(cfg: TrainConfig, default: bool) -> bool:
    return default if cfg.lipschitz is None else cfg.lipschitz


def _check_status(report: SolveReport, what: str) -> None:
    if report.status == SolveStatus.INFEASIBLE:
        raise SolverFailureError(f"{what}: solver reported an infeasible program", report)
    if report.status != SolveStatus.OPTIMAL:
        logger.warning(f"{what}: solver stopped with status {report.status.value}, using best iterate")


def _solve_with_cuts(
    layout: _Layout,
    pairs: np.ndarray,
    assemble: Callable[[np.ndarray], Any],
    solve: Callable[[Any], SolveReport],
    cfg: TrainConfig,
) -> Tuple[SolveReport, int]:
    """Solve with a working set of convexity rows, adding violated rows until none remain.

    Small programs get every row up front. Otherwise the working set starts
    from nearby points and the supervised pairs, and each round adds the most
    violated rows per point. The final solution satisfies every row, so it
    is optimal for the full program.
    """
    candidates = layout.candidate_rows()
    if int(candidates.sum()) <= FULL_ROW_LIMIT:
        active = candidates.copy()
    else:
        active = layout.initial_rows(pairs)
    tol = cfg.solver.feas_tol
    rounds = 0
    while True:
        rounds += 1
        program = assemble(active)
        if cfg.dump_program:
            dump_program(program, cfg.dump_program)
        report = solve(program)
        if report.status == SolveStatus.INFEASIBLE:
            return report, rounds
        gaps = layout.convexity_gaps(report.x)
        gaps[active | ~candidates] = -np.inf
        violated = gaps > tol
        n_violated = int(violated.sum())
        if n_violated == 0:
            logger.debug(f"Convexity rows settled after {rounds} rounds ({int(active.sum())} rows)")
            return report, rounds
        if rounds < UNCAPPED_AFTER and gaps.shape[1] > CUTS_PER_POINT:
            top = np.argpartition(-gaps, CUTS_PER_POINT - 1, axis=1)[:, :CUTS_PER_POINT]
            rows = np.repeat(np.arange(gaps.shape[0]), CUTS_PER_POINT)
            cols = top.reshape(-1)
            keep = violated[rows, cols]
            active[rows[keep], cols[keep]] = True
        else:
            active |= violated
        logger.debug(f"Round {rounds}: {n_violated} convexity rows violated, working set now {int(active.sum())}")


def _comparison_program(layout: _Layout, S_local: QuadrupletSet, cfg: TrainConfig, mask: np.ndarray) -> LinearProgram:
    m = S_local.m
    xi_cols = layout.n_cols + np.arange(m)
    n_vars = layout.n_cols + m
    builder = ConstraintBuilder(n_vars)
    if m:
        idx = S_local.indices
        cols_ij, vals_ij = layout.divergence_terms(idx[:, 0], idx[:, 1])
        cols_kl, vals_kl = layout.divergence_terms(idx[:, 2], idx[:, 3])
        cols = np.column_stack([cols_ij, cols_kl, xi_cols])
        vals = np.column_stack([vals_ij, -vals_kl, -np.ones(m)])
        builder.add_rows(cols, vals, np.full(m, -S_local.margin))
    layout.convexity_rows(builder, mask)
    layout.norm_rows(builder)
    A, u = builder.build()

    c = np.zeros(n_vars)
    c[xi_cols] = 1.0
    if layout.lipschitz:
        c[layout.L_col] = cfg.lam
    lower = np.full(n_vars, -np.inf)
    lower[xi_cols] = 0.0
    lp = LinearProgram(c=c, A=A, u=u, lower=lower)
    logger.debug(f"Comparison LP: {lp.p} variables, {lp.q} rows")
    return lp


def _solve_comparisons(layout: _Layout, S_local: QuadrupletSet, cfg: TrainConfig) -> Tuple[SolveReport, int]:
    idx = S_local.indices
    pairs = np.vstack([idx[:, :2], idx[:, 2:]]) if S_local.m else np.zeros((0, 2), dtype=np.int64)
    return _solve_with_cuts(
        layout,
        pairs,
        lambda mask: _comparison_program(layout, S_local, cfg, mask),
        lambda lp: solve_lp(lp, cfg.solver),
        cfg,
    )


def hinge_losses(model: MaxAffineModel, X, S: QuadrupletSet) -> np.ndarray:
    """Per-comparison max(0, margin + D(x_i, x_j) - D(x_k, x_l))"""
    X = np.asarray(X, dtype=float)
    if S.m == 0:
        return np.zeros(0)
    idx = S.indices
    near = paired_divergences(model, X[idx[:, 0]], X[idx[:, 1]])
    far = paired_divergences(model, X[idx[:, 2]], X[idx[:, 3]])
    return np.maximum(0.0, S.margin + near - far)


def ordering_accuracy(model: MaxAffineModel, X, S: QuadrupletSet) -> float:
    """Fraction of comparisons with D(x_i, x_j) < D(x_k, x_l)"""
    if S.m == 0:
        return float("nan")
    X = np.asarray(X, dtype=float)
    idx = S.indices
    near = paired_divergences(model, X[idx[:, 0]], X[idx[:, 1]])
    far = paired_divergences(model, X[idx[:, 2]], X[idx[:, 3]])
    return float(np.mean(near < far))


def regression_mse(model: MaxAffineModel, X, S: RegressionSet) -> float:
    X = np.asarray(X, dtype=float)
    pred = paired_divergences(model, X[S.pairs[:, 0]], X[S.pairs[:, 1]])
    return float(np.mean(np.square(pred - S.targets)))


def negative_mse(model: MaxAffineModel, X, S: RegressionSet) -> float:
    return -regression_mse(model, X, S)


def _fit_comparisons(X, S: QuadrupletSet, cfg: TrainConfig, partition: Optional[Partition]) -> TrainResult:
    X = _as_data(X)
    observed, local = _observed(X, S)
    anchors, scale = _anchor_points(X, observed, cfg)
    lipschitz = _lipschitz_enabled(cfg, True)
    if partition is None:
        layout: _Layout = _InterpolantLayout(anchors, lipschitz)
        kind = "pbdl"
    else:
        layout = _partition_layout(anchors, observed, partition, lipschitz)
        kind = "pbdl_partitioned"
    S_local = S.remap(local)
    logger.info(f"Training {kind} on {observed.shape[0]} points, {S.m} comparisons, lambda={cfg.lam:g}")

    report, rounds = _solve_comparisons(layout, S_local, cfg)
    _check_status(report, kind)
    model = layout.to_model(report.x, scale)
    losses = hinge_losses(model, X, S)
    logger.info(f"{kind}: objective {report.objective:.6g}, hinge {losses.sum():.6g}, K={model.K}")
    return TrainResult(
        model=model,
        objective=report.objective,
        train_loss=float(losses.sum()),
        learned_lipschitz=layout.learned_L(report.x),
        report=report,
        observed=observed,
        kind=kind,
        cut_rounds=rounds,
    )


def _partition_layout(anchors, observed, partition: Partition, lipschitz: bool) -> _PartitionLayout:
    if partition.assignment.shape[0] <= observed.max():
        raise DimensionMismatchError(int(observed.max()) + 1, partition.assignment.shape[0], "partition")
    cells = partition.assignment[observed]
    used, cells = np.unique(cells, return_inverse=True)
    if used.shape[0] < partition.K:
        logger.info(f"Dropping {partition.K - used.shape[0]} cells without observed points")
    return _PartitionLayout(anchors, cells.reshape(-1), used.shape[0], lipschitz)


def fit_pbdl(X, S: QuadrupletSet, cfg: Optional[TrainConfig] = None) -> TrainResult:
    """One hyperplane per observed point"""
    return _fit_comparisons(X, S, cfg or TrainConfig(), None)


def fit_pbdl_partitioned(X, S: QuadrupletSet, partition: Partition, cfg: Optional[TrainConfig] = None) -> TrainResult:
    """K hyperplanes shared by the cells of a fixed partition"""
    return _fit_comparisons(X, S, cfg or TrainConfig(), partition)


def fit_regression(
    X, S: RegressionSet, cfg: Optional[TrainConfig] = None, partition: Optional[Partition] = None
) -> TrainResult:
    """Least-squares fit of divergences to observed targets"""
    cfg = cfg or TrainConfig()
    X = _as_data(X)
    if S.m == 0:
        raise ConfigError("regression needs at least one target pair")
    observed, local = _observed(X, S)
    anchors, scale = _anchor_points(X, observed, cfg)
    lipschitz = _lipschitz_enabled(cfg, False)
    if partition is None:
        layout: _Layout = _InterpolantLayout(anchors, lipschitz)
        kind = "regression"
    else:
        layout = _partition_layout(anchors, observed, partition, lipschitz)
        kind = "regression_partitioned"
    pairs = local[S.pairs]
    logger.info(f"Training {kind} on {observed.shape[0]} points, {S.m} pairs")

    residuals = ConstraintBuilder(layout.n_cols)
    cols, vals = layout.divergence_terms(pairs[:, 0], pairs[:, 1])
    residuals.add_rows(cols, vals, S.targets)
    R, y = residuals.build()
    c = np.zeros(layout.n_cols)
    if layout.lipschitz:
        c[layout.L_col] = cfg.lam

    def assemble(mask: np.ndarray) -> QuadraticProgram:
        builder = ConstraintBuilder(layout.n_cols)
        layout.convexity_rows(builder, mask)
        layout.norm_rows(builder)
        A, u = builder.build()
        return QuadraticProgram(R=R, y=y, A=A, u=u, c=c, weight=1.0 / S.m)

    report, rounds = _solve_with_cuts(layout, pairs, assemble, lambda qp: solve_qp(qp, cfg.solver), cfg)
    _check_status(report, kind)
    model = layout.to_model(report.x, scale)
    mse = regression_mse(model, X, S)
    logger.info(f"{kind}: objective {report.objective:.6g}, train MSE {mse:.6g}, K={model.K}")
    return TrainResult(
        model=model,
        objective=report.objective,
        train_loss=mse,
        learned_lipschitz=layout.learned_L(report.x),
        report=report,
        observed=observed,
        kind=kind,
        cut_rounds=rounds,
    )


def train_pbdl(X, S: QuadrupletSet, cfg: Optional[TrainConfig] = None) -> MaxAffineModel:
    return fit_pbdl(X, S, cfg).model


def train_pbdl_partitioned(X, S: QuadrupletSet, partition: Partition, cfg: Optional[TrainConfig] = None) -> MaxAffineModel:
    return fit_pbdl_partitioned(X, S, partition, cfg).model


def train_regression(X, S: RegressionSet, cfg: Optional[TrainConfig] = None) -> MaxAffineModel:
    return fit_regression(X, S, cfg).model


def resolve_hyperplanes(cfg: TrainConfig, S: Supervision, n_points: int, d: int) -> Optional[int]:
    """None for one hyperplane per point, otherwise the K to use"""
    if cfg.hyperplanes == "n":
        return None
    if cfg.hyperplanes == "auto":
        K = int(math.ceil(max(S.m, 1) ** (d / (4.0 + 2.0 * d))))
    else:
        K = int(cfg.hyperplanes)
    return max(1, min(K, n_points))


def fit(X, S: Supervision, cfg: Optional[TrainConfig] = None, K: Optional[int] = None) -> TrainResult:
    """Train with the layout the config asks for.

    ``K`` overrides ``cfg.hyperplanes``; a partition is built with farthest
    point clustering of the observed points when K hyperplanes are requested.
    """
    cfg = cfg or TrainConfig()
    X = _as_data(X)
    if K is None:
        n_obs = S.observed().shape[0] or X.shape[0]
        K = resolve_hyperplanes(cfg, S, n_obs, X.shape[1])
    partition = None
    if K is not None:
        observed, _ = _observed(X, S)
        cells = farthest_point_partition(X[observed], min(K, observed.shape[0]), seed=cfg.seed)
        assignment = np.zeros(X.shape[0], dtype=np.int64)
        assignment[observed] = cells.assignment
        partition = Partition(assignment, observed[cells.centers], cells.radius)
    if isinstance(S, RegressionSet):
        return fit_regression(X, S, cfg, partition)
    if partition is None:
        return fit_pbdl(X, S, cfg)
    return fit_pbdl_partitioned(X, S, partition, cfg)


@dataclass
class CVResult:
    best_lambda: float
    best_K: Optional[int]
    scores: pd.DataFrame

    def summary(self) -> pd.DataFrame:
        return self.scores.groupby(["lam", "K"], dropna=False)["score"].mean().reset_index()


def cross_validate(
    X,
    S: Supervision,
    cfg: Optional[TrainConfig] = None,
    metric: Optional[Callable[[MaxAffineModel, np.ndarray, Supervision], float]] = None,
) -> CVResult:
    """Select lambda (and optionally K) by k-fold CV over the supervision rows.

    Scores are "higher is better"; ties in mean score go to the smaller lambda,
    then the smaller K.
    """
    cfg = cfg or TrainConfig()
    X = _as_data(X)
    if S.m < cfg.folds:
        raise ConfigError(f"{S.m} supervision rows cannot be split into {cfg.folds} folds")
    if metric is None:
        metric = negative_mse if isinstance(S, RegressionSet) else ordering_accuracy
    folds = split_folds(S.m, cfg.folds, cfg.seed)
    K_values: List[Optional[int]] = list(cfg.K_grid) if cfg.K_grid else [None]
    tasks = [(lam, K, f) for lam in sorted(cfg.lambda_grid) for K in K_values for f in range(cfg.folds)]

    def run(task):
        lam, K, f = task
        train_rows = np.concatenate([folds[g] for g in range(cfg.folds) if g != f])
        fold_cfg = cfg.model_copy(update={"lam": lam, "n_jobs": 1})
        result = fit(X, S.subset(train_rows), fold_cfg, K=K)
        return {"lam": lam, "K": K, "fold": f, "score": metric(result.model, X, S.subset(folds[f]))}

    logger.info(f"Cross-validating {len(tasks)} fits over {cfg.folds} folds")
    if cfg.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.n_jobs) as pool:
            rows = list(pool.map(run, tasks))
    else:
        rows = [run(t) for t in tasks]

    scores = pd.DataFrame(rows)
    best_lam, best_K, best_score = None, None, -np.inf
    for lam in sorted(cfg.lambda_grid):
        for K in K_values:
            mask = (scores["lam"] == lam) & (scores["K"].isna() if K is None else scores["K"] == K)
            score = float(scores.loc[mask, "score"].mean())
            if score > best_score:
                best_lam, best_K, best_score = lam, K, score
    if best_lam is None:
        best_lam, best_K = min(cfg.lambda_grid), K_values[0]
    logger.info(f"Best lambda {best_lam:g} (K={best_K}) with mean score {best_score:.4f}")
    return CVResult(best_lambda=best_lam, best_K=best_K, scores=scores)


@dataclass
class GeneralizationDiagnostic:
    test_error: float
    train_hinge: float
    complexity: float
    confidence: float

    @property
    def rhs(self) -> float:
        return self.train_hinge + self.complexity + self.confidence

    @property
    def within_bound(self) -> bool:
        return self.test_error <= self.rhs

    def to_dict(self) -> Dict[str, Any]:
        return {
            "test_error": self.test_error,
            "train_hinge": self.train_hinge,
            "complexity": self.complexity,
            "confidence": self.confidence,
            "rhs": self.rhs,
            "within_bound": self.within_bound,
        }


def generalization_diagnostic(
    model: MaxAffineModel,
    X,
    S_train: QuadrupletSet,
    S_test: QuadrupletSet,
    report: Optional[BoundReport] = None,
    delta: float = 0.05,
) -> GeneralizationDiagnostic:
    """Held-out misordering rate against train hinge risk plus the bound terms.

    The bound is informational; it is usually loose at small m.
    """
    X = np.asarray(X, dtype=float)
    if report is None:
        coords = model.feature_scale.apply(X) if model.feature_scale is not None else X
        R = max(float(np.max(np.abs(coords))), 1e-12)
        terms = generalization_terms(R, model.K, model.dim, model.lipschitz, max(S_train.m, 1), delta)
    else:
        terms = report.gen_bound_terms
    test_error = 1.0 - ordering_accuracy(model, X, S_test) if S_test.m else float("nan")
    train_hinge = float(hinge_losses(model, X, S_train).mean()) if S_train.m else 0.0
    diag = GeneralizationDiagnostic(
        test_error=test_error,
        train_hinge=train_hinge,
        complexity=terms.complexity,
        confidence=terms.confidence,
    )
    logger.info(f"Test misordering {test_error:.4f} vs bound {diag.rhs:.4f}")
    return diag
