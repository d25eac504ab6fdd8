"""Linear and least-squares quadratic programs used by the learners.

Both solvers work on the inequality form ``G x <= h`` (variable bounds are
folded into rows). The LP solver is a homogeneous self-dual interior point
method with Mehrotra predictor-corrector steps, which yields certificates for
infeasible and unbounded instances. The QP solver is a primal-dual path
following method for ``weight * ||R x - y||^2 + c^T x``.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from pydantic import BaseModel, ConfigDict, Field

from src.errors import ConfigError, DimensionMismatchError, SolverFailureError, UnboundedProgramError

logger = logging.getLogger(__name__)

STALL_LIMIT = 5
MIN_STEP = 1e-10
GAP_FACTOR = 1e-3
DENSE_FILL = 0.1
# bounds on the scaling z/s so degenerate rows keep the normal matrix finite
WEIGHT_RANGE = (1e-14, 1e14)
TINY = 1e-300
NUMERICAL_ERRORS = (np.linalg.LinAlgError, ValueError, FloatingPointError, ZeroDivisionError)


class SolveStatus(str, Enum):
    OPTIMAL = "optimal"
    MAX_ITER = "max_iter"
    INFEASIBLE = "infeasible"


class SolverSettings(BaseModel):
    """Tolerances and limits shared by both interior point solvers"""

    model_config = ConfigDict(frozen=True)

    max_iter: int = Field(default=50000, ge=1)
    feas_tol: float = Field(default=1e-7, gt=0)
    opt_tol: float = Field(default=1e-6, gt=0)
    step_fraction: float = Field(default=0.99, gt=0, lt=1)
    dense_threshold: int = Field(default=400, ge=0)


@dataclass
class SolveReport:
    x: np.ndarray
    objective: float
    max_violation: float
    iterations: int
    status: SolveStatus
    dual_residual: float = float("nan")
    gap: float = float("nan")
    duals: Optional[np.ndarray] = None
    certificate: Optional[np.ndarray] = None
    message: str = ""

    @property
    def optimal(self) -> bool:
        return self.status == SolveStatus.OPTIMAL

    def to_dict(self) -> Dict[str, Any]:
        return {
            "status": self.status.value,
            "objective": self.objective,
            "max_violation": self.max_violation,
            "iterations": self.iterations,
            "dual_residual": self.dual_residual,
            "gap": self.gap,
            "n_variables": int(self.x.shape[0]),
            "message": self.message,
        }


def _bounds_vector(values: Optional[Sequence[float]], p: int, fill: float, what: str):
    if values is None:
        return np.full(p, fill)
    vec = np.asarray(values, dtype=float).reshape(-1)
    if vec.shape[0] != p:
        raise DimensionMismatchError(p, vec.shape[0], what)
    if np.any(np.isnan(vec)):
        raise ConfigError(f"{what} contains NaN")
    return vec


def _fold_bounds(
    A: sp.csr_matrix, u: np.ndarray, lower: np.ndarray, upper: np.ndarray
) -> Tuple[sp.csr_matrix, np.ndarray]:
    p = A.shape[1]
    lo_idx = np.flatnonzero(np.isfinite(lower))
    hi_idx = np.flatnonzero(np.isfinite(upper))
    blocks = [A]
    rhs = [u]
    if lo_idx.size:
        blocks.append(sp.csr_matrix((-np.ones(lo_idx.size), (np.arange(lo_idx.size), lo_idx)), shape=(lo_idx.size, p)))
        rhs.append(-lower[lo_idx])
    if hi_idx.size:
        blocks.append(sp.csr_matrix((np.ones(hi_idx.size), (np.arange(hi_idx.size), hi_idx)), shape=(hi_idx.size, p)))
        rhs.append(upper[hi_idx])
    return sp.vstack(blocks, format="csr"), np.concatenate(rhs)


@dataclass(frozen=True, eq=False)
class LinearProgram:
    """min c^T x  s.t.  A x <= u,  lower <= x <= upper"""

    c: np.ndarray
    A: sp.csr_matrix
    u: np.ndarray
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).reshape(-1)
        A = sp.csr_matrix(self.A, dtype=float)
        u = np.asarray(self.u, dtype=float).reshape(-1)
        p = c.shape[0]
        if A.shape[1] != p:
            raise DimensionMismatchError(p, A.shape[1], "constraint columns")
        if A.shape[0] != u.shape[0]:
            raise DimensionMismatchError(A.shape[0], u.shape[0], "constraint bounds")
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(A.data)) and np.all(np.isfinite(u))):
            raise ConfigError("program coefficients must be finite")
        lower = _bounds_vector(self.lower, p, -np.inf, "lower bounds")
        upper = _bounds_vector(self.upper, p, np.inf, "upper bounds")
        if np.any(lower > upper):
            raise ConfigError("lower bound exceeds upper bound")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def from_triplets(
        cls,
        c: Sequence[float],
        rows: Sequence[int],
        cols: Sequence[int],
        vals: Sequence[float],
        u: Sequence[float],
        lower: Optional[Sequence[float]] = None,
        upper: Optional[Sequence[float]] = None,
    ) -> "LinearProgram":
        c = np.asarray(c, dtype=float)
        u = np.asarray(u, dtype=float)
        rows = np.asarray(rows, dtype=int)
        cols = np.asarray(cols, dtype=int)
        if rows.size and (rows.min() < 0 or rows.max() >= u.shape[0]):
            raise ConfigError("constraint row index out of range")
        if cols.size and (cols.min() < 0 or cols.max() >= c.shape[0]):
            raise ConfigError("constraint column index out of range")
        A = sp.coo_matrix((vals, (rows, cols)), shape=(u.shape[0], c.shape[0])).tocsr()
        return cls(c=c, A=A, u=u, lower=lower, upper=upper)

    @property
    def p(self) -> int:
        return self.c.shape[0]

    @property
    def q(self) -> int:
        return self.A.shape[0]

    def inequality_form(self) -> Tuple[sp.csr_matrix, np.ndarray]:
        return _fold_bounds(self.A, self.u, self.lower, self.upper)

    def objective(self, x: np.ndarray) -> float:
        return float(self.c @ x)


@dataclass(frozen=True, eq=False)
class QuadraticProgram:
    """min weight * ||R x - y||^2 + c^T x  s.t.  A x <= u,  lower <= x <= upper"""

    R: sp.csr_matrix
    y: np.ndarray
    A: sp.csr_matrix
    u: np.ndarray
    c: Optional[np.ndarray] = None
    weight: float = 1.0
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        R = sp.csr_matrix(self.R, dtype=float)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        p = R.shape[1]
        if R.shape[0] == 0:
            raise ConfigError("a quadratic program needs at least one residual")
        if R.shape[0] != y.shape[0]:
            raise DimensionMismatchError(R.shape[0], y.shape[0], "residual targets")
        A = sp.csr_matrix(self.A, dtype=float)
        u = np.asarray(self.u, dtype=float).reshape(-1)
        if A.shape[1] != p:
            raise DimensionMismatchError(p, A.shape[1], "constraint columns")
        if A.shape[0] != u.shape[0]:
            raise DimensionMismatchError(A.shape[0], u.shape[0], "constraint bounds")
        c = np.zeros(p) if self.c is None else np.asarray(self.c, dtype=float).reshape(-1)
        if c.shape[0] != p:
            raise DimensionMismatchError(p, c.shape[0], "linear term")
        finite = [R.data, y, A.data, u, c]
        if not all(np.all(np.isfinite(v)) for v in finite):
            raise ConfigError("program coefficients must be finite")
        if not self.weight > 0:
            raise ConfigError("weight must be positive")
        lower = _bounds_vector(self.lower, p, -np.inf, "lower bounds")
        upper = _bounds_vector(self.upper, p, np.inf, "upper bounds")
        if np.any(lower > upper):
            raise ConfigError("lower bound exceeds upper bound")
        for name, value in (("R", R), ("y", y), ("A", A), ("u", u), ("c", c)):
            object.__setattr__(self, name, value)
        object.__setattr__(self, "weight", float(self.weight))
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def p(self) -> int:
        return self.R.shape[1]

    @property
    def q(self) -> int:
        return self.A.shape[0]

    def inequality_form(self) -> Tuple[sp.csr_matrix, np.ndarray]:
        return _fold_bounds(self.A, self.u, self.lower, self.upper)

    def residuals(self, x: np.ndarray) -> np.ndarray:
        return self.R @ x - self.y

    def objective(self, x: np.ndarray) -> float:
        r = self.residuals(x)
        return float(self.weight * (r @ r) + self.c @ x)


class ConstraintBuilder:
    """Accumulates sparse ``row <= bound`` constraints as COO triplets.

    Negative column indices mark variables that were eliminated (fixed at
    zero) and are dropped. Duplicate (row, col) entries are summed.
    """

    def __init__(self, n_vars: int):
        self.n_vars = n_vars
        self.n_rows = 0
        self._rows: List[np.ndarray] = []
        self._cols: List[np.ndarray] = []
        self._vals: List[np.ndarray] = []
        self._bounds: List[np.ndarray] = []

    def add_rows(self, cols: np.ndarray, vals: np.ndarray, bounds: np.ndarray) -> np.ndarray:
        """Add r rows given (r, k) column and value arrays; returns their row ids"""
        cols = np.atleast_2d(np.asarray(cols, dtype=np.int64))
        vals = np.atleast_2d(np.asarray(vals, dtype=float))
        bounds = np.asarray(bounds, dtype=float).reshape(-1)
        r = bounds.shape[0]
        if cols.shape != vals.shape or cols.shape[0] != r:
            raise ConfigError(f"row block shapes disagree: {cols.shape}, {vals.shape}, {r}")
        if cols.size and cols.max() >= self.n_vars:
            raise ConfigError("constraint column index out of range")
        ids = np.arange(self.n_rows, self.n_rows + r)
        row_ids = np.repeat(ids, cols.shape[1])
        flat_cols = cols.reshape(-1)
        keep = flat_cols >= 0
        self._rows.append(row_ids[keep])
        self._cols.append(flat_cols[keep])
        self._vals.append(vals.reshape(-1)[keep])
        self._bounds.append(bounds)
        self.n_rows += r
        return ids

    def add_row(self, entries: Sequence[Tuple[int, float]], bound: float) -> int:
        cols = [c for c, _ in entries] or [-1]
        vals = [v for _, v in entries] or [0.0]
        return int(self.add_rows(np.array([cols]), np.array([vals]), np.array([bound]))[0])

    def build(self) -> Tuple[sp.csr_matrix, np.ndarray]:
        if not self._bounds:
            return sp.csr_matrix((0, self.n_vars)), np.zeros(0)
        rows = np.concatenate(self._rows)
        cols = np.concatenate(self._cols)
        vals = np.concatenate(self._vals)
        A = sp.coo_matrix((vals, (rows, cols)), shape=(self.n_rows, self.n_vars)).tocsr()
        A.sum_duplicates()
        A.eliminate_zeros()
        return A, np.concatenate(self._bounds)


class _ReducedSystem:
    """Factorization of the normal matrix of one interior point iteration.

    Small systems use a dense Cholesky factor, larger ones a sparse LU. A
    tiny diagonal shift handles directions the constraints leave free, and
    one refinement step against the unshifted matrix recovers accuracy.
    """

    def __init__(self, M: sp.spmatrix, dense_threshold: int):
        self.M = sp.csc_matrix(M)
        p = self.M.shape[0]
        if not np.all(np.isfinite(self.M.data)):
            raise np.linalg.LinAlgError("normal matrix has non-finite entries")
        diag = self.M.diagonal()
        shift = 1e-12 * max(1.0, float(np.max(np.abs(diag))) if p else 1.0)
        shifted = self.M + shift * sp.identity(p, format="csc")
        self._solve = None
        # a normal matrix with many filled entries factors faster densely
        if p < dense_threshold or self.M.nnz > DENSE_FILL * p * p:
            dense = shifted.toarray()
            try:
                factor = sla.cho_factor(dense, check_finite=False)
                self._solve = lambda b: sla.cho_solve(factor, b, check_finite=False)
            except (np.linalg.LinAlgError, ValueError):
                logger.warning("Cholesky factorization failed, falling back to least squares")
                self._solve = lambda b: sla.lstsq(dense, b)[0]
        else:
            try:
                lu = spla.splu(shifted, permc_spec="MMD_AT_PLUS_A")
                self._solve = lu.solve
            except RuntimeError:
                logger.warning("Sparse LU factorization failed, falling back to least squares")
                dense = shifted.toarray()
                self._solve = lambda b: sla.lstsq(dense, b)[0]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        x = self._solve(rhs)
        x = x + self._solve(rhs - self.M @ x)
        if not np.all(np.isfinite(x)):
            raise np.linalg.LinAlgError("Newton direction is not finite")
        return x


def _scaling_weights(z: np.ndarray, s: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        W = z / s
    W[~np.isfinite(W)] = WEIGHT_RANGE[1]
    return np.clip(W, *WEIGHT_RANGE)


def _finite(*arrays: Any) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)


def _finish(best: Optional[SolveReport], best_score: float, kind: str, reason: str) -> SolveReport:
    if best is None:
        raise SolverFailureError(f"{kind} produced no finite iterate ({reason})")
    logger.warning(f"{kind} stopped without meeting tolerances: {reason} (best score {best_score:.3g})")
    best.message = f"{reason}; best iterate returned"
    return best


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    neg = dv < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-v[neg] / dv[neg]))


def _row_scaling(G: sp.csr_matrix) -> np.ndarray:
    norms = np.asarray(abs(G).max(axis=1).todense()).reshape(-1)
    norms[norms == 0] = 1.0
    return 1.0 / norms


def _violation(G: sp.csr_matrix, h: np.ndarray, x: np.ndarray) -> float:
    if G.shape[0] == 0:
        return 0.0
    return float(max(np.max(G @ x - h), 0.0))


def solve_lp(lp: LinearProgram, settings: Optional[SolverSettings] = None) -> SolveReport:
    """Solve an LP with the homogeneous self-dual interior point method.

    Returns ``optimal`` when the iterate is feasible within ``feas_tol`` with
    a relative duality gap below ``opt_tol``, ``infeasible`` with a Farkas
    certificate, or ``max_iter`` with the best iterate seen. Raises
    UnboundedProgramError when a direction of unbounded descent is found.
    """
    settings = settings or SolverSettings()
    G, h = lp.inequality_form()
    c = lp.c
    q, p = G.shape
    logger.debug(f"LP with {p} variables and {q} rows ({G.nnz} nonzeros)")

    if q == 0:
        if np.any(c != 0):
            raise UnboundedProgramError("LP without constraints has a nonzero objective")
        return SolveReport(np.zeros(p), 0.0, 0.0, 0, SolveStatus.OPTIMAL, 0.0, 0.0)

    scale = _row_scaling(G)
    Gs = sp.diags(scale) @ G
    hs = h * scale
    c_norm = max(1.0, float(np.max(np.abs(c))))
    cs = c / c_norm
    GT = Gs.T.tocsr()

    x = np.zeros(p)
    s = np.ones(q)
    z = np.ones(q)
    tau = 1.0
    kappa = 1.0
    frac = settings.step_fraction

    best: Optional[SolveReport] = None
    best_score = np.inf
    stalls = 0

    for it in range(1, settings.max_iter + 1):
        rx = GT @ z + cs * tau
        rz = Gs @ x + s - hs * tau
        rt = kappa + cs @ x + hs @ z
        mu = (s @ z + tau * kappa) / (q + 1)

        xh = x / tau
        zh = z / tau
        obj = float(c @ xh)
        viol = _violation(G, h, xh)
        dres = float(np.max(np.abs(GT @ zh + cs))) / (1.0 + float(np.max(np.abs(cs))))
        gap = abs(float(cs @ xh + hs @ zh)) * c_norm
        gap_tol = settings.opt_tol * max(1.0, abs(obj))
        score = max(viol / settings.feas_tol, dres / settings.opt_tol, gap / gap_tol)
        if np.isfinite(score) and score < best_score:
            best_score = score
            best = SolveReport(
                x=xh,
                objective=obj,
                max_violation=viol,
                iterations=it,
                status=SolveStatus.MAX_ITER,
                dual_residual=dres,
                gap=gap,
                duals=zh * scale * c_norm,
            )
        if best is not None and score <= 1.0:
            best.status = SolveStatus.OPTIMAL
            logger.debug(f"LP optimal after {it} iterations, objective {obj:.10g}")
            return best

        if tau < 1e-3 * kappa:
            hz = float(hs @ z)
            if hz < 0 and np.max(np.abs(GT @ z)) <= settings.feas_tol * -hz:
                cert = z * scale / -hz
                logger.info(f"LP infeasible, certificate found after {it} iterations")
                return SolveReport(
                    x=xh,
                    objective=obj,
                    max_violation=viol,
                    iterations=it,
                    status=SolveStatus.INFEASIBLE,
                    certificate=cert,
                    message="Farkas certificate: G^T z = 0, h^T z < 0, z >= 0",
                )
            cx = float(cs @ x)
            if cx < 0 and np.max(np.abs(Gs @ x + s)) <= settings.feas_tol * -cx:
                raise UnboundedProgramError(
                    f"LP is unbounded below (direction found after {it} iterations)", best
                )

        W = _scaling_weights(z, s)

        def direction(eta, rhs_sz, rhs_tk):
            r1 = eta * rz + rhs_sz / z
            dx1 = system.solve(-eta * rx - GT @ (W * r1))
            dz1 = W * (Gs @ dx1 + r1)
            dtau = (-eta * rt - rhs_tk / tau - cs @ dx1 - hs @ dz1) / denom
            dx = dx1 + dx2 * dtau
            dz = dz1 + dz2 * dtau
            ds = (rhs_sz - s * dz) / z
            dkappa = (rhs_tk - kappa * dtau) / tau
            return dx, ds, dz, dtau, dkappa

        def step_length(ds, dz, dtau, dkappa):
            return min(
                _max_step(s, ds),
                _max_step(z, dz),
                _max_step(np.array([tau]), np.array([dtau])),
                _max_step(np.array([kappa]), np.array([dkappa])),
            )

        try:
            with np.errstate(over="raise", divide="raise", invalid="raise"):
                system = _ReducedSystem(GT @ sp.diags(W) @ Gs, settings.dense_threshold)
                dx2 = system.solve(GT @ (W * hs) - cs)
                dz2 = W * (Gs @ dx2 - hs)
                denom = cs @ dx2 + hs @ dz2 - kappa / tau

                # predictor
                dx, ds, dz, dtau, dkappa = direction(1.0, -s * z, -tau * kappa)
                alpha = min(1.0, step_length(ds, dz, dtau, dkappa))
                mu_aff = (
                    (s + alpha * ds) @ (z + alpha * dz) + (tau + alpha * dtau) * (kappa + alpha * dkappa)
                ) / (q + 1)
                sigma = min(1.0, max(0.0, mu_aff / mu)) ** 3

                # corrector
                dx, ds, dz, dtau, dkappa = direction(
                    1.0 - sigma,
                    -s * z + sigma * mu - ds * dz,
                    -tau * kappa + sigma * mu - dtau * dkappa,
                )
                alpha = min(1.0, frac * step_length(ds, dz, dtau, dkappa))
        except NUMERICAL_ERRORS as e:
            return _finish(best, best_score, "LP", f"numerical breakdown at iteration {it}: {e}")

        x_new = x + alpha * dx
        s_new = s + alpha * ds
        z_new = z + alpha * dz
        tau_new = tau + alpha * dtau
        kappa_new = kappa + alpha * dkappa
        if not _finite(x_new, s_new, z_new, tau_new, kappa_new) or tau_new <= 0:
            return _finish(best, best_score, "LP", f"non-finite iterate at iteration {it}")
        x, tau, kappa = x_new, tau_new, max(kappa_new, TINY)
        s = np.maximum(s_new, TINY)
        z = np.maximum(z_new, TINY)
        logger.debug(f"iter {it}: mu={mu:.3e} tau={tau:.3e} kappa={kappa:.3e} step={alpha:.3f}")

        if alpha < MIN_STEP:
            stalls += 1
            if stalls >= STALL_LIMIT:
                return _finish(best, best_score, "LP", f"stalled after {it} iterations")
        else:
            stalls = 0

    return _finish(best, best_score, "LP", "iteration limit")


def solve_qp(qp: QuadraticProgram, settings: Optional[SolverSettings] = None) -> SolveReport:
    """Solve a least-squares QP with a primal-dual path following method.

    Optimal means the KKT residual (scaled stationarity, primal violation and
    complementarity) is below ``opt_tol`` and the violation below ``feas_tol``.
    """
    settings = settings or SolverSettings()
    G, h = qp.inequality_form()
    q, p = G.shape
    RT = qp.R.T.tocsr()
    P = (2.0 * qp.weight) * (RT @ qp.R)
    lin = qp.c - 2.0 * qp.weight * (RT @ qp.y)
    lin_norm = 1.0 + float(np.max(np.abs(lin))) if p else 1.0
    logger.debug(f"QP with {p} variables, {qp.R.shape[0]} residuals and {q} rows")

    if q == 0:
        system = _ReducedSystem(P, settings.dense_threshold)
        x = system.solve(-lin)
        stat = float(np.max(np.abs(P @ x + lin))) / lin_norm
        if stat > settings.opt_tol:
            raise UnboundedProgramError("QP linear term has a component in the null space of its quadratic term")
        return SolveReport(x, qp.objective(x), 0.0, 1, SolveStatus.OPTIMAL, stat, 0.0)

    scale = _row_scaling(G)
    Gs = sp.diags(scale) @ G
    hs = h * scale
    GT = Gs.T.tocsr()

    x = np.zeros(p)
    s = np.ones(q)
    z = np.ones(q)
    frac = settings.step_fraction

    best: Optional[SolveReport] = None
    best_score = np.inf
    stalls = 0

    for it in range(1, settings.max_iter + 1):
        rd = P @ x + lin + GT @ z
        rp = Gs @ x + s - hs
        mu = (s @ z) / q

        obj = qp.objective(x)
        viol = _violation(G, h, x)
        stat = float(np.max(np.abs(rd))) / lin_norm
        comp = abs(float(z @ (hs - Gs @ x)))
        kkt = max(stat, viol, comp / max(1.0, abs(obj)))
        gap_tol = GAP_FACTOR * settings.opt_tol * max(1.0, abs(obj))
        score = max(stat / settings.opt_tol, viol / settings.feas_tol, comp / gap_tol)
        if np.isfinite(score) and score < best_score:
            best_score = score
            best = SolveReport(
                x=x.copy(),
                objective=obj,
                max_violation=viol,
                iterations=it,
                status=SolveStatus.MAX_ITER,
                dual_residual=kkt,
                gap=comp,
                duals=z * scale,
            )
        if best is not None and score <= 1.0:
            best.status = SolveStatus.OPTIMAL
            logger.debug(f"QP optimal after {it} iterations, objective {obj:.10g}")
            return best

        hz = float(hs @ z)
        if hz < 0 and np.max(z) > 1e6 and np.max(np.abs(GT @ z)) <= settings.feas_tol * -hz:
            logger.info(f"QP infeasible, certificate found after {it} iterations")
            return SolveReport(
                x=x,
                objective=obj,
                max_violation=viol,
                iterations=it,
                status=SolveStatus.INFEASIBLE,
                certificate=z * scale / -hz,
                message="Farkas certificate: G^T z = 0, h^T z < 0, z >= 0",
            )

        W = _scaling_weights(z, s)

        def direction(rhs_sz):
            r1 = rp + rhs_sz / z
            dx = system.solve(-rd - GT @ (W * r1))
            dz = W * (Gs @ dx + r1)
            ds = (rhs_sz - s * dz) / z
            return dx, ds, dz

        try:
            with np.errstate(over="raise", divide="raise", invalid="raise"):
                system = _ReducedSystem(P + GT @ sp.diags(W) @ Gs, settings.dense_threshold)
                dx, ds, dz = direction(-s * z)
                alpha = min(1.0, _max_step(s, ds), _max_step(z, dz))
                mu_aff = ((s + alpha * ds) @ (z + alpha * dz)) / q
                sigma = min(1.0, max(0.0, mu_aff / mu)) ** 3

                dx, ds, dz = direction(-s * z - ds * dz + sigma * mu)
                alpha = min(1.0, frac * min(_max_step(s, ds), _max_step(z, dz)))
        except NUMERICAL_ERRORS as e:
            return _finish(best, best_score, "QP", f"numerical breakdown at iteration {it}: {e}")

        x_new = x + alpha * dx
        s_new = s + alpha * ds
        z_new = z + alpha * dz
        if not _finite(x_new, s_new, z_new):
            return _finish(best, best_score, "QP", f"non-finite iterate at iteration {it}")
        x = x_new
        s = np.maximum(s_new, TINY)
        z = np.maximum(z_new, TINY)
        logger.debug(f"iter {it}: mu={mu:.3e} kkt={kkt:.3e} step={alpha:.3f}")

        if alpha < MIN_STEP:
            stalls += 1
            if stalls >= STALL_LIMIT:
                return _finish(best, best_score, "QP", f"stalled after {it} iterations")
        else:
            stalls = 0

    return _finish(best, best_score, "QP", "iteration limit")


def _format_row(matrix: sp.csr_matrix, r: int) -> str:
    start, end = matrix.indptr[r], matrix.indptr[r + 1]
    return " ".join(
        f"{j}:{v:.17g}" for j, v in zip(matrix.indices[start:end], matrix.data[start:end])
    )


def dump_program(program: Any, filepath: str) -> None:
    """Write a program as plain text, one line per constraint.

    Format::

        # LP p=<vars> q=<rows>        (or QP ... m=<residuals> weight=<w>)
        c <j>:<coef> ...
        res <t> <j>:<coef> ... = <target>     (QP only)
        row <r> <j>:<coef> ... <= <bound>
        bound <j> <lower> <upper>             (only finite bounds)
    """
    is_qp = isinstance(program, QuadraticProgram)
    if not is_qp and not isinstance(program, LinearProgram):
        raise ConfigError(f"cannot dump object of type {type(program).__name__}")
    A = program.A
    with open(filepath, "w") as f:
        if is_qp:
            f.write(f"# QP p={program.p} q={program.q} m={program.R.shape[0]} weight={program.weight:.17g}\n")
        else:
            f.write(f"# LP p={program.p} q={program.q}\n")
        c = program.c
        f.write("c " + " ".join(f"{j}:{c[j]:.17g}" for j in np.flatnonzero(c)) + "\n")
        if is_qp:
            for t in range(program.R.shape[0]):
                f.write(f"res {t} {_format_row(program.R, t)} = {program.y[t]:.17g}\n")
        for r in range(A.shape[0]):
            f.write(f"row {r} {_format_row(A, r)} <= {program.u[r]:.17g}\n")
        for j in np.flatnonzero(np.isfinite(program.lower) | np.isfinite(program.upper)):
            f.write(f"bound {j} {program.lower[j]:.17g} {program.upper[j]:.17g}\n")
    logger.info(f"Program written to {filepath}")
