"""Max-affine generators and the Bregman divergences they induce.

A generator is h(x) = max_k a_k^T x + b_k. Its divergence is
D(x, x') = h(x) - h(x') - g^T (x - x') where g is a subgradient of h at x'.
Everything in this module is pure; model objects are read-only after
construction.
"""

import logging
import math
from dataclasses import dataclass
from itertools import product
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from src.errors import ConfigError, DimensionMismatchError, InfeasibleInterpolantError
from src.utils import load_json, save_json

logger = logging.getLogger(__name__)

LIPSCHITZ_TOL = 1e-7
FEASIBILITY_TOL = 1e-6
TIE_TOL = 1e-9

TIE_BREAKS = ("lowest", "max_divergence")


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def _as_vector(x: Any, dim: int, what: str = "x") -> np.ndarray:
    vec = np.asarray(x, dtype=float).reshape(-1)
    if vec.shape[0] != dim:
        raise DimensionMismatchError(dim, vec.shape[0], what)
    if not np.all(np.isfinite(vec)):
        raise ConfigError(f"{what} contains non-finite entries")
    return vec


def _as_rows(X: Any, dim: int, what: str = "X") -> np.ndarray:
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1) if dim != 1 or arr.size == 1 else arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ConfigError(f"{what} must be a 2-D array, got shape {arr.shape}")
    if arr.shape[1] != dim:
        raise DimensionMismatchError(dim, arr.shape[1], what)
    return arr


@dataclass(frozen=True, eq=False)
class FeatureScale:
    """Per-feature affine map x -> (x - shift) / scale onto [-1, 1]"""

    shift: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        shift = np.array(self.shift, dtype=float).reshape(-1)
        scale = np.array(self.scale, dtype=float).reshape(-1)
        if shift.shape != scale.shape:
            raise ConfigError("feature_scale shift and scale must have equal length")
        if np.any(scale <= 0) or not np.all(np.isfinite(scale)):
            raise ConfigError("feature_scale entries must be positive and finite")
        object.__setattr__(self, "shift", _readonly(shift))
        object.__setattr__(self, "scale", _readonly(scale))

    @classmethod
    def fit(cls, X: np.ndarray) -> "FeatureScale":
        X = np.asarray(X, dtype=float)
        lo, hi = X.min(axis=0), X.max(axis=0)
        scale = (hi - lo) / 2.0
        scale[scale == 0] = 1.0
        return cls(shift=(hi + lo) / 2.0, scale=scale)

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.shift) / self.scale

    def to_dict(self) -> Dict[str, List[float]]:
        return {"shift": self.shift.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> Optional["FeatureScale"]:
        if not data:
            return None
        return cls(shift=np.asarray(data["shift"]), scale=np.asarray(data["scale"]))


@dataclass(frozen=True, eq=False)
class MaxAffineModel:
    """Convex generator h(x) = max_k slopes[k]^T x + offsets[k]

    ``lipschitz`` bounds every ||slopes[k]||_1. When ``feature_scale`` is set
    the model lives in scaled coordinates and inputs are mapped before
    evaluation, so callers always pass original coordinates.
    """

    slopes: np.ndarray
    offsets: np.ndarray
    lipschitz: float
    feature_scale: Optional[FeatureScale] = None

    def __post_init__(self):
        slopes = np.array(self.slopes, dtype=float)
        offsets = np.array(self.offsets, dtype=float).reshape(-1)
        if slopes.ndim != 2:
            raise ConfigError(f"slopes must be K x d, got shape {slopes.shape}")
        K, d = slopes.shape
        if K < 1 or d < 1:
            raise ConfigError("a max-affine model needs K >= 1 and d >= 1")
        if offsets.shape[0] != K:
            raise DimensionMismatchError(K, offsets.shape[0], "offsets")
        lipschitz = float(self.lipschitz)
        if not (np.all(np.isfinite(slopes)) and np.all(np.isfinite(offsets))):
            raise ConfigError("model parameters must be finite")
        if not math.isfinite(lipschitz) or lipschitz < 0:
            raise ConfigError(f"lipschitz must be finite and >= 0, got {lipschitz}")
        norms = np.abs(slopes).sum(axis=1)
        worst = int(np.argmax(norms))
        if norms[worst] > lipschitz + LIPSCHITZ_TOL:
            raise ConfigError(
                f"slope {worst} has l1 norm {norms[worst]:.6g} > L = {lipschitz:.6g}"
            )
        if self.feature_scale is not None and self.feature_scale.shift.shape[0] != d:
            raise DimensionMismatchError(d, self.feature_scale.shift.shape[0], "feature_scale")
        object.__setattr__(self, "slopes", _readonly(slopes))
        object.__setattr__(self, "offsets", _readonly(offsets))
        object.__setattr__(self, "lipschitz", lipschitz)

    @property
    def K(self) -> int:
        return self.slopes.shape[0]

    @property
    def dim(self) -> int:
        return self.slopes.shape[1]

    def affine_values(self, X: Any) -> np.ndarray:
        """Values of every hyperplane at every row of X, shape (n, K)"""
        rows = _as_rows(X, self.dim)
        if self.feature_scale is not None:
            rows = self.feature_scale.apply(rows)
        return rows @ self.slopes.T + self.offsets

    def __call__(self, X: Any) -> np.ndarray:
        return self.affine_values(X).max(axis=1)


@dataclass(frozen=True)
class BregmanEvaluation:
    value: float
    active_first: int
    active_second: int


def evaluate(model: MaxAffineModel, x: Any) -> Tuple[float, int]:
    """Evaluate h at x; ties go to the lowest hyperplane index"""
    vec = _as_vector(x, model.dim)
    values = model.affine_values(vec.reshape(1, -1))[0]
    active = int(np.argmax(values))
    return float(values[active]), active


def _check_tie_break(tie_break: str) -> None:
    if tie_break not in TIE_BREAKS:
        raise ConfigError(f"tie_break must be one of {TIE_BREAKS}, got '{tie_break}'")


def _resolve_ties(VX: np.ndarray, hX: np.ndarray, VY_row: np.ndarray, hY: float):
    """Divergences from every row of X to one point y with a tied active set.

    Among the hyperplanes attaining h(y) (within TIE_TOL) the subgradient
    giving the largest divergence is used; remaining ties go to the lowest
    index.
    """
    tol = TIE_TOL * max(1.0, abs(hY))
    ks = np.flatnonzero(VY_row >= hY - tol)
    candidates = hX[:, None] - hY - (VX[:, ks] - VY_row[ks])
    pick = np.argmax(candidates, axis=1)
    values = candidates[np.arange(candidates.shape[0]), pick]
    return np.maximum(values, 0.0), ks[pick]


def _tied_mask(VY: np.ndarray, hY: np.ndarray) -> np.ndarray:
    tol = TIE_TOL * np.maximum(1.0, np.abs(hY))
    return (VY >= (hY - tol)[:, None]).sum(axis=1) > 1


def divergence_matrix(
    model: MaxAffineModel, X: Any, Y: Any, tie_break: str = "lowest"
) -> np.ndarray:
    """Matrix of D(X_i, Y_j) for all rows of X and Y"""
    _check_tie_break(tie_break)
    VX = model.affine_values(X)
    VY = model.affine_values(Y)
    hX = VX.max(axis=1)
    active = np.argmax(VY, axis=1)
    D = hX[:, None] - VX[:, active]
    if tie_break == "max_divergence" and model.K > 1:
        hY = VY[np.arange(VY.shape[0]), active]
        for j in np.flatnonzero(_tied_mask(VY, hY)):
            D[:, j], _ = _resolve_ties(VX, hX, VY[j], hY[j])
    return D


def paired_divergences(
    model: MaxAffineModel, X: Any, Y: Any, tie_break: str = "lowest"
) -> np.ndarray:
    """Vector of D(X_t, Y_t) for matching rows of X and Y"""
    _check_tie_break(tie_break)
    VX = model.affine_values(X)
    VY = model.affine_values(Y)
    if VX.shape[0] != VY.shape[0]:
        raise DimensionMismatchError(VX.shape[0], VY.shape[0], "paired rows")
    rows = np.arange(VX.shape[0])
    hX = VX.max(axis=1)
    active = np.argmax(VY, axis=1)
    D = hX - VX[rows, active]
    if tie_break == "max_divergence" and model.K > 1:
        hY = VY[rows, active]
        for t in np.flatnonzero(_tied_mask(VY, hY)):
            value, _ = _resolve_ties(VX[t : t + 1], hX[t : t + 1], VY[t], hY[t])
            D[t] = value[0]
    return D


def bregman(
    model: MaxAffineModel, x: Any, x2: Any, tie_break: str = "lowest"
) -> BregmanEvaluation:
    """D(x, x2) = h(x) - h(x2) - g^T (x - x2) with g a subgradient at x2"""
    _check_tie_break(tie_break)
    u = _as_vector(x, model.dim, "x")
    v = _as_vector(x2, model.dim, "x2")
    values = model.affine_values(np.vstack([u, v]))
    first = int(np.argmax(values[0]))
    second = int(np.argmax(values[1]))
    if np.array_equal(u, v):
        return BregmanEvaluation(0.0, first, first)
    h_u = values[0, first]
    h_v = values[1, second]
    value = float(h_u - values[0, second])
    if tie_break == "max_divergence" and model.K > 1 and _tied_mask(values[1:], np.array([h_v]))[0]:
        resolved, chosen = _resolve_ties(values[:1], np.array([h_u]), values[1], h_v)
        value, second = float(resolved[0]), int(chosen[0])
    return BregmanEvaluation(max(value, 0.0), first, second)


@dataclass(frozen=True, eq=False)
class InterpolantSolution:
    """Values z_i and subgradients a_i attached to anchor points x_i"""

    values: np.ndarray
    subgradients: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        z = np.array(self.values, dtype=float).reshape(-1)
        A = np.array(self.subgradients, dtype=float)
        X = np.array(self.points, dtype=float)
        if A.ndim != 2 or X.ndim != 2:
            raise ConfigError("subgradients and points must be n x d arrays")
        if A.shape != X.shape or A.shape[0] != z.shape[0]:
            raise ConfigError(
                f"inconsistent interpolant shapes: z {z.shape}, a {A.shape}, x {X.shape}"
            )
        object.__setattr__(self, "values", _readonly(z))
        object.__setattr__(self, "subgradients", _readonly(A))
        object.__setattr__(self, "points", _readonly(X))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def violations(self) -> np.ndarray:
        """V[i, j] = a_j^T (x_i - x_j) - (z_i - z_j); positive entries violate"""
        G = self.points @ self.subgradients.T
        own = np.einsum("ij,ij->i", self.points, self.subgradients)
        return G - own[None, :] - self.values[:, None] + self.values[None, :]

    def max_violation(self) -> Tuple[float, int, int]:
        V = self.violations()
        i, j = np.unravel_index(int(np.argmax(V)), V.shape)
        return float(V[i, j]), int(i), int(j)


def interpolant_to_model(
    sol: InterpolantSolution,
    tol: float = FEASIBILITY_TOL,
    feature_scale: Optional[FeatureScale] = None,
) -> MaxAffineModel:
    """Lift a feasible interpolant to h(x) = max_i a_i^T (x - x_i) + z_i"""
    worst, i, j = sol.max_violation()
    if worst > tol:
        raise InfeasibleInterpolantError((i, j), worst)
    offsets = sol.values - np.einsum("ij,ij->i", sol.subgradients, sol.points)
    lipschitz = float(np.abs(sol.subgradients).sum(axis=1).max())
    return MaxAffineModel(
        slopes=np.array(sol.subgradients),
        offsets=offsets,
        lipschitz=lipschitz,
        feature_scale=feature_scale,
    )


@dataclass(frozen=True, eq=False)
class CoveringGrid:
    centers: np.ndarray
    epsilon: float
    per_axis: int


def _integer_root(K: int, d: int) -> int:
    g = max(1, int(round(K ** (1.0 / d))))
    while g**d > K:
        g -= 1
    while (g + 1) ** d <= K:
        g += 1
    return g


def covering_grid(R: float, d: int, K: int) -> CoveringGrid:
    """Hypercube centers covering the infinity-norm ball B(R)"""
    if K < 1 or d < 1:
        raise ConfigError("covering_grid needs K >= 1 and d >= 1")
    if not R > 0:
        raise ConfigError(f"covering_grid needs R > 0, got {R}")
    g = _integer_root(K, d)
    eps = R / g
    axis = -R + eps * (2 * np.arange(g) + 1)
    centers = np.array(list(product(axis, repeat=d)), dtype=float).reshape(-1, d)
    return CoveringGrid(centers=centers, epsilon=eps, per_axis=g)


@dataclass(frozen=True)
class SmoothConvexSpec:
    """A beta-smooth convex function on B(R), with ||grad(x) - grad(y)||_1 <= beta ||x - y||_inf

    ``phi`` maps an (n, d) array to (n,) values and ``grad`` to (n, d).
    """

    phi: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    beta: float
    radius: float
    dim: int

    def __post_init__(self):
        if not self.radius > 0 or not self.beta > 0:
            raise ConfigError("SmoothConvexSpec needs radius > 0 and beta > 0")
        if self.dim < 1:
            raise ConfigError("SmoothConvexSpec needs dim >= 1")


def squared_norm_spec(dim: int, radius: float = 1.0) -> SmoothConvexSpec:
    """phi(x) = ||x||^2, which is (2d)-smooth in the l1/l_inf pairing"""
    return SmoothConvexSpec(
        phi=lambda X: np.sum(np.square(X), axis=1),
        grad=lambda X: 2.0 * np.asarray(X, dtype=float),
        beta=2.0 * dim,
        radius=radius,
        dim=dim,
    )


def grid_approximator(spec: SmoothConvexSpec, K: int) -> MaxAffineModel:
    """Max of the tangent planes of phi at the covering-grid centers"""
    grid = covering_grid(spec.radius, spec.dim, K)
    values = np.asarray(spec.phi(grid.centers), dtype=float).reshape(-1)
    grads = np.asarray(spec.grad(grid.centers), dtype=float).reshape(grid.centers.shape)
    bad = ~(np.isfinite(values) & np.all(np.isfinite(grads), axis=1))
    if np.any(bad):
        point = grid.centers[int(np.flatnonzero(bad)[0])]
        raise ConfigError(f"phi or its gradient is not finite at grid point {point.tolist()}")
    offsets = values - np.einsum("ij,ij->i", grads, grid.centers)
    lipschitz = float(np.abs(grads).sum(axis=1).max())
    return MaxAffineModel(slopes=grads, offsets=offsets, lipschitz=lipschitz)


@dataclass(frozen=True)
class GeneralizationTerms:
    complexity: float
    confidence: float

    def rhs(self, train_hinge: float) -> float:
        return train_hinge + self.complexity + self.confidence


@dataclass(frozen=True)
class BoundReport:
    value_bound: float
    grad_bound: float
    breg_bound: float
    epsilon_margin: float
    rademacher: float
    gen_bound_terms: GeneralizationTerms
    regression_K: int
    loss_range: float
    regression_excess_terms: Tuple[float, float]
    regression_approx_bound: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "value_bound": self.value_bound,
            "grad_bound": self.grad_bound,
            "breg_bound": self.breg_bound,
            "epsilon_margin": self.epsilon_margin,
            "rademacher": self.rademacher,
            "gen_bound_terms": {
                "complexity": self.gen_bound_terms.complexity,
                "confidence": self.gen_bound_terms.confidence,
            },
            "regression_K": self.regression_K,
            "loss_range": self.loss_range,
            "regression_excess_terms": list(self.regression_excess_terms),
            "regression_approx_bound": self.regression_approx_bound,
        }


def generalization_terms(R: float, K: int, d: int, L: float, m: int, delta: float) -> GeneralizationTerms:
    """Complexity and confidence terms of the comparison generalization bound"""
    if not (R > 0 and K >= 1 and d >= 1 and m >= 1):
        raise ConfigError("generalization terms need R > 0 and K, d, m >= 1")
    if L < 0:
        raise ConfigError("generalization terms need L >= 0")
    if not 0 < delta < 1:
        raise ConfigError(f"delta must lie in (0, 1), got {delta}")
    # the peeling over L uses ceil(log2 L) >= 1
    log2_L = max(math.log2(L), 1.0) if L > 0 else 1.0
    return GeneralizationTerms(
        complexity=32.0 * K * L * R * math.sqrt(2.0 * math.log(2 * d + 2)) / math.sqrt(m),
        confidence=math.sqrt(4.0 * math.log(4.0 * log2_L) + math.log(1.0 / delta)) / math.sqrt(m),
    )


def bounds(
    beta: float,
    R: float,
    K: int,
    d: int,
    L: float,
    m: int,
    delta: float,
    sigma: float = 0.0,
) -> BoundReport:
    """Closed-form approximation, complexity and generalization bounds"""
    if not (beta > 0 and R > 0 and K >= 1 and d >= 1 and m >= 1):
        raise ConfigError("bounds needs beta, R > 0 and K, d, m >= 1")
    if L < 0 or sigma < 0:
        raise ConfigError("bounds needs L >= 0 and sigma >= 0")
    if not 0 < delta < 1:
        raise ConfigError(f"delta must lie in (0, 1), got {delta}")

    root = K ** (-1.0 / d)
    log_term = math.sqrt(2.0 * math.log(2 * d + 2) / m)
    M = 4.0 * L * R + sigma

    return BoundReport(
        value_bound=4.0 * beta * R**2 * root**2,
        grad_bound=16.0 * beta * R * root,
        breg_bound=36.0 * beta * R**2 * root,
        epsilon_margin=8.0 * R * root,
        rademacher=4.0 * K * L * R * log_term,
        gen_bound_terms=generalization_terms(R, K, d, L, m, delta),
        regression_K=int(math.ceil(m ** (d / (4.0 + 2.0 * d)))),
        loss_range=M,
        regression_excess_terms=(
            16.0 * M * K * L * R * log_term,
            M**2 * math.sqrt(math.log(1.0 / delta) / (2.0 * m)),
        ),
        regression_approx_bound=(36.0 * beta * R**2) ** 2 * root**2
        + 16.0 * M * K * L * R * log_term
        + M**2 * math.sqrt(2.0 * math.log(2.0 / delta) / m),
    )


def _ball_grid(radius: float, dim: int, points_per_axis: int) -> np.ndarray:
    axis = np.linspace(-radius, radius, points_per_axis)
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def _phi_divergences(spec: SmoothConvexSpec, X: np.ndarray) -> np.ndarray:
    values = np.asarray(spec.phi(X), dtype=float)
    grads = np.asarray(spec.grad(X), dtype=float)
    own = np.einsum("ij,ij->i", grads, X)
    return values[:, None] - values[None, :] - (X @ grads.T - own[None, :])


@dataclass(frozen=True)
class ApproximationCheck:
    K: int
    value_error: float
    value_bound: float
    bregman_error: Optional[float]
    breg_bound: float
    shrunk_radius: float

    @property
    def passed(self) -> bool:
        ok = self.value_error <= self.value_bound
        if self.bregman_error is not None:
            ok = ok and self.bregman_error <= self.breg_bound
        return ok


def approximation_errors(
    spec: SmoothConvexSpec,
    K: int,
    points_per_axis: int = 201,
    pair_points_per_axis: Optional[int] = None,
) -> ApproximationCheck:
    """Grid sup-errors of the covering-grid approximator against the bound formulas"""
    model = grid_approximator(spec, K)
    report = bounds(spec.beta, spec.radius, K, spec.dim, 1.0, 1, 0.5)

    grid = _ball_grid(spec.radius, spec.dim, points_per_axis)
    value_error = float(np.max(np.abs(np.asarray(spec.phi(grid)) - model(grid))))

    shrunk = spec.radius - report.epsilon_margin
    bregman_error = None
    if shrunk > 0:
        if pair_points_per_axis is None:
            pair_points_per_axis = points_per_axis if spec.dim == 1 else 41
        inner = _ball_grid(shrunk, spec.dim, pair_points_per_axis)
        gap = _phi_divergences(spec, inner) - divergence_matrix(model, inner, inner)
        bregman_error = float(np.max(np.abs(gap)))

    return ApproximationCheck(
        K=K,
        value_error=value_error,
        value_bound=report.value_bound,
        bregman_error=bregman_error,
        breg_bound=report.breg_bound,
        shrunk_radius=shrunk,
    )


def approximation_check(
    dim: int, K_values: List[int], radius: float = 1.0, points_per_axis: int = 201
) -> List[ApproximationCheck]:
    """Run the approximation check for phi = ||x||^2 over several K"""
    spec = squared_norm_spec(dim, radius)
    checks = [approximation_errors(spec, K, points_per_axis) for K in K_values]
    for check in checks:
        logger.debug(
            f"K={check.K}: value error {check.value_error:.3e} <= {check.value_bound:.3e}, "
            f"bregman error {check.bregman_error} <= {check.breg_bound:.3e}"
        )
    return checks


def model_to_dict(model: MaxAffineModel) -> Dict[str, Any]:
    return {
        "dim": model.dim,
        "K": model.K,
        "L": model.lipschitz,
        "slopes": model.slopes.tolist(),
        "offsets": model.offsets.tolist(),
        "feature_scale": model.feature_scale.to_dict() if model.feature_scale else {},
    }


def model_from_dict(data: Dict[str, Any]) -> MaxAffineModel:
    try:
        slopes = np.asarray(data["slopes"], dtype=float).reshape(int(data["K"]), int(data["dim"]))
        model = MaxAffineModel(
            slopes=slopes,
            offsets=np.asarray(data["offsets"], dtype=float),
            lipschitz=float(data["L"]),
            feature_scale=FeatureScale.from_dict(data.get("feature_scale") or {}),
        )
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"Malformed model document: {e}") from e
    return model


def save_model(model: MaxAffineModel, filepath: str) -> None:
    save_json(model_to_dict(model), filepath)


def load_model(filepath: str) -> MaxAffineModel:
    data = load_json(filepath)
    if not data:
        raise ConfigError(f"Model file not found or empty: {filepath}")
    return model_from_dict(data)
