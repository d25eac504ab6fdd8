"""Datasets, synthetic Bregman data and supervision sampling"""

import logging
import os
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, List, Literal, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import rel_entr
from scipy.stats import wishart
from sklearn import datasets as sk_datasets

from src.errors import ConfigError, DatasetError, DimensionMismatchError
from src.supervision import QuadrupletSet, RegressionSet

logger = logging.getLogger(__name__)

SYNTHETIC_KINDS = (
    "kl_dirichlet",
    "logdet_wishart",
    "itakura_saito",
    "mahalanobis",
    "squared_euclidean",
)
BUILTIN_DATASETS = ("iris", "wine", "balance_scale", "transfusion")
SIMPLEX_FLOOR = 1e-9
MAX_CLASS_RETRIES = 100


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: List[str] = field(default_factory=list)
    source: str = ""

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2:
            raise DatasetError(f"features must be a 2-D array, got shape {X.shape}")
        y = np.asarray(self.y).astype(str).reshape(-1)
        if y.shape[0] != X.shape[0]:
            raise DatasetError(f"{X.shape[0]} rows but {y.shape[0]} labels")
        bad = np.argwhere(~np.isfinite(X))
        if bad.size:
            raise DatasetError("feature value is not finite", row=int(bad[0, 0]))
        names = list(self.feature_names) or [f"f{c + 1}" for c in range(X.shape[1])]
        if len(names) != X.shape[1]:
            raise DimensionMismatchError(X.shape[1], len(names), "feature names")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def radius(self) -> float:
        """R = max ||x||_inf over the data"""
        return float(np.max(np.abs(self.X))) if self.X.size else 0.0

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.y)

    def subset(self, rows) -> "LabeledDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return LabeledDataset(self.X[rows], self.y[rows], self.feature_names, self.source)


class SyntheticSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["kl_dirichlet", "logdet_wishart", "itakura_saito", "mahalanobis", "squared_euclidean"]
    n: int = Field(default=100, ge=2)
    noise: float = Field(default=0.05, ge=0)
    seed: int = 0
    dim: int = Field(default=2, ge=1)
    matrix: Optional[List[List[float]]] = None

    @property
    def feature_dim(self) -> int:
        if self.kind == "kl_dirichlet":
            return 2
        if self.kind == "logdet_wishart":
            return 3
        return self.dim


@dataclass(frozen=True, eq=False)
class SyntheticData:
    X: np.ndarray
    supervision: RegressionSet
    oracle: Callable[[np.ndarray, np.ndarray], np.ndarray]
    spec: SyntheticSpec


def default_mahalanobis_matrix(dim: int) -> np.ndarray:
    return 0.7 * np.eye(dim) + 0.3 * np.ones((dim, dim))


def _logdet_matrices(F: np.ndarray):
    """Entries (a, b, c) of [[m11, m12], [m12, m22]] from (m11, m22, m12) rows"""
    return F[:, 0], F[:, 2], F[:, 1]


def true_divergence(kind: str, A, B, matrix: Optional[np.ndarray] = None) -> np.ndarray:
    """Ground-truth divergences D(A_t, B_t) for matching rows"""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape != B.shape:
        raise DimensionMismatchError(A.shape[1], B.shape[1], "divergence arguments")
    if kind == "kl_dirichlet":
        P = np.maximum(A, SIMPLEX_FLOOR)
        Q = np.maximum(B, SIMPLEX_FLOOR)
        return rel_entr(P, Q).sum(axis=1)
    if kind == "itakura_saito":
        ratio = A / B
        return (ratio - np.log(ratio) - 1.0).sum(axis=1)
    if kind == "squared_euclidean":
        return np.square(A - B).sum(axis=1)
    if kind == "mahalanobis":
        M = default_mahalanobis_matrix(A.shape[1]) if matrix is None else np.asarray(matrix, dtype=float)
        if M.shape != (A.shape[1], A.shape[1]):
            raise DimensionMismatchError(A.shape[1], M.shape[0], "mahalanobis matrix")
        diff = A - B
        return np.einsum("ti,ij,tj->t", diff, M, diff)
    if kind == "logdet_wishart":
        if A.shape[1] != 3:
            raise DimensionMismatchError(3, A.shape[1], "logdet features")
        # D(X, Y) = tr(X Y^-1) - log det(X Y^-1) - 2 for 2x2 SPD matrices
        xa, xb, xc = _logdet_matrices(A)
        ya, yb, yc = _logdet_matrices(B)
        det_x = xa * xc - xb**2
        det_y = ya * yc - yb**2
        trace = (xa * yc - 2.0 * xb * yb + xc * ya) / det_y
        return trace - np.log(det_x / det_y) - 2.0
    raise ConfigError(f"Unknown generator '{kind}', expected one of {SYNTHETIC_KINDS}")


def sample_points(spec: SyntheticSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    if spec.kind == "kl_dirichlet":
        return rng.dirichlet([1.0, 1.0], size=n)
    if spec.kind == "logdet_wishart":
        mats = wishart(df=10, scale=np.eye(2)).rvs(size=n, random_state=rng).reshape(n, 2, 2)
        return np.stack([mats[:, 0, 0], mats[:, 1, 1], mats[:, 0, 1]], axis=1)
    if spec.kind == "itakura_saito":
        return rng.uniform(0.1, 1.6, size=(n, spec.dim))
    return rng.uniform(-0.4, 1.6, size=(n, spec.dim))


def growing_pairs(n: int) -> np.ndarray:
    """All ordered pairs i != j of n points, ordered so the first b(b-1) rows use points 0..b-1"""
    pairs = []
    for b in range(1, n):
        for i in range(b):
            pairs.append((i, b))
            pairs.append((b, i))
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Sample points and noisy divergences for every ordered pair"""
    rng = np.random.default_rng(spec.seed)
    X = sample_points(spec, spec.n, rng)
    matrix = None
    if spec.kind == "mahalanobis":
        matrix = default_mahalanobis_matrix(spec.dim) if spec.matrix is None else np.asarray(spec.matrix)

    def oracle(A: np.ndarray, B: np.ndarray) -> np.ndarray:
        return true_divergence(spec.kind, A, B, matrix)

    pairs = growing_pairs(spec.n)
    clean = oracle(X[pairs[:, 0]], X[pairs[:, 1]])
    targets = clean + rng.normal(0.0, spec.noise, size=clean.shape[0]) if spec.noise > 0 else clean
    logger.info(f"Generated {spec.n} {spec.kind} points with {pairs.shape[0]} noisy pairs")
    return SyntheticData(
        X=X,
        supervision=RegressionSet(pairs, targets, sigma=spec.noise),
        oracle=oracle,
        spec=spec,
    )


def sample_triplets(ds: LabeledDataset, m: int = 2000, seed: int = 0, margin: float = 1.0) -> QuadrupletSet:
    """Comparisons (i, j, i, k): x_i and x_j share a class, x_k does not"""
    if m < 0:
        raise ConfigError("triplet count must be >= 0")
    if m == 0:
        return QuadrupletSet(np.zeros((0, 4), dtype=np.int64), margin)
    classes = ds.classes
    if classes.shape[0] < 2:
        raise DatasetError("triplet sampling needs at least two classes")
    members = {c: np.flatnonzero(ds.y == c) for c in classes}
    if all(members[c].shape[0] < 2 for c in classes):
        raise DatasetError("triplet sampling needs a class with at least two members")

    rng = np.random.default_rng(seed)
    rows = np.empty((m, 4), dtype=np.int64)
    for t in range(m):
        for _ in range(MAX_CLASS_RETRIES):
            c = classes[rng.integers(classes.shape[0])]
            if members[c].shape[0] >= 2:
                break
        else:
            raise DatasetError(f"no class with two members drawn in {MAX_CLASS_RETRIES} tries")
        i, j = rng.choice(members[c], size=2, replace=False)
        others = classes[classes != c]
        other = others[rng.integers(others.shape[0])]
        k = members[other][rng.integers(members[other].shape[0])]
        rows[t] = (i, j, i, k)
    return QuadrupletSet(rows, margin)


def _read_frame(path: str) -> pd.DataFrame:
    if not os.path.exists(path):
        raise DatasetError(f"File not found: {path}")
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except pd.errors.EmptyDataError as e:
        raise DatasetError(f"Empty file: {path}") from e
    except pd.errors.ParserError as e:
        raise DatasetError(f"Could not parse {path}: {e}") from e
    if frame.shape[0] == 0:
        raise DatasetError(f"No data rows in {path}")
    return frame


def _numeric_column(frame: pd.DataFrame, column: str, integer: bool = False) -> np.ndarray:
    raw = frame[column]
    values = pd.to_numeric(raw, errors="coerce").to_numpy(dtype=float)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        row = int(bad[0])
        raise DatasetError(f"non-numeric or missing value '{raw.iloc[row]}'", row=row, column=column)
    if integer:
        frac = np.flatnonzero(values != np.round(values))
        if frac.size:
            raise DatasetError("index is not an integer", row=int(frac[0]), column=column)
    return values


def load_csv(path: str, label_column: Optional[str] = "label") -> LabeledDataset:
    """Read a labeled CSV; every column except ``label_column`` is a feature.

    With ``label_column=None`` all columns are features and every row gets
    the same placeholder label.
    """
    frame = _read_frame(path)
    if label_column is None:
        features = list(frame.columns)
        X = np.column_stack([_numeric_column(frame, c) for c in features])
        return LabeledDataset(X, np.zeros(X.shape[0], dtype=int), [str(c) for c in features], source=path)
    if label_column not in frame.columns:
        raise DatasetError(f"label column '{label_column}' not found in {path}", column=label_column)
    frame = pd.read_csv(path, float_precision="round_trip", dtype={label_column: str})
    features = [c for c in frame.columns if c != label_column]
    if not features:
        raise DatasetError(f"no feature columns in {path}")
    X = np.column_stack([_numeric_column(frame, c) for c in features])
    labels = frame[label_column]
    missing = np.flatnonzero(labels.isna().to_numpy())
    if missing.size:
        raise DatasetError("missing label", row=int(missing[0]), column=label_column)
    ds = LabeledDataset(X, labels.to_numpy(dtype=str), features, source=path)
    logger.info(f"Loaded {path}: n={ds.n}, d={ds.d}, R={ds.radius:.4g}, {ds.classes.shape[0]} classes")
    return ds


def save_csv(ds: LabeledDataset, path: str, label_column: str = "label") -> None:
    frame = pd.DataFrame(ds.X, columns=ds.feature_names)
    frame[label_column] = ds.y
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    frame.to_csv(path, index=False)


def split_folds(n: int, folds: int, seed: int = 0) -> List[np.ndarray]:
    """Seeded partition of range(n) into near-equal disjoint folds"""
    if folds < 2:
        raise ConfigError(f"folds must be >= 2, got {folds}")
    if folds > n:
        raise ConfigError(f"cannot split {n} items into {folds} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, folds)]


def _balance_scale() -> LabeledDataset:
    rows = np.array(list(product(range(1, 6), repeat=4)), dtype=float)
    left = rows[:, 0] * rows[:, 1]
    right = rows[:, 2] * rows[:, 3]
    labels = np.where(left > right, "L", np.where(left < right, "R", "B"))
    names = ["left_weight", "left_distance", "right_weight", "right_distance"]
    return LabeledDataset(rows, labels, names, source="balance_scale")


def load_builtin(name: str) -> LabeledDataset:
    """Benchmark datasets available without network access"""
    if name == "iris":
        bunch = sk_datasets.load_iris()
    elif name == "wine":
        bunch = sk_datasets.load_wine()
    elif name == "balance_scale":
        return _balance_scale()
    elif name == "transfusion":
        raise DatasetError("the transfusion data set is not bundled; pass it with --data <csv>")
    else:
        raise DatasetError(f"Unknown dataset '{name}', expected one of {BUILTIN_DATASETS}")
    names = [str(f) for f in bunch.feature_names]
    return LabeledDataset(bunch.data, bunch.target.astype(str), names, source=name)


def load_dataset(source: str, label_column: Optional[str] = "label") -> LabeledDataset:
    """Built-in name or CSV path"""
    if source in BUILTIN_DATASETS and not os.path.exists(source):
        return load_builtin(source)
    return load_csv(source, label_column)


def save_quadruplets(S: QuadrupletSet, path: str) -> None:
    frame = pd.DataFrame(S.indices, columns=["i", "j", "k", "l"])
    frame.to_csv(path, index=False)


def load_quadruplets(path: str, margin: float = 1.0) -> QuadrupletSet:
    frame = _read_frame(path)
    for column in ("i", "j", "k", "l"):
        if column not in frame.columns:
            raise DatasetError(f"column '{column}' not found in {path}", column=column)
    cols = [_numeric_column(frame, c, integer=True) for c in ("i", "j", "k", "l")]
    return QuadrupletSet(np.column_stack(cols).astype(np.int64), margin)


def save_pairs(S: RegressionSet, path: str) -> None:
    frame = pd.DataFrame({"i": S.pairs[:, 0], "j": S.pairs[:, 1], "y": S.targets})
    frame.to_csv(path, index=False)


def load_pairs(path: str) -> RegressionSet:
    frame = _read_frame(path)
    for column in ("i", "j", "y"):
        if column not in frame.columns:
            raise DatasetError(f"column '{column}' not found in {path}", column=column)
    i = _numeric_column(frame, "i", integer=True)
    j = _numeric_column(frame, "j", integer=True)
    y = _numeric_column(frame, "y")
    return RegressionSet(np.column_stack([i, j]).astype(np.int64), y)
