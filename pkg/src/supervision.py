"""Supervision containers: relative comparisons and regression pairs"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from src.errors import ConfigError, DatasetError


def _index_array(values, columns: int, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, columns), dtype=np.int64)
    arr = arr.reshape(-1, columns)
    if arr.min() < 0:
        raise DatasetError(f"negative index in {what}", row=int(np.argwhere(arr < 0)[0, 0]))
    return arr


@dataclass(frozen=True, eq=False)
class QuadrupletSet:
    """Comparisons D(x_i, x_j) <= D(x_k, x_l), one (i, j, k, l) per row"""

    indices: np.ndarray
    margin: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "indices", _index_array(self.indices, 4, "quadruplets"))
        if not self.margin >= 0:
            raise ConfigError(f"margin must be >= 0, got {self.margin}")
        self.indices.setflags(write=False)

    @property
    def m(self) -> int:
        return self.indices.shape[0]

    def __len__(self) -> int:
        return self.m

    def observed(self) -> np.ndarray:
        """Sorted union of all indices used by the comparisons"""
        return np.unique(self.indices)

    def check_range(self, n: int) -> None:
        if self.m and self.indices.max() >= n:
            row = int(np.argwhere(self.indices >= n)[0, 0])
            raise DatasetError(f"comparison index out of range for {n} points", row=row)

    def subset(self, rows) -> "QuadrupletSet":
        return QuadrupletSet(self.indices[np.asarray(rows, dtype=np.int64)], self.margin)

    def remap(self, mapping: np.ndarray) -> "QuadrupletSet":
        return QuadrupletSet(np.asarray(mapping)[self.indices], self.margin)


@dataclass(frozen=True, eq=False)
class RegressionSet:
    """Pairs (i, j) with observed divergences y = D(x_i, x_j) + noise"""

    pairs: np.ndarray
    targets: np.ndarray
    sigma: Optional[float] = None

    def __post_init__(self):
        pairs = _index_array(self.pairs, 2, "pairs")
        targets = np.asarray(self.targets, dtype=float).reshape(-1)
        if targets.shape[0] != pairs.shape[0]:
            raise DatasetError(f"{pairs.shape[0]} pairs but {targets.shape[0]} targets")
        bad = np.flatnonzero(~np.isfinite(targets))
        if bad.size:
            raise DatasetError("target is not finite", row=int(bad[0]), column="y")
        if self.sigma is not None and self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        pairs.setflags(write=False)
        targets.setflags(write=False)
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "targets", targets)

    @property
    def m(self) -> int:
        return self.pairs.shape[0]

    def __len__(self) -> int:
        return self.m

    def observed(self) -> np.ndarray:
        return np.unique(self.pairs)

    def check_range(self, n: int) -> None:
        if self.m and self.pairs.max() >= n:
            row = int(np.argwhere(self.pairs >= n)[0, 0])
            raise DatasetError(f"pair index out of range for {n} points", row=row)

    def subset(self, rows) -> "RegressionSet":
        rows = np.asarray(rows, dtype=np.int64)
        return RegressionSet(self.pairs[rows], self.targets[rows], self.sigma)

    def remap(self, mapping: np.ndarray) -> "RegressionSet":
        return RegressionSet(np.asarray(mapping)[self.pairs], self.targets, self.sigma)
