"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration and data problems exit
with 2, numerical failures exit with 1.
"""

from typing import Any, Optional, Tuple


class PBDLError(Exception):
    """Base class for all package errors"""


class ConfigError(PBDLError, ValueError):
    """Invalid settings, arguments or preconditions"""


class DimensionMismatchError(PBDLError, ValueError):
    def __init__(self, expected: int, actual: int, what: str = "input"):
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"Dimension mismatch for {what}: expected {expected}, got {actual}"
        )


class DatasetError(PBDLError, ValueError):
    def __init__(
        self,
        message: str,
        row: Optional[int] = None,
        column: Optional[str] = None,
    ):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column '{column}'")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")


class InfeasibleInterpolantError(PBDLError):
    def __init__(self, pair: Tuple[int, int], violation: float):
        self.pair = pair
        self.violation = violation
        i, j = pair
        super().__init__(
            f"Interpolant violates z_i - z_j >= a_j^T (x_i - x_j) "
            f"for (i={i}, j={j}) by {violation:.3e}"
        )


class UnboundedProgramError(PBDLError):
    """The program is unbounded below on its feasible set"""

    def __init__(self, message: str, report: Any = None):
        self.report = report
        super().__init__(message)


class SolverFailureError(PBDLError):
    """The solver did not return an optimal solution where one was required"""

    def __init__(self, message: str, report: Any = None):
        self.report = report
        super().__init__(message)
