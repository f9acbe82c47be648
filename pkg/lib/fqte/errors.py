"""Error types raised by the FQTE library.

Every error carries enough context to be reported as a JSON object by the CLI
(see :meth:`FqteError.to_dict`).
"""

from __future__ import annotations

from typing import Any


class FqteError(Exception):
    """Base class for all estimator, data and simulation errors."""

    def __init__(self, message: str, **context: Any) -> None:
        super().__init__(message)
        self.message = message
        self.context = context

    def to_dict(self) -> dict[str, Any]:
        return {"error": type(self).__name__, "message": self.message, **self.context}


class ConfigError(FqteError, ValueError):
    """Invalid quantile levels, flags or settings."""


class DataValidationError(FqteError, ValueError):
    """A CSV cell, column or arm violates the fused-dataset invariants."""

    def __init__(self, message: str, *, row: int | None = None, column: str | None = None, **context: Any) -> None:
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        full = f"{message} ({', '.join(where)})" if where else message
        super().__init__(full, row=row, column=column, **context)
        self.row = row
        self.column = column


class ModelFitError(FqteError):
    """A working model could not be fitted."""


class SeparationError(ModelFitError):
    """Logistic likelihood has no finite maximiser."""


class DegenerateOutcomeError(ModelFitError):
    """Outcome model fits the data exactly (zero residual scale)."""


class SingularMatrixError(ModelFitError):
    def __init__(self, message: str, *, condition: float, **context: Any) -> None:
        super().__init__(f"{message} (condition number {condition:.3g})", condition=condition, **context)
        self.condition = condition


class NoRootError(FqteError):
    """The empirical estimating equation never changes sign."""


class DensityError(FqteError):
    pass


class DimensionMismatchError(FqteError, ValueError):
    pass


class CalibrationDegenerateError(FqteError):
    """Calibration covariance is numerically zero while the cross-covariance is not."""


class MonteCarloError(FqteError):
    pass
