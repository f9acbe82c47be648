"""Two-sample fused dataset: validation rows with (Y, T, X, S), auxiliary rows with (Y, T, X).

Rows are indexed the way the estimator expects: validation rows are 1..n and
auxiliary rows n+1..N. Both CSVs are read with polars, columns selected by
name through a :class:`ColumnSchema`, never by position.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import polars as pl

from lib.fqte.errors import ConfigError, DataValidationError


@dataclass(frozen=True)
class ColumnSchema:
    """Maps the roles y, t, x, s to CSV column names."""

    y: str
    t: str
    x: tuple[str, ...]
    s: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.x:
            raise ConfigError("schema needs at least one x column")
        if not self.s:
            raise ConfigError("schema needs at least one s column")
        names = [self.y, self.t, *self.x, *self.s]
        if len(set(names)) != len(names):
            raise ConfigError(f"schema column names must be distinct: {names}")

    @classmethod
    def from_strings(cls, y: str, t: str, x: str | Sequence[str], s: str | Sequence[str]) -> ColumnSchema:
        """Build a schema from CLI-style comma-separated column lists."""

        def _split(cols: str | Sequence[str]) -> tuple[str, ...]:
            if isinstance(cols, str):
                return tuple(c.strip() for c in cols.split(",") if c.strip())
            return tuple(cols)

        return cls(y=y, t=t, x=_split(x), s=_split(s))

    @property
    def validation_columns(self) -> list[str]:
        return [self.y, self.t, *self.x, *self.s]

    @property
    def auxiliary_columns(self) -> list[str]:
        return [self.y, self.t, *self.x]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Sample:
    """Column-wise block of observations. ``s`` is None for partially observed rows."""

    y: np.ndarray
    t: np.ndarray
    x: np.ndarray
    s: np.ndarray | None = None

    def __post_init__(self) -> None:
        raw_t = np.asarray(self.t)
        nonbinary = ~np.isin(raw_t, (0, 1))
        if nonbinary.any():
            row = int(np.flatnonzero(nonbinary)[0]) + 1
            raise DataValidationError("non-binary treatment", row=row, column="t")
        object.__setattr__(self, "y", _frozen(np.asarray(self.y, dtype=float)))
        object.__setattr__(self, "t", _frozen(raw_t.astype(np.int8)))
        object.__setattr__(self, "x", _frozen(np.atleast_2d(np.asarray(self.x, dtype=float).T).T))
        if self.s is not None:
            object.__setattr__(self, "s", _frozen(np.atleast_2d(np.asarray(self.s, dtype=float).T).T))
        n = self.y.shape[0]
        if self.t.shape != (n,) or self.x.shape[0] != n or (self.s is not None and self.s.shape[0] != n):
            raise DataValidationError("sample arrays have inconsistent row counts")

    def __len__(self) -> int:
        return int(self.y.shape[0])

    @property
    def has_s(self) -> bool:
        return self.s is not None

    def record(self, i: int) -> Record:
        return Record(
            y=float(self.y[i]),
            t=int(self.t[i]),
            x=self.x[i],
            s=None if self.s is None else self.s[i],
        )

    def drop_s(self) -> Sample:
        return Sample(y=self.y, t=self.t, x=self.x, s=None)

    def take(self, index: np.ndarray) -> Sample:
        return Sample(
            y=self.y[index],
            t=self.t[index],
            x=self.x[index],
            s=None if self.s is None else self.s[index],
        )

    def equals(self, other: Sample) -> bool:
        same_s = (self.s is None and other.s is None) or (
            self.s is not None and other.s is not None and np.array_equal(self.s, other.s)
        )
        return (
            np.array_equal(self.y, other.y)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and same_s
        )


@dataclass(frozen=True)
class Record:
    """One observation; ``s`` is None for a partially observed row."""

    y: float
    t: int
    x: np.ndarray
    s: np.ndarray | None = None


@dataclass(frozen=True)
class FusedDataset:
    validation: Sample
    auxiliary: Sample

    def __post_init__(self) -> None:
        _check_dataset(self.validation, self.auxiliary)

    @property
    def n(self) -> int:
        return len(self.validation)

    @property
    def N(self) -> int:
        return len(self.validation) + len(self.auxiliary)

    @property
    def nu(self) -> float:
        return self.n / self.N

    @property
    def p_x(self) -> int:
        return int(self.validation.x.shape[1])

    @property
    def p_s(self) -> int:
        if self.validation.s is None:
            raise DataValidationError("validation sample needs at least one s column")
        return int(self.validation.s.shape[1])

    def pooled(self) -> Sample:
        """All N rows with S dropped, validation rows first."""
        return Sample(
            y=np.concatenate([self.validation.y, self.auxiliary.y]),
            t=np.concatenate([self.validation.t, self.auxiliary.t]),
            x=np.vstack([self.validation.x, self.auxiliary.x]),
            s=None,
        )

    def equals(self, other: FusedDataset) -> bool:
        return self.validation.equals(other.validation) and self.auxiliary.equals(other.auxiliary)


def _check_arms(t: np.ndarray, where: str) -> None:
    for arm in (0, 1):
        if not np.any(t == arm):
            raise DataValidationError(f"empty treatment arm t={arm} in {where}", column="t", arm=arm)


def _check_dataset(validation: Sample, auxiliary: Sample) -> None:
    if len(validation) < 1:
        raise DataValidationError("validation sample is empty")
    if len(auxiliary) < 1:
        raise DataValidationError("auxiliary sample is empty; fusion needs N > n")
    if validation.s is None or validation.s.shape[1] < 1:
        raise DataValidationError("validation sample needs at least one s column")
    if auxiliary.s is not None:
        raise DataValidationError("auxiliary sample must not carry s columns")
    if validation.x.shape[1] != auxiliary.x.shape[1]:
        raise DataValidationError(
            f"x dimension differs between samples ({validation.x.shape[1]} vs {auxiliary.x.shape[1]})"
        )
    for name, block in (("validation", validation), ("auxiliary", auxiliary)):
        arrays = [block.y, block.x] + ([block.s] if block.s is not None else [])
        for arr in arrays:
            if not np.all(np.isfinite(arr)):
                raise DataValidationError(f"non-finite value in {name} sample")
    _check_arms(validation.t, "validation sample")
    _check_arms(np.concatenate([validation.t, auxiliary.t]), "pooled sample")


@dataclass(frozen=True)
class QuantileSpec:
    """Target quantile level ``p`` and the ordered calibration levels ``p_cal``."""

    p: float
    p_cal: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        p_cal = tuple(float(v) for v in self.p_cal) or (float(self.p),)
        object.__setattr__(self, "p", float(self.p))
        object.__setattr__(self, "p_cal", p_cal)
        for level in (self.p, *p_cal):
            if not 0.0 < level < 1.0:
                raise ConfigError(f"quantile level out of range: {level}", level=level)
        if any(b <= a for a, b in zip(p_cal, p_cal[1:], strict=False)):
            raise ConfigError(f"calibration levels must be strictly increasing: {list(p_cal)}")

    @property
    def d(self) -> int:
        return len(self.p_cal)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def _read_block(
    path: Path,
    schema: ColumnSchema,
    columns: list[str],
    label: str,
    forbidden: Sequence[str] = (),
    exact: bool = False,
) -> dict[str, np.ndarray]:
    if not Path(path).exists():
        raise FileNotFoundError(f"{label} file not found: {path}")
    # Read everything as text so that a bad cell can be reported by position.
    try:
        frame = pl.read_csv(path, infer_schema_length=0, encoding="utf8")
    except pl.exceptions.PolarsError as exc:
        raise DataValidationError(f"cannot parse {label} file: {exc}", path=str(path)) from exc
    leaked = [c for c in forbidden if c in frame.columns]
    if leaked:
        raise DataValidationError(f"{label} file must not contain s columns", column=leaked[0], path=str(path))
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise DataValidationError(f"missing column in {label} file", column=missing[0], path=str(path))
    extra = [c for c in frame.columns if c not in columns] if exact else []
    if extra:
        raise DataValidationError(f"unexpected column in {label} file", column=extra[0], path=str(path))

    parsed: dict[str, np.ndarray] = {}
    for col in columns:
        raw = frame.get_column(col)
        values = raw.str.strip_chars().cast(pl.Float64, strict=False)
        bad = values.is_null() | ~values.is_finite().fill_null(False)
        if bad.any():
            row = int(bad.arg_true()[0]) + 1
            raise DataValidationError(
                f"non-finite numeric cell in {label} file (value {raw[row - 1]!r})",
                row=row,
                column=col,
                path=str(path),
            )
        parsed[col] = values.to_numpy()

    t = parsed[schema.t]
    nonbinary = ~np.isin(t, (0.0, 1.0))
    if nonbinary.any():
        row = int(np.flatnonzero(nonbinary)[0]) + 1
        raise DataValidationError(
            f"non-binary treatment in {label} file (value {t[row - 1]!r})", row=row, column=schema.t, path=str(path)
        )
    return parsed


def load_fused_dataset(validation_path: Path | str, auxiliary_path: Path | str, schema: ColumnSchema) -> FusedDataset:
    """Read the validation and auxiliary CSVs into a :class:`FusedDataset`.

    Row order is preserved. The auxiliary file holds exactly the schema's y, t
    and x columns; any s column or other extra column is rejected. The
    validation file may carry extra columns, which are ignored.
    """
    validation_path, auxiliary_path = Path(validation_path), Path(auxiliary_path)
    v = _read_block(validation_path, schema, schema.validation_columns, "validation")
    a = _read_block(auxiliary_path, schema, schema.auxiliary_columns, "auxiliary", forbidden=schema.s, exact=True)

    validation = Sample(
        y=v[schema.y],
        t=v[schema.t],
        x=np.column_stack([v[c] for c in schema.x]),
        s=np.column_stack([v[c] for c in schema.s]),
    )
    auxiliary = Sample(
        y=a[schema.y],
        t=a[schema.t],
        x=np.column_stack([a[c] for c in schema.x]),
    )
    return FusedDataset(validation=validation, auxiliary=auxiliary)


def write_fused_dataset(
    ds: FusedDataset, validation_path: Path | str, auxiliary_path: Path | str, schema: ColumnSchema
) -> None:
    """Write the two CSVs that :func:`load_fused_dataset` reads back."""
    if len(schema.x) != ds.p_x or len(schema.s) != ds.p_s:
        raise ConfigError("schema column counts do not match the dataset dimensions")

    def _frame(block: Sample, with_s: bool) -> pl.DataFrame:
        data: dict[str, np.ndarray] = {schema.y: block.y, schema.t: block.t.astype(np.int64)}
        for j, col in enumerate(schema.x):
            data[col] = block.x[:, j]
        if with_s:
            if block.s is None:
                raise DataValidationError("validation sample needs at least one s column")
            for j, col in enumerate(schema.s):
                data[col] = block.s[:, j]
        return pl.DataFrame(data)

    for path in (validation_path, auxiliary_path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
    _frame(ds.validation, with_s=True).write_csv(validation_path)
    _frame(ds.auxiliary, with_s=False).write_csv(auxiliary_path)
