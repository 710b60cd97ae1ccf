"""Trial data loading, standardization and covariate-group bookkeeping."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd


class DataError(ValueError):
    """Raised when a trial data file or column schema is unusable."""


@dataclass(frozen=True)
class ColumnRecord:
    name: str
    mean: float
    sd: float
    kind: str  # "continuous" or "dummy"


@dataclass(frozen=True)
class StandardizationRecord:
    """Per-column transform applied to the raw covariates.

    Dummy columns carry ``mean=0, sd=1`` so the inverse transform is the
    identity for them.
    """

    columns: tuple[ColumnRecord, ...]

    def inverse(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        means = np.array([c.mean for c in self.columns])
        sds = np.array([c.sd for c in self.columns])
        return x * sds + means

    def to_dict(self) -> list[dict]:
        return [vars(c) for c in self.columns]


@dataclass(frozen=True)
class ColumnSchema:
    """Roles of the CSV columns."""

    dose: str = "dose"
    response: str = "response"
    continuous: tuple[str, ...] = ()
    categorical: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "continuous", tuple(self.continuous))
        object.__setattr__(self, "categorical", tuple(self.categorical))


@dataclass(frozen=True, eq=False)
class TrialDataset:
    dose: np.ndarray
    response: np.ndarray
    covariates: np.ndarray
    group_index: np.ndarray
    group_names: tuple[str, ...]
    column_names: tuple[str, ...]
    standardization: StandardizationRecord
    dose_levels: np.ndarray = field(init=False)

    def __post_init__(self):
        dose = np.ascontiguousarray(self.dose, dtype=float)
        y = np.ascontiguousarray(self.response, dtype=float)
        x = np.ascontiguousarray(self.covariates, dtype=float)
        if x.ndim != 2:
            x = x.reshape(len(dose), -1)
        gi = np.ascontiguousarray(self.group_index, dtype=np.int64)
        n = dose.shape[0]
        if n < 1:
            raise DataError("dataset has no rows")
        if y.shape != (n,) or x.shape[0] != n:
            raise DataError("dose, response and covariates disagree on the number of rows")
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(dose)) or not np.all(np.isfinite(x)):
            raise DataError("non-finite values in dose, response or covariates")
        if np.any(dose < 0):
            raise DataError("negative dose")
        levels = np.unique(dose)
        if levels[0] != 0.0:
            raise DataError("dose column has no 0 (placebo) level")
        if levels.size < 2:
            raise DataError("no active dose")
        p = x.shape[1]
        k = len(self.group_names)
        if gi.shape != (p,):
            raise DataError("group_index must have one entry per covariate column")
        if p and (gi.min() < 0 or gi.max() >= k or np.unique(gi).size != k):
            raise DataError("groups must partition the covariate columns")
        for arr in (dose, y, x, gi):
            arr.setflags(write=False)
        object.__setattr__(self, "dose", dose)
        object.__setattr__(self, "response", y)
        object.__setattr__(self, "covariates", x)
        object.__setattr__(self, "group_index", gi)
        object.__setattr__(self, "dose_levels", levels)
        levels.setflags(write=False)

    @property
    def n(self) -> int:
        return self.dose.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def k(self) -> int:
        return len(self.group_names)

    @property
    def d_max(self) -> float:
        return float(self.dose_levels[-1])

    def groups(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.group_index == g) for g in range(self.k)]

    def summary(self) -> dict:
        return {
            "n": self.n,
            "k": self.k,
            "p": self.p,
            "dose_levels": self.dose_levels.tolist(),
            "groups": {
                name: [self.column_names[j] for j in cols]
                for name, cols in zip(self.group_names, self.groups())
            },
        }

    def fingerprint(self) -> str:
        """Hex digest of the numeric content (used for paired-seeding checks)."""
        import hashlib

        h = hashlib.sha256()
        for arr in (self.dose, self.response, self.covariates, self.group_index):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def standardize(raw_column) -> tuple[np.ndarray, ColumnRecord]:
    """Center and scale a column with the sample (n-1) standard deviation."""
    x = np.asarray(raw_column, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise DataError("standardize needs a 1-d column with at least 2 values")
    mean = x.mean()
    sd = x.std(ddof=1)
    if not sd > 0:
        raise DataError("cannot standardize a constant column (zero sd)")
    return (x - mean) / sd, ColumnRecord(name="", mean=float(mean), sd=float(sd), kind="continuous")


def dummy_code(values: Sequence, name: str) -> tuple[np.ndarray, list[str], list]:
    """Z-1 dummy columns; the reference is the lexicographically first level."""
    vals = np.asarray([str(v) for v in values])
    levels = sorted(set(vals.tolist()))
    if len(levels) < 2:
        raise DataError(f"categorical column {name!r} has a single level")
    cols = np.column_stack([(vals == lev).astype(float) for lev in levels[1:]])
    return cols, [f"{name}[{lev}]" for lev in levels[1:]], levels


def build_dataset(dose, response, continuous: dict | None = None,
                  categorical: dict | None = None, standardize_continuous=True) -> TrialDataset:
    """Assemble a dataset from in-memory columns.

    ``continuous`` and ``categorical`` map covariate names to raw value
    sequences; columns keep the insertion order, continuous ones first.
    """
    continuous = continuous or {}
    categorical = categorical or {}
    cols, names, records, gidx, gnames = [], [], [], [], []
    for name, raw in continuous.items():
        raw = np.asarray(raw, dtype=float)
        if standardize_continuous:
            z, rec = standardize(raw)
            rec = ColumnRecord(name, rec.mean, rec.sd, "continuous")
        else:
            z, rec = raw, ColumnRecord(name, 0.0, 1.0, "continuous")
        cols.append(z[:, None])
        names.append(name)
        records.append(rec)
        gidx.append(len(gnames))
        gnames.append(name)
    for name, raw in categorical.items():
        dummies, dnames, _ = dummy_code(raw, name)
        cols.append(dummies)
        names.extend(dnames)
        records.extend(ColumnRecord(dn, 0.0, 1.0, "dummy") for dn in dnames)
        gidx.extend([len(gnames)] * dummies.shape[1])
        gnames.append(name)
    n = len(dose)
    x = np.hstack(cols) if cols else np.zeros((n, 0))
    return TrialDataset(
        dose=np.asarray(dose, dtype=float),
        response=np.asarray(response, dtype=float),
        covariates=x,
        group_index=np.asarray(gidx, dtype=np.int64),
        group_names=tuple(gnames),
        column_names=tuple(names),
        standardization=StandardizationRecord(tuple(records)),
    )


def load_dataset(path, schema: ColumnSchema | None = None, standardize: bool = True) -> TrialDataset:
    """Read a one-row-per-patient CSV into a validated :class:`TrialDataset`.

    When ``schema`` lists no covariates, every column other than dose and
    response is treated as a continuous covariate.
    """
    path = Path(path)
    schema = schema or ColumnSchema()
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    try:
        df = pd.read_csv(path)
    except Exception as exc:  # parser errors carry pandas-specific types
        raise DataError(f"could not parse {path}: {exc}") from exc
    continuous = list(schema.continuous)
    categorical = list(schema.categorical)
    if not continuous and not categorical:
        continuous = [c for c in df.columns if c not in (schema.dose, schema.response)]
    needed = [schema.dose, schema.response, *continuous, *categorical]
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise DataError(f"missing column(s) in {path}: {', '.join(missing)}")
    df = df[needed]
    if df.isna().any().any():
        bad = [c for c in needed if df[c].isna().any()]
        raise DataError(f"missing values (NaN) in column(s): {', '.join(bad)}")
    numeric = [schema.dose, schema.response, *continuous]
    for c in numeric:
        if not pd.api.types.is_numeric_dtype(df[c]):
            raise DataError(f"column {c!r} must be numeric")
    dose = df[schema.dose].to_numpy(float)
    if not np.any(dose == 0):
        raise DataError("dose column has no 0 (placebo) level")
    if np.all(dose == 0):
        raise DataError("no active dose")
    return build_dataset(
        dose,
        df[schema.response].to_numpy(float),
        continuous={c: df[c].to_numpy(float) for c in continuous},
        categorical={c: df[c].tolist() for c in categorical},
        standardize_continuous=standardize,
    )


def write_summary(data: TrialDataset, path) -> None:
    Path(path).write_text(json.dumps(data.summary(), indent=2))
