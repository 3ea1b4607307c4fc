"""Tabular observational datasets: synthetic covariate-shift generator, CSV
ingestion, standardization, and splitting.

A :class:`Dataset` holds covariates ``x`` (n x d), a binary treatment ``z``,
an observed outcome ``y``, and (for synthetic or semi-synthetic data) the
noiseless structural potential outcomes used for evaluation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "Dataset",
    "StandardizationStats",
    "ColumnSpec",
    "DataFormatError",
    "generate_synthetic",
    "load_csv",
    "save_csv",
    "standardize",
    "destandardize_y",
    "split",
]


class DataFormatError(ValueError):
    """Raised when a file or array violates the dataset contract."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Immutable rows of (covariates, treatment, outcome).

    ``true_y0``/``true_y1`` are the noiseless structural potential outcomes
    (present for synthetic data); ``true_cate`` is their difference. Arrays
    are copied and marked read-only, so instances are safe to share across
    threads.
    """

    covariates: np.ndarray
    treatments: np.ndarray
    outcomes: np.ndarray
    true_y0: np.ndarray | None = None
    true_y1: np.ndarray | None = None
    true_cate: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.covariates, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] < 1:
            raise DataFormatError("covariates must be a nonempty n x d matrix")
        object.__setattr__(self, "covariates", _readonly(x))
        n = x.shape[0]
        z = np.asarray(self.treatments, dtype=np.float64)
        if z.shape != (n,):
            raise DataFormatError(f"treatments must have length {n}, got shape {z.shape}")
        if not np.all((z == 0.0) | (z == 1.0)):
            bad = int(np.argmax((z != 0.0) & (z != 1.0)))
            raise DataFormatError(f"treatment must be 0 or 1; offending row {bad} has value {z[bad]!r}")
        object.__setattr__(self, "treatments", _readonly(z))
        y = np.asarray(self.outcomes, dtype=np.float64)
        if y.shape != (n,):
            raise DataFormatError(f"outcomes must have length {n}, got shape {y.shape}")
        object.__setattr__(self, "outcomes", _readonly(y))
        for name in ("true_y0", "true_y1", "true_cate"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.asarray(v, dtype=np.float64)
            if v.shape != (n,):
                raise DataFormatError(f"{name} must have length {n}, got shape {v.shape}")
            object.__setattr__(self, name, _readonly(v))
        if self.true_cate is not None and self.true_y0 is not None and self.true_y1 is not None:
            if not np.allclose(self.true_cate, self.true_y1 - self.true_y0, rtol=1e-9, atol=1e-9):
                raise DataFormatError("true_cate inconsistent with true_y1 - true_y0")

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def d(self) -> int:
        return self.covariates.shape[1]

    def take(self, idx: np.ndarray) -> "Dataset":
        """Row subset (used by :func:`split`)."""
        pick = lambda a: None if a is None else a[idx]
        return Dataset(
            covariates=self.covariates[idx],
            treatments=self.treatments[idx],
            outcomes=self.outcomes[idx],
            true_y0=pick(self.true_y0),
            true_y1=pick(self.true_y1),
            true_cate=pick(self.true_cate),
        )


@dataclass(frozen=True)
class StandardizationStats:
    """Per-column covariate mean/std and outcome mean/std.

    Stds use the population (1/n) convention and are clamped to 1 for
    degenerate (constant) columns, so they are always strictly positive.
    """

    mean_x: np.ndarray
    std_x: np.ndarray
    mean_y: float
    std_y: float

    def __post_init__(self):
        object.__setattr__(self, "mean_x", _readonly(np.atleast_1d(self.mean_x)))
        object.__setattr__(self, "std_x", _readonly(np.atleast_1d(self.std_x)))
        if np.any(self.std_x <= 0) or self.std_y <= 0:
            raise ValueError("standardization stds must be strictly positive")

    def to_dict(self) -> dict:
        return {
            "mean_x": self.mean_x.tolist(),
            "std_x": self.std_x.tolist(),
            "mean_y": float(self.mean_y),
            "std_y": float(self.std_y),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StandardizationStats":
        return cls(
            mean_x=np.asarray(d["mean_x"], dtype=np.float64),
            std_x=np.asarray(d["std_x"], dtype=np.float64),
            mean_y=float(d["mean_y"]),
            std_y=float(d["std_y"]),
        )


def _structural_y0(x: np.ndarray) -> np.ndarray:
    return np.sin(2.0 * x)


def _structural_y1(x: np.ndarray) -> np.ndarray:
    return np.sin(2.0 * x) + np.exp(x)


def generate_synthetic(n: int, domain: str, noise_std: float = 0.1, seed: int = 0) -> Dataset:
    """Draw the scalar-covariate benchmark with a treatment-assignment shift.

    Covariate x ~ N(0,1) in both domains. In the ``train`` domain treatment
    is deterministic, z = 1{x < -1} (about 16% treated); in the ``test``
    domain z ~ Bernoulli(0.5), emulating a randomized trial. The observed
    outcome is y = sin(2x) + z*exp(x) + eps with eps ~ N(0, noise_std^2).
    The stored potential outcomes are the noiseless structural values.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    if domain not in ("train", "test"):
        raise ValueError(f"domain must be 'train' or 'test', got {domain!r}")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    if domain == "train":
        z = (x < -1.0).astype(np.float64)
    else:
        z = rng.binomial(1, 0.5, size=n).astype(np.float64)
    y0 = _structural_y0(x)
    y1 = _structural_y1(x)
    eps = rng.standard_normal(n) * noise_std
    y = np.where(z == 1.0, y1, y0) + eps
    return Dataset(
        covariates=x[:, None],
        treatments=z,
        outcomes=y,
        true_y0=y0,
        true_y1=y1,
        true_cate=y1 - y0,
    )


@dataclass(frozen=True)
class ColumnSpec:
    """Names of the columns holding each dataset role in a CSV file."""

    covariates: tuple[str, ...]
    treatment: str = "z"
    outcome: str = "y"
    true_y0: str | None = None
    true_y1: str | None = None
    true_cate: str | None = None


def load_csv(path: str | Path, spec: ColumnSpec) -> Dataset:
    """Parse a UTF-8, comma-separated file with a header row into a Dataset.

    Errors name the missing column, the row holding a non-binary treatment,
    or the cell that fails numeric parsing. Row indices are 0-based over
    data rows (the header is not counted).
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        required = list(spec.covariates) + [spec.treatment, spec.outcome]
        optional = [c for c in (spec.true_y0, spec.true_y1, spec.true_cate) if c]
        for col in required + optional:
            if col not in header:
                raise DataFormatError(f"missing column {col!r} in {path.name} (header: {header})")
        rows = list(reader)
    if not rows:
        raise DataFormatError(f"{path.name} contains no data rows")

    def parse(row_idx: int, col: str) -> float:
        raw = rows[row_idx][col]
        try:
            return float(raw)
        except (TypeError, ValueError):
            raise DataFormatError(
                f"unparseable numeric value {raw!r} in column {col!r}, row {row_idx} of {path.name}"
            ) from None

    n = len(rows)
    x = np.empty((n, len(spec.covariates)))
    z = np.empty(n)
    y = np.empty(n)
    extras = {name: np.empty(n) for name, col in
              (("true_y0", spec.true_y0), ("true_y1", spec.true_y1), ("true_cate", spec.true_cate))
              if col}
    for i in range(n):
        for j, col in enumerate(spec.covariates):
            x[i, j] = parse(i, col)
        z[i] = parse(i, spec.treatment)
        if z[i] not in (0.0, 1.0):
            raise DataFormatError(
                f"treatment column {spec.treatment!r} must be 0 or 1; row {i} has {z[i]!r}"
            )
        y[i] = parse(i, spec.outcome)
        for name, col in (("true_y0", spec.true_y0), ("true_y1", spec.true_y1), ("true_cate", spec.true_cate)):
            if col:
                extras[name][i] = parse(i, col)
    return Dataset(covariates=x, treatments=z, outcomes=y, **extras)


def save_csv(ds: Dataset, path: str | Path, spec: ColumnSpec | None = None) -> ColumnSpec:
    """Write a Dataset back to CSV; inverse of :func:`load_csv` up to float formatting."""
    if spec is None:
        spec = ColumnSpec(
            covariates=tuple(f"x{j}" for j in range(ds.d)),
            treatment="z",
            outcome="y",
            true_y0="y0" if ds.true_y0 is not None else None,
            true_y1="y1" if ds.true_y1 is not None else None,
            true_cate="cate" if ds.true_cate is not None else None,
        )
    cols = list(spec.covariates) + [spec.treatment, spec.outcome]
    series = [ds.covariates[:, j] for j in range(ds.d)] + [ds.treatments, ds.outcomes]
    for name, col in (("true_y0", spec.true_y0), ("true_y1", spec.true_y1), ("true_cate", spec.true_cate)):
        v = getattr(ds, name)
        if col and v is not None:
            cols.append(col)
            series.append(v)
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for i in range(ds.n):
            writer.writerow([repr(float(s[i])) for s in series])
    return spec


def standardize(ds: Dataset) -> tuple[Dataset, StandardizationStats]:
    """Shift/scale covariate columns and outcomes to empirical mean 0, std 1.

    Uses the population (1/n) std; constant columns keep their values and get
    std clamped to 1. Treatments and the stored potential outcomes pass
    through untouched (potential outcomes stay in original units for
    evaluation).
    """
    mean_x = ds.covariates.mean(axis=0)
    std_x = ds.covariates.std(axis=0)
    std_x = np.where(std_x < 1e-12, 1.0, std_x)
    mean_y = float(ds.outcomes.mean())
    std_y = float(ds.outcomes.std())
    if std_y < 1e-12:
        std_y = 1.0
    stats = StandardizationStats(mean_x=mean_x, std_x=std_x, mean_y=mean_y, std_y=std_y)
    out = replace(
        ds,
        covariates=(ds.covariates - mean_x) / std_x,
        outcomes=(ds.outcomes - mean_y) / std_y,
    )
    return out, stats


def standardize_x(x: np.ndarray, stats: StandardizationStats) -> np.ndarray:
    """Apply training-set covariate standardization to new rows."""
    return (np.asarray(x, dtype=np.float64) - stats.mean_x) / stats.std_x


def destandardize_y(values: np.ndarray, stats: StandardizationStats) -> np.ndarray:
    """Map standardized outcome values back to original units."""
    return np.asarray(values, dtype=np.float64) * stats.std_y + stats.mean_y


def split(ds: Dataset, fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Random disjoint row partition: (round(n*fraction), rest) rows.

    Deterministic given the seed; both parts are nonempty Datasets.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    if ds.n < 2:
        raise ValueError("need at least 2 rows to split")
    n_first = int(round(ds.n * fraction))
    n_first = min(max(n_first, 1), ds.n - 1)
    perm = np.random.default_rng(seed).permutation(ds.n)
    return ds.take(np.sort(perm[:n_first])), ds.take(np.sort(perm[n_first:]))
