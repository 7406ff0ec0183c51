"""Clustered cross-section containers and CSV input/output.

A dataset is an ordered collection of units, each carrying an outcome,
a binary treatment, a covariate vector, and a cluster label. Labels may
be arbitrary strings or numbers; internally they are mapped to dense
integer ids in order of first appearance, and all numeric work runs on
contiguous arrays.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .exceptions import InputError

__all__ = [
    "UnitRecord",
    "Dataset",
    "ValidationReport",
    "CsvSchema",
    "load_csv",
    "write_csv",
    "validate",
    "group_by_size",
]


@dataclass(frozen=True)
class UnitRecord:
    """One observation: outcome, treatment, covariates, cluster label."""

    y: float
    w: int
    x: tuple
    cluster_id: object


@dataclass(frozen=True)
class CsvSchema:
    """Column names used when reading or writing CSV files.

    ``covariates=None`` means: every column not claimed by the other
    three roles, in header order.
    """

    outcome: str = "y"
    treatment: str = "w"
    cluster: str = "cluster"
    covariates: Optional[Sequence[str]] = None


class Dataset:
    """Immutable clustered dataset backed by dense arrays.

    Parameters
    ----------
    y : array of float, shape (n,)
        Outcomes. NaN values are permitted here and reported by
        :func:`validate`.
    w : array of int, shape (n,)
        Binary treatment indicators, each exactly 0 or 1.
    x : array of float, shape (n, k)
        Covariates. Must be finite.
    cluster_labels : sequence of length n
        Cluster label per unit, any hashable values.
    """

    def __init__(self, y, w, x, cluster_labels):
        y = np.asarray(y, dtype=float)
        w = np.asarray(w)
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        n = y.shape[0]
        if y.ndim != 1:
            raise InputError("outcome must be one-dimensional")
        if w.shape != (n,):
            raise InputError(
                f"treatment has shape {w.shape}, expected ({n},)"
            )
        if x.shape[0] != n:
            raise InputError(
                f"covariates have {x.shape[0]} rows, expected {n}"
            )
        if len(cluster_labels) != n:
            raise InputError(
                f"got {len(cluster_labels)} cluster labels, expected {n}"
            )
        w_float = np.asarray(w, dtype=float)
        if not np.all((w_float == 0.0) | (w_float == 1.0)):
            bad = np.flatnonzero((w_float != 0.0) & (w_float != 1.0))[:5]
            raise InputError(
                f"treatment must be 0 or 1; offending rows {bad.tolist()}"
            )
        if not np.all(np.isfinite(x)):
            bad_rows = np.flatnonzero(~np.isfinite(x).all(axis=1))[:5]
            raise InputError(
                f"non-finite covariate values in rows {bad_rows.tolist()}"
            )

        # Dense ids in order of first appearance.
        label_to_id: dict = {}
        idx = np.empty(n, dtype=np.int64)
        labels_in_order: list = []
        for i, lab in enumerate(cluster_labels):
            j = label_to_id.get(lab)
            if j is None:
                j = len(labels_in_order)
                label_to_id[lab] = j
                labels_in_order.append(lab)
            idx[i] = j
        c = len(labels_in_order)

        self._y = y
        self._y.setflags(write=False)
        self._w = w_float.astype(np.int8)
        self._w.setflags(write=False)
        self._x = x
        self._x.setflags(write=False)
        self._cluster_index = idx
        self._cluster_index.setflags(write=False)
        self._labels = labels_in_order
        self._c = c
        self._n_c = np.bincount(idx, minlength=c)
        self._n_c.setflags(write=False)
        self._units_cache: Optional[list] = None
        self._rows_cache: Optional[list] = None

    # ----- sizes ---------------------------------------------------------

    @property
    def n(self) -> int:
        """Number of units."""
        return self._y.shape[0]

    @property
    def c(self) -> int:
        """Number of clusters."""
        return self._c

    @property
    def k(self) -> int:
        """Number of covariates."""
        return self._x.shape[1]

    @property
    def n_c(self) -> np.ndarray:
        """Per-cluster sizes, indexed by dense cluster id."""
        return self._n_c

    # ----- columns -------------------------------------------------------

    @property
    def y(self) -> np.ndarray:
        return self._y

    @property
    def w(self) -> np.ndarray:
        return self._w

    @property
    def x(self) -> np.ndarray:
        return self._x

    @property
    def cluster_index(self) -> np.ndarray:
        """Dense cluster id per unit (first-appearance order)."""
        return self._cluster_index

    @property
    def cluster_labels(self) -> list:
        """Original labels, indexed by dense cluster id."""
        return list(self._labels)

    # ----- record / cluster views ---------------------------------------

    @property
    def units(self) -> list:
        """Ordered list of :class:`UnitRecord` (built on first access)."""
        if self._units_cache is None:
            self._units_cache = [
                UnitRecord(
                    y=float(self._y[i]),
                    w=int(self._w[i]),
                    x=tuple(self._x[i]),
                    cluster_id=self._labels[self._cluster_index[i]],
                )
                for i in range(self.n)
            ]
        return self._units_cache

    @property
    def clusters(self) -> list:
        """Row indices per cluster, indexed by dense cluster id."""
        if self._rows_cache is None:
            order = np.argsort(self._cluster_index, kind="stable")
            bounds = np.cumsum(self._n_c)[:-1]
            self._rows_cache = [
                np.sort(part) for part in np.split(order, bounds)
            ]
        return self._rows_cache

    def cluster_means(self, values: np.ndarray) -> np.ndarray:
        """Mean of ``values`` within each cluster (dense id order).

        ``values`` may be a vector of length n or an (n, m) matrix;
        the result has one row per cluster.
        """
        values = np.asarray(values, dtype=float)
        if values.shape[0] != self.n:
            raise InputError("values length does not match dataset")
        if values.ndim == 1:
            sums = np.bincount(
                self._cluster_index, weights=values, minlength=self._c
            )
            return sums / self._n_c
        out = np.empty((self._c, values.shape[1]))
        for j in range(values.shape[1]):
            out[:, j] = np.bincount(
                self._cluster_index, weights=values[:, j], minlength=self._c
            )
        return out / self._n_c[:, None]

    def subset(self, rows: np.ndarray) -> "Dataset":
        """New dataset from a row selection, preserving labels and order."""
        rows = np.asarray(rows)
        labels = [self._labels[j] for j in self._cluster_index[rows]]
        return Dataset(self._y[rows], self._w[rows], self._x[rows], labels)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Dataset(n={self.n}, c={self.c}, k={self.k})"


@dataclass
class ValidationReport:
    """Outcome of :func:`validate`: hard errors, advisories, and the
    dense ids of clusters with no treatment variation."""

    errors: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    degenerate_clusters: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def _parse_float(text: str, row: int, column: str) -> float:
    try:
        return float(text)
    except (TypeError, ValueError):
        raise InputError(
            f"row {row}: column {column!r} value {text!r} is not numeric"
        ) from None


def load_csv(path, schema: Optional[CsvSchema] = None) -> Dataset:
    """Read a clustered cross-section from a CSV file.

    Raises :class:`InputError` on a missing column, a non-numeric cell,
    a treatment value other than 0/1, or a missing covariate value.
    NaN outcomes load successfully and are reported by :func:`validate`.
    """
    schema = schema or CsvSchema()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise InputError(f"{path}: empty file")
        header = list(reader.fieldnames)
        for col in (schema.outcome, schema.treatment, schema.cluster):
            if col not in header:
                raise InputError(f"{path}: missing column {col!r}")
        if schema.covariates is None:
            claimed = {schema.outcome, schema.treatment, schema.cluster}
            covariates = [h for h in header if h not in claimed]
        else:
            covariates = list(schema.covariates)
            for col in covariates:
                if col not in header:
                    raise InputError(f"{path}: missing column {col!r}")

        ys, ws, labels = [], [], []
        xs = []
        for row_num, row in enumerate(reader, start=2):
            ys.append(_parse_float(row[schema.outcome], row_num, schema.outcome))
            w_val = _parse_float(row[schema.treatment], row_num, schema.treatment)
            if w_val not in (0.0, 1.0):
                raise InputError(
                    f"row {row_num}: treatment must be 0 or 1, got {w_val}"
                )
            ws.append(int(w_val))
            lab = row[schema.cluster]
            if lab is None or lab == "":
                raise InputError(f"row {row_num}: empty cluster label")
            labels.append(lab)
            x_row = []
            for col in covariates:
                cell = row.get(col)
                if cell is None or cell == "":
                    raise InputError(
                        f"row {row_num}: missing covariate {col!r}"
                    )
                val = _parse_float(cell, row_num, col)
                if math.isnan(val) or math.isinf(val):
                    raise InputError(
                        f"row {row_num}: covariate {col!r} is not finite"
                    )
                x_row.append(val)
            xs.append(x_row)
    if not ys:
        raise InputError(f"{path}: no data rows")
    x = np.asarray(xs, dtype=float)
    if x.size == 0:
        x = np.empty((len(ys), 0))
    return Dataset(np.asarray(ys), np.asarray(ws), x, labels)


def write_csv(d: Dataset, path, schema: Optional[CsvSchema] = None) -> None:
    """Write a dataset so that :func:`load_csv` reproduces it exactly."""
    schema = schema or CsvSchema()
    if schema.covariates is None:
        covariates = [f"x{j + 1}" for j in range(d.k)]
    else:
        covariates = list(schema.covariates)
        if len(covariates) != d.k:
            raise InputError(
                f"schema names {len(covariates)} covariates, dataset has {d.k}"
            )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [schema.outcome, schema.treatment, schema.cluster] + covariates
        )
        labels = d.cluster_labels
        for i in range(d.n):
            writer.writerow(
                [repr(float(d.y[i])), int(d.w[i]), labels[d.cluster_index[i]]]
                + [repr(float(v)) for v in d.x[i]]
            )


def validate(d: Dataset) -> ValidationReport:
    """Check a dataset for problems that block or degrade estimation.

    Errors: NaN outcomes. Warnings: clusters with a single unit, and
    clusters whose units all share one treatment arm (these are also
    listed in ``degenerate_clusters``). Degenerate clusters stay in the
    dataset; downstream estimators decide how to treat them.
    """
    report = ValidationReport()
    nan_rows = np.flatnonzero(np.isnan(d.y))
    if nan_rows.size:
        report.errors.append(
            f"{nan_rows.size} NaN outcome(s), first at row {int(nan_rows[0])}"
        )
    treated_per_cluster = np.bincount(
        d.cluster_index, weights=d.w.astype(float), minlength=d.c
    )
    for cid in range(d.c):
        size = int(d.n_c[cid])
        t = treated_per_cluster[cid]
        label = d.cluster_labels[cid]
        if size == 1:
            report.warnings.append(
                f"cluster {label!r} has a single unit"
            )
        if t == 0 or t == size:
            report.degenerate_clusters.append(cid)
            arm = "treated" if t == size else "control"
            report.warnings.append(
                f"cluster {label!r} is all-{arm} ({size} units)"
            )
    return report


def group_by_size(d: Dataset) -> list:
    """Partition into maximal same-size sub-datasets.

    Returns ``(size, sub_dataset)`` pairs in increasing size order. Each
    sub-dataset keeps its units in original row order, so concatenating
    the pieces reconstitutes ``d`` up to row permutation.
    """
    sizes = sorted(set(int(s) for s in d.n_c))
    out = []
    size_of_unit = d.n_c[d.cluster_index]
    for size in sizes:
        rows = np.flatnonzero(size_of_unit == size)
        out.append((size, d.subset(rows)))
    return out
