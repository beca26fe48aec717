"""CSV reading and writing for datasets, curves and tables.

Files are UTF-8 with a header row and ``.`` as the decimal separator.  Floats
are written with ``repr`` so a write/read round trip is exact.
"""
from __future__ import annotations

import csv
import json
import math
from typing import Iterable, Optional, Sequence

import numpy as np

from .data import Dataset
from .errors import DataFileError, ValidationError


def _open_text(path, mode):
    try:
        return open(path, mode, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise DataFileError(f"{path}: file not found") from None
    except OSError as exc:
        raise DataFileError(f"{path}: {exc.strerror or exc}") from None


def ingest_csv(
    path,
    response: str = "y",
    covariates: Optional[Sequence[str]] = None,
    label: str = "current",
) -> Dataset:
    """Read one arm from a CSV file.

    When covariates are named, the design matrix is the intercept column
    followed by those columns in the given order.  Rows are kept in file order.
    Errors name the data row (1-based, header excluded) and the column.
    """
    covariates = list(covariates or [])
    with _open_text(path, "r") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file (no header row)") from None
        except csv.Error as exc:
            raise ValidationError(f"{path}: unreadable header ({exc})") from None
        header = [h.strip() for h in header]
        if header and header[0].startswith("﻿"):
            header[0] = header[0][1:]
        cols = [response] + covariates
        idx = []
        for c in cols:
            if c not in header:
                raise ValidationError(f"{path}: missing column {c!r} (header has {header})")
            idx.append(header.index(c))
        values = []
        try:
            for rownum, row in enumerate(reader, start=1):
                if not row or all(not cell.strip() for cell in row):
                    continue
                rec = []
                for c, j in zip(cols, idx):
                    cell = row[j].strip() if j < len(row) else ""
                    if cell == "":
                        raise ValidationError(f"{path}: row {rownum}, column {c!r}: blank cell")
                    try:
                        v = float(cell)
                    except ValueError:
                        raise ValidationError(
                            f"{path}: row {rownum}, column {c!r}: non-numeric value {cell!r}"
                        ) from None
                    if not math.isfinite(v):
                        raise ValidationError(f"{path}: row {rownum}, column {c!r}: non-finite value {cell!r}")
                    rec.append(v)
                values.append(rec)
        except csv.Error as exc:
            raise ValidationError(f"{path}: malformed CSV near row {reader.line_num - 1} ({exc})") from None
    if not values:
        raise ValidationError(f"{path}: no data rows")
    arr = np.array(values, dtype=float)
    X = None
    if covariates:
        X = np.column_stack([np.ones(arr.shape[0]), arr[:, 1:]])
    return Dataset(arr[:, 0], X, label)


def write_dataset_csv(ds: Dataset, path, response: str = "y", covariates: Optional[Sequence[str]] = None) -> None:
    """Inverse of :func:`ingest_csv`; the intercept column is not written."""
    cov_cols = None
    if ds.X is not None:
        if not np.all(ds.X[:, 0] == 1.0):
            raise ValidationError("design matrix must start with an intercept column to be written")
        cov_cols = ds.X[:, 1:]
        covariates = list(covariates or [f"x{j}" for j in range(1, ds.X.shape[1])])
        if len(covariates) != cov_cols.shape[1]:
            raise ValidationError(f"{len(covariates)} covariate names for {cov_cols.shape[1]} columns")
    with _open_text(path, "w") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow([response] + (covariates or []))
        for i, y in enumerate(ds.y):
            extra = [] if cov_cols is None else [repr(float(v)) for v in cov_cols[i]]
            wr.writerow([repr(float(y))] + extra)


def write_table(path, columns: Sequence[str], rows: Iterable[Sequence], fh=None) -> None:
    """Write rows under ``columns``; floats are written with ``repr``."""

    def fmt(v):
        return repr(float(v)) if isinstance(v, (float, np.floating)) else v

    def emit(handle):
        wr = csv.writer(handle, lineterminator="\n")
        wr.writerow(columns)
        for r in rows:
            wr.writerow([fmt(v) for v in r])

    if fh is not None:
        emit(fh)
        return
    with _open_text(path, "w") as handle:
        emit(handle)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"{type(o).__name__} is not JSON serializable")


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def write_json(path, obj) -> None:
    with _open_text(path, "w") as fh:
        fh.write(dumps_json(obj))
