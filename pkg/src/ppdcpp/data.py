"""Dataset and endpoint model types."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateInputError, RankDeficiencyError, ValidationError

ENDPOINT_KINDS = ("normal_known_var", "normal_unknown_var", "linear_regression", "poisson_regression")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Responses ``y`` with an optional design matrix ``X`` (intercept column first)."""

    y: np.ndarray
    X: Optional[np.ndarray] = None
    label: str = "current"

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        if y.size < 1:
            raise ValidationError(f"{self.label} dataset has no observations")
        if np.any(np.isnan(y)):
            raise ValidationError(f"{self.label} responses contain NaN")
        object.__setattr__(self, "y", y)
        if self.X is not None:
            X = np.asarray(self.X, dtype=float)
            if X.ndim == 1:
                X = X[:, None]
            if X.ndim != 2 or X.shape[0] != y.size:
                raise ValidationError(
                    f"{self.label} design has shape {X.shape}, expected ({y.size}, p)"
                )
            if not np.all(np.isfinite(X)):
                raise ValidationError(f"{self.label} design matrix contains non-finite values")
            object.__setattr__(self, "X", X)
        if self.label not in ("historical", "current"):
            raise ValidationError(f"label must be 'historical' or 'current', got {self.label!r}")

    @property
    def size(self) -> int:
        return self.y.size

    @property
    def has_covariates(self) -> bool:
        return self.X is not None

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        if self.label != other.label or not np.array_equal(self.y, other.y):
            return False
        if (self.X is None) != (other.X is None):
            return False
        return self.X is None or np.array_equal(self.X, other.X)

    __hash__ = None


@dataclass(frozen=True)
class EndpointModel:
    """Outcome family.  Known variances are only used by ``normal_known_var``."""

    kind: str
    sigma2_h: Optional[float] = None
    sigma2_c: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ENDPOINT_KINDS:
            raise ValidationError(f"unknown endpoint kind {self.kind!r}; expected one of {ENDPOINT_KINDS}")
        if self.kind == "normal_known_var":
            if self.sigma2_h is None or self.sigma2_c is None:
                raise ValidationError("normal_known_var needs sigma2_h and sigma2_c")
            if not (self.sigma2_h > 0 and self.sigma2_c > 0):
                raise ValidationError("known variances must be strictly positive")

    @property
    def is_normal(self) -> bool:
        return self.kind in ("normal_known_var", "normal_unknown_var")


def sample_variance(ds: Dataset) -> float:
    if ds.size < 2:
        raise DegenerateInputError(f"{ds.label} data needs at least 2 observations for a variance")
    v = float(np.var(ds.y, ddof=1))
    if not v > 0:
        raise DegenerateInputError(
            f"{ds.label} responses are constant; the variance plug-in is zero. "
            "Use a known-variance model or check the input column."
        )
    return v


@dataclass(frozen=True)
class OlsFit:
    beta: np.ndarray
    sigma2: float
    xtx_inv: np.ndarray
    df: int


def ols(ds: Dataset) -> OlsFit:
    """OLS coefficients, SSE/(rows - p) and (X'X)^-1 for a regression dataset."""
    if ds.X is None:
        raise ValidationError(f"{ds.label} dataset has no design matrix")
    X, y = ds.X, ds.y
    m, p = X.shape
    if m <= p:
        raise RankDeficiencyError(f"{ds.label} design has {m} rows for {p} columns; need rows > columns")
    if np.linalg.matrix_rank(X) < p:
        raise RankDeficiencyError(f"{ds.label} design matrix is not of full column rank")
    xtx_inv = np.linalg.inv(X.T @ X)
    beta = xtx_inv @ (X.T @ y)
    resid = y - X @ beta
    sigma2 = float(resid @ resid) / (m - p)
    if not sigma2 > 0:
        raise DegenerateInputError(f"{ds.label} regression has zero residual variance")
    return OlsFit(beta, sigma2, xtx_inv, m - p)
