"""Power-prior posterior inference.

Historical observations enter the likelihood with weights alpha (global) or
alpha_i (pointwise); current observations have weight 1.  Normal and linear
regression posteriors are drawn directly from their conjugate forms, Poisson
regression uses random-walk Metropolis.

Rows with zero weight are dropped before any arithmetic, so alpha = 0 gives
bit-for-bit the same fit (and the same random draws) as the current data alone.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import samplers
from .calibration import CalibrationCurve, power_from_s
from .congruence import pcm_closed_regression
from .data import Dataset
from .errors import FewDrawsWarning, ValidationError
from .samplers import DEFAULT_BURN_IN, DEFAULT_ITERS
from .stats_core import RngStream, norm_ppf

_Z975 = float(norm_ppf(0.975))


@dataclass(frozen=True, eq=False)
class PowerAssignment:
    """A global power ``alpha`` or one power per historical observation."""

    kind: str
    values: np.ndarray

    def __post_init__(self):
        if self.kind not in ("global", "pointwise"):
            raise ValidationError(f"power kind must be 'global' or 'pointwise', got {self.kind!r}")
        v = np.atleast_1d(np.asarray(self.values, dtype=float))
        if self.kind == "global" and v.size != 1:
            raise ValidationError("a global power assignment holds exactly one value")
        if np.any(~np.isfinite(v)) or np.any(v < 0) or np.any(v > 1):
            raise ValidationError("power parameters must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @classmethod
    def global_(cls, alpha: float) -> "PowerAssignment":
        return cls("global", np.array([alpha]))

    @classmethod
    def pointwise(cls, alphas) -> "PowerAssignment":
        return cls("pointwise", np.asarray(alphas, dtype=float))

    @property
    def alpha(self) -> float:
        """The global value, or the mean of the pointwise values."""
        return float(self.values.mean())

    def weights(self, m: int) -> np.ndarray:
        if self.kind == "global":
            return np.full(m, self.values[0])
        if self.values.size != m:
            raise ValidationError(
                f"pointwise assignment has {self.values.size} values for {m} historical rows"
            )
        return self.values.copy()

    def as_dict(self) -> dict:
        if self.kind == "global":
            return {"kind": "global", "alpha": float(self.values[0])}
        v = self.values
        return {
            "kind": "pointwise",
            "alphas": [float(a) for a in v],
            "min": float(v.min()),
            "median": float(np.median(v)),
            "max": float(v.max()),
            "mean": float(v.mean()),
        }


@dataclass
class PosteriorDraws:
    parameter_names: list
    draws: np.ndarray
    burn_in: int
    acceptance_rate: Optional[float] = None
    seed: Optional[dict] = None

    def __post_init__(self):
        self.draws = np.asarray(self.draws, dtype=float)
        if self.draws.ndim != 2 or self.draws.shape[1] != len(self.parameter_names):
            raise ValidationError(
                f"draws of shape {self.draws.shape} do not match {len(self.parameter_names)} parameters"
            )

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.parameter_names.index(name)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(self.parameter_names)
            for row in self.draws:
                wr.writerow([repr(float(v)) for v in row])


@dataclass
class PosteriorSummary:
    names: list
    mean: np.ndarray
    sd: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def interval_length(self) -> np.ndarray:
        return self.upper - self.lower

    def row(self, name: str) -> dict:
        i = self.names.index(name)
        return {
            "mean": float(self.mean[i]),
            "sd": float(self.sd[i]),
            "ci95_lower": float(self.lower[i]),
            "ci95_upper": float(self.upper[i]),
            "interval_length": float(self.upper[i] - self.lower[i]),
        }

    def rounded(self, digits: int = 2) -> dict:
        return {k: {f: round(v, digits) for f, v in self.row(k).items()} for k in self.names}

    def as_dict(self) -> dict:
        return {
            "parameters": {k: self.row(k) for k in self.names},
            "diagnostics": dict(self.diagnostics),
        }


def summarize(draws: PosteriorDraws) -> PosteriorSummary:
    """Mean, SD (ddof=1) and equal-tailed 95% intervals.

    Quantiles use numpy's default linear interpolation between order
    statistics, so draws {1, 2, 3} give the interval (1.05, 2.95).
    """
    d = draws.draws
    if d.shape[0] == 0:
        raise ValidationError("cannot summarize an empty set of draws")
    if d.shape[0] < 100:
        warnings.warn(f"only {d.shape[0]} retained draws; summaries are unstable", FewDrawsWarning)
    sd = d.std(axis=0, ddof=1) if d.shape[0] > 1 else np.zeros(d.shape[1])
    lo, hi = np.quantile(d, [0.025, 0.975], axis=0)
    diag = {"retained_draws": int(d.shape[0]), "burn_in": draws.burn_in}
    if draws.acceptance_rate is not None:
        diag["acceptance_rate"] = draws.acceptance_rate
    if draws.seed is not None:
        diag["rng"] = draws.seed
    return PosteriorSummary(list(draws.parameter_names), d.mean(axis=0), sd, lo, hi, diag)


def _check_iters(iters, burn_in):
    if burn_in < 0 or iters <= burn_in:
        raise ValidationError(f"need iters > burn_in >= 0, got iters={iters}, burn_in={burn_in}")
    return iters - burn_in


def _stack(hist: Dataset, curr: Dataset, power: PowerAssignment, with_design: bool):
    """Current rows followed by positively weighted historical rows, with their weights."""
    w_h = power.weights(hist.size)
    keep = w_h > 0
    y = np.concatenate([curr.y, hist.y[keep]])
    w = np.concatenate([np.ones(curr.size), w_h[keep]])
    if not with_design:
        return None, y, w
    if hist.X is None or curr.X is None:
        raise ValidationError("regression fits need design matrices on both datasets")
    if hist.X.shape[1] != curr.X.shape[1]:
        raise ValidationError(
            f"design matrices have {hist.X.shape[1]} and {curr.X.shape[1]} columns"
        )
    return np.vstack([curr.X, hist.X[keep]]), y, w


def _require_global(power: PowerAssignment):
    if power.kind != "global":
        raise ValidationError("this endpoint supports only a global power parameter")


def _no_covariates(hist, curr):
    if hist.has_covariates or curr.has_covariates:
        raise ValidationError("normal mean models take datasets without covariates")


def fit_normal_known_var(hist: Dataset, curr: Dataset, sigma2_h: float, sigma2_c: float, power: PowerAssignment) -> PosteriorSummary:
    """Exact posterior of mu under a flat initial prior (no sampling)."""
    _require_global(power)
    _no_covariates(hist, curr)
    if not (sigma2_h > 0 and sigma2_c > 0):
        raise ValidationError("known variances must be strictly positive")
    alpha = power.alpha
    prec_c = curr.size / sigma2_c
    prec_h = alpha * hist.size / sigma2_h
    prec = prec_c + prec_h
    if prec_h == 0:
        mean = float(curr.y.mean())
    else:
        mean = (prec_c * curr.y.mean() + prec_h * hist.y.mean()) / prec
    sd = 1.0 / math.sqrt(prec)
    return PosteriorSummary(
        ["mu"],
        np.array([mean]),
        np.array([sd]),
        np.array([mean - _Z975 * sd]),
        np.array([mean + _Z975 * sd]),
        {"analytic": True},
    )


def fit_normal_unknown_var(
    hist: Dataset,
    curr: Dataset,
    power: PowerAssignment,
    iters: int = DEFAULT_ITERS,
    burn_in: int = DEFAULT_BURN_IN,
    rng: Optional[RngStream] = None,
):
    """Direct normal-inverse-gamma draws under the 1/sigma^2 initial prior."""
    _require_global(power)
    _no_covariates(hist, curr)
    keep = _check_iters(iters, burn_in)
    rng = rng or RngStream(0)
    _, y, w = _stack(hist, curr, power, with_design=False)
    mu, s2 = samplers.draw_normal_unknown_var(rng.generator(), y, w, keep)
    draws = PosteriorDraws(["mu", "sigma2"], np.column_stack([mu, s2]), burn_in, seed=rng.as_dict())
    return draws, summarize(draws)


def _beta_names(p: int) -> list:
    return [f"beta{j}" for j in range(p)]


def fit_linear_regression(
    hist: Dataset,
    curr: Dataset,
    power: PowerAssignment,
    iters: int = DEFAULT_ITERS,
    burn_in: int = DEFAULT_BURN_IN,
    rng: Optional[RngStream] = None,
    sigma_prior_power: Optional[float] = None,
):
    """Weighted conjugate regression; the prior on sigma^2 is (sigma^2)^-(p+2)/2 by default."""
    keep = _check_iters(iters, burn_in)
    rng = rng or RngStream(0)
    X, y, w = _stack(hist, curr, power, with_design=True)
    post = samplers.regression_posterior(X, y, w, sigma_prior_power)
    beta, s2 = post.draw(rng.generator(), keep)
    names = _beta_names(X.shape[1]) + ["sigma2"]
    draws = PosteriorDraws(names, np.column_stack([beta, s2]), burn_in, seed=rng.as_dict())
    return draws, summarize(draws)


def fit_poisson_regression_mh(
    hist: Dataset,
    curr: Dataset,
    power: PowerAssignment,
    iters: int = DEFAULT_ITERS,
    burn_in: int = DEFAULT_BURN_IN,
    proposal_scale: Optional[float] = None,
    rng: Optional[RngStream] = None,
):
    """Random-walk Metropolis for log-linear Poisson regression with a flat prior.

    The proposal is shaped by the Cholesky factor of the inverse Fisher
    information at the weighted mode; its global scale is adapted toward 30%
    acceptance during burn-in and frozen afterwards.
    """
    _require_global(power)
    _check_iters(iters, burn_in)
    rng = rng or RngStream(0)
    X, y, w = _stack(hist, curr, power, with_design=True)
    res = samplers.poisson_mh(X, y, w, iters, burn_in, rng.generator(), proposal_scale)
    draws = PosteriorDraws(
        _beta_names(X.shape[1]), res.draws, burn_in, acceptance_rate=res.acceptance_rate, seed=rng.as_dict()
    )
    summary = summarize(draws)
    summary.diagnostics["proposal_scale"] = res.scale
    return draws, summary


def assign_pointwise_powers(
    hist: Dataset,
    curr: Dataset,
    curve: CalibrationCurve,
    statistic: str = "lik",
    cap: Optional[float] = None,
) -> PowerAssignment:
    """One power per historical row from its own p_CM scored against the current fit."""
    est = pcm_closed_regression(hist, curr, target="score_hist_given_current", statistic=statistic)
    return PowerAssignment.pointwise(power_from_s(curve, est.distance_s, cap))

