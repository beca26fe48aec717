"""Sigmoid calibration of the power parameter.

The power parameter is a decreasing sigmoid of the distance S = |p_CM - 1/2|:

    alpha(S) = 1 / (1 + exp(a + b log S)),   b > 0.

(a, b) are fixed without looking at any data: two anchor distances g1 < g2 are
mapped to alpha_c (close to 1) and alpha_ic (close to 0).  The anchors depend
only on the current sample size n, a confidence parameter tau and the binomial
interval method, which is what makes the curve a pure function of the config.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy import special

from .errors import CalibrationInfeasibleError, ValidationError
from .stats_core import CI_METHODS, binom_abs_dev_expectation, binom_ci

MODES = ("k_adjusted", "unadjusted", "unadjusted_literal")


@dataclass(frozen=True)
class CalibrationConfig:
    """Inputs of the calibration.

    ``mode``:
      * ``k_adjusted`` (default): g1 = k1, g2 = 1/2 - k2.
      * ``unadjusted``: g1 = E|W/n - 1/2| for W ~ Bin(n, 1/2), g2 = 1/2.
      * ``unadjusted_literal``: g1 = |E(W/n) - 1/2| = 0, which cannot be used
        on a log scale; kept so the degenerate reading fails loudly.

    ``k1_zero`` replaces k1 by 0 (the most conservative full-borrow zone),
    floored at half a count's resolution 1/(2 n tau) so that log g1 exists.
    """

    n_current: int
    alpha_c: float = 0.99
    alpha_ic: float = 0.01
    tau: float = 2.0
    ci_method: str = "clopper_pearson"
    ci_level: float = 0.95
    mode: str = "k_adjusted"
    k1_zero: bool = False

    def __post_init__(self):
        if int(self.n_current) != self.n_current or self.n_current < 1:
            raise ValidationError(f"n_current must be a positive integer, got {self.n_current}")
        object.__setattr__(self, "n_current", int(self.n_current))
        for name in ("alpha_c", "alpha_ic"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValidationError(f"{name} must lie in (0, 1), got {v}")
        if not (math.isfinite(self.tau) and self.tau >= 1):
            raise ValidationError(f"tau must be >= 1, got {self.tau}")
        if self.ci_method not in CI_METHODS:
            raise ValidationError(f"ci_method must be one of {CI_METHODS}, got {self.ci_method!r}")
        if not 0 < self.ci_level < 1:
            raise ValidationError(f"ci_level must lie in (0, 1), got {self.ci_level}")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CalibrationCurve:
    a: float
    b: float
    g1: float
    g2: float
    k1: float
    k2: float
    config: CalibrationConfig

    @property
    def midpoint(self) -> float:
        """Distance at which alpha = 1/2."""
        return math.exp(-self.a / self.b)

    def __call__(self, s, cap: Optional[float] = None):
        return power_from_s(self, s, cap)

    def as_dict(self) -> dict:
        return {
            "a": self.a,
            "b": self.b,
            "g1": self.g1,
            "g2": self.g2,
            "k1": self.k1,
            "k2": self.k2,
            "midpoint": self.midpoint,
            "config": self.config.as_dict(),
        }


def compute_k_factors(config: CalibrationConfig) -> tuple[float, float]:
    """k1 from the interval at the expected count for p = 1/2, k2 from the one at w = n.

    k = max(|L - 1/2|, |U - 1/2|) / tau.  For the Wald interval at w = n the
    interval has zero width at 1, so k2 = 1/(2 tau).
    """
    n = config.n_current
    if n < 2:
        raise ValidationError(f"k-factors need n_current >= 2, got {n}")
    w_half = int(math.floor(n / 2 + 0.5))
    ci1 = binom_ci(n, w_half, config.ci_level, config.ci_method)
    ci2 = binom_ci(n, n, config.ci_level, config.ci_method)
    k1 = max(abs(ci1.lower - 0.5), abs(ci1.upper - 0.5)) / config.tau
    k2 = max(abs(ci2.lower - 0.5), abs(ci2.upper - 0.5)) / config.tau
    return float(k1), float(k2)


def sigmoid_params(alpha_c: float, alpha_ic: float, g1: float, g2: float) -> tuple[float, float]:
    """Closed-form (a, b) with alpha(g1) = alpha_c and alpha(g2) = alpha_ic."""
    if not (g1 > 0 and g2 > 0):
        raise CalibrationInfeasibleError(
            f"anchor distances must be positive (g1={g1:.4g}, g2={g2:.4g}); "
            "a zero anchor has no logarithm, use mode='k_adjusted'"
        )
    if g1 >= g2:
        raise CalibrationInfeasibleError(
            f"full-borrow anchor g1={g1:.4g} is not below full-discard anchor g2={g2:.4g}; "
            "increase tau or n_current"
        )
    if alpha_c <= alpha_ic:
        raise CalibrationInfeasibleError(
            f"alpha_c={alpha_c} must exceed alpha_ic={alpha_ic} for a decreasing curve"
        )
    logit_c = math.log((1 - alpha_c) / alpha_c)
    logit_ic = math.log((1 - alpha_ic) / alpha_ic)
    b = (logit_c - logit_ic) / (math.log(g1) - math.log(g2))
    a = logit_c - b * math.log(g1)
    return a, b


def solve_sigmoid(config: CalibrationConfig) -> CalibrationCurve:
    n = config.n_current
    if config.mode == "k_adjusted":
        k1, k2 = compute_k_factors(config)
        if config.k1_zero:
            k1 = 0.0
        g1 = max(k1, 1.0 / (2 * n * config.tau))
        g2 = 0.5 - k2
    elif config.mode == "unadjusted":
        k1 = k2 = 0.0
        g1 = binom_abs_dev_expectation(n, 0.5)
        g2 = 0.5
    else:
        k1 = k2 = 0.0
        g1, g2 = 0.0, 0.5
    a, b = sigmoid_params(config.alpha_c, config.alpha_ic, g1, g2)
    return CalibrationCurve(a, b, g1, g2, k1, k2, config)


def power_from_s(curve: CalibrationCurve, s, cap: Optional[float] = None):
    """alpha = 1/(1 + exp(a + b log s)), alpha(0) = 1, optionally capped at ``cap``.

    Scalars give a float, arrays give an array of the same shape.
    """
    s_arr = np.asarray(s, dtype=float)
    if np.any(~np.isfinite(s_arr)) or np.any(s_arr < 0):
        raise ValidationError("distance s must be finite and non-negative")
    if cap is not None and not 0 < cap <= 1:
        raise ValidationError(f"cap must lie in (0, 1], got {cap}")
    with np.errstate(divide="ignore"):
        logs = np.log(s_arr)
    # expit(-inf) = 0 for s = 0 gives alpha = 1
    alpha = special.expit(-(curve.a + curve.b * logs))
    alpha = np.where(s_arr == 0, 1.0, alpha)
    if cap is not None:
        alpha = np.minimum(alpha, cap)
    return float(alpha) if alpha.ndim == 0 else alpha


def unequal_size_cap(n: int, m: int) -> float:
    """Upper bound n/m on the power (never above 1)."""
    if n < 1 or m < 1:
        raise ValidationError("sample sizes must be positive")
    return min(1.0, n / m)


class CurveTable(NamedTuple):
    s: np.ndarray
    alpha: np.ndarray
    metadata: dict


def emit_curve(curve: CalibrationCurve, grid_points: int = 101, s_min: float = 1e-6) -> CurveTable:
    """alpha on an evenly spaced grid from ``s_min`` (standing in for 0) to 1/2.

    The metadata records the abscissas where the curve crosses alpha_c (g1),
    alpha_ic (g2) and 1/2.
    """
    if int(grid_points) != grid_points or grid_points < 2:
        raise ValidationError(f"grid_points must be an integer >= 2, got {grid_points}")
    s = np.linspace(s_min, 0.5, int(grid_points))
    meta = {
        "a": curve.a,
        "b": curve.b,
        "s_at_alpha_c": curve.g1,
        "s_at_alpha_ic": curve.g2,
        "s_at_half": curve.midpoint,
        "mode": curve.config.mode,
        "n_current": curve.config.n_current,
    }
    return CurveTable(s, power_from_s(curve, s), meta)
