"""Congruence measure p_CM between a historical and a current dataset.

p_CM is the probability that a posterior-predictive replicate, given the
historical data only, scores at least as high as a current observation under a
test statistic:

* ``lik`` -- the statistic is the predictive likelihood of the value,
* ``obs`` -- the statistic is the value itself.

Closed forms are available for normal endpoints (with and without covariates);
the Monte Carlo estimator works for any endpoint with a historical posterior
sampler.  Values near 1/2 indicate congruence; ``distance_s = |p_CM - 1/2|``
is what the calibration curve consumes.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy import special, stats

from . import samplers
from .data import Dataset, EndpointModel, ols, sample_variance
from .errors import FewDrawsWarning, RankDeficiencyError, ValidationError
from .stats_core import RngStream, orthant_double_array

STATISTICS = ("lik", "obs")
TARGETS = ("score_current_given_hist", "score_hist_given_current")
DEFAULT_R = 5000
MIN_R = 100


@dataclass(frozen=True, eq=False)
class CongruenceEstimate:
    p_cm: Union[float, np.ndarray]
    statistic: str
    estimator: str
    pointwise: bool = False
    mc_draws: Optional[int] = None
    aggregate: Optional[float] = None
    distance_s: Union[float, np.ndarray] = field(init=False)

    def __post_init__(self):
        p = self.p_cm
        if isinstance(p, np.ndarray):
            p = np.clip(p, 0.0, 1.0)
            s = np.abs(p - 0.5)
        else:
            p = min(max(float(p), 0.0), 1.0)
            s = abs(p - 0.5)
        object.__setattr__(self, "p_cm", p)
        object.__setattr__(self, "distance_s", s)

    @property
    def global_p(self) -> float:
        """Scalar p_CM: the value itself, or the mean of a pointwise vector."""
        if self.pointwise:
            if self.aggregate is None:
                raise ValidationError("historical-scored pointwise values are not aggregated")
            return self.aggregate
        return float(self.p_cm)

    @property
    def global_s(self) -> float:
        return abs(self.global_p - 0.5)

    @property
    def mc_standard_error(self) -> Optional[float]:
        """Binomial standard error of a Monte Carlo estimate over n*R indicators."""
        if self.mc_draws is None:
            return None
        return math.sqrt(self.global_p * (1 - self.global_p) / self.mc_draws)

    def as_dict(self) -> dict:
        out = {
            "statistic": self.statistic,
            "estimator": self.estimator,
            "pointwise": self.pointwise,
            "mc_draws": self.mc_draws,
        }
        if self.pointwise:
            out["p_cm_pointwise"] = [float(v) for v in np.atleast_1d(self.p_cm)]
            out["s_pointwise"] = [float(v) for v in np.atleast_1d(self.distance_s)]
            if self.aggregate is not None:
                out["p_cm"] = float(self.aggregate)
                out["s"] = abs(float(self.aggregate) - 0.5)
        else:
            out["p_cm"] = float(self.p_cm)
            out["s"] = float(self.distance_s)
        return out


def _check_statistic(statistic):
    if statistic not in STATISTICS:
        raise ValidationError(f"statistic must be one of {STATISTICS}, got {statistic!r}")


def _normal_plugins(hist: Dataset, curr: Dataset, model: EndpointModel):
    """(mean difference ybar_c - ybar_h, predictive variance of y_rep, current variance)."""
    if hist.has_covariates or curr.has_covariates:
        raise ValidationError("normal closed forms take datasets without covariates")
    m = hist.size
    delta = float(curr.y.mean() - hist.y.mean())
    if model.kind == "normal_known_var":
        return delta, (m + 1) / m * model.sigma2_h, model.sigma2_c
    if model.kind == "normal_unknown_var":
        # asymptotic form: sample variances plugged in for both arms
        return delta, sample_variance(hist), sample_variance(curr)
    raise ValidationError(f"closed-form normal p_CM does not apply to {model.kind!r}")


def pcm_closed_normal(hist: Dataset, curr: Dataset, model: EndpointModel, flip: bool = False) -> CongruenceEstimate:
    """Likelihood-statistic p_CM for normal data as a double orthant probability.

    U = y_c + y_rep - 2*ybar_h and V = y_c - y_rep share mean ybar_c - ybar_h,
    variance s2_c + s2_rep and covariance s2_c - s2_rep.
    """
    delta, v_rep, v_c = _normal_plugins(hist, curr, model)
    p = orthant_double_array(delta, v_c + v_rep, v_c - v_rep)
    return CongruenceEstimate(1 - p if flip else p, "lik", "thm")


def pcm_closed_obs(hist: Dataset, curr: Dataset, model: EndpointModel) -> CongruenceEstimate:
    """Observation-statistic p_CM: Pr(y_rep - y_c >= 0)."""
    delta, v_rep, v_c = _normal_plugins(hist, curr, model)
    p = special.ndtr(-delta / math.sqrt(v_c + v_rep))
    return CongruenceEstimate(float(p), "obs", "thm")


def leverage(X_scored: np.ndarray, xtx_inv_cond: np.ndarray) -> np.ndarray:
    """H_i = 1 + x_i' (X_cond' X_cond)^-1 x_i for each scored row."""
    return 1.0 + np.einsum("ij,jk,ik->i", X_scored, xtx_inv_cond, X_scored)


def pcm_closed_regression(
    hist: Dataset,
    curr: Dataset,
    target: str = "score_current_given_hist",
    statistic: str = "lik",
) -> CongruenceEstimate:
    """Pointwise asymptotic p_CM for normal linear regression.

    With ``score_current_given_hist`` each current row is scored against the
    historical fit and the mean of the pointwise values is reported as the
    aggregate.  ``score_hist_given_current`` scores historical rows against the
    current fit (used for per-observation powers) and is never aggregated.
    """
    _check_statistic(statistic)
    if target not in TARGETS:
        raise ValidationError(f"target must be one of {TARGETS}, got {target!r}")
    if hist.X is None or curr.X is None:
        raise ValidationError("regression p_CM needs design matrices on both datasets")
    if hist.X.shape[1] != curr.X.shape[1]:
        raise ValidationError(
            f"design matrices have {hist.X.shape[1]} and {curr.X.shape[1]} columns"
        )
    scored, cond = (curr, hist) if target == TARGETS[0] else (hist, curr)
    fit_s, fit_c = ols(scored), ols(cond)
    H = leverage(scored.X, fit_c.xtx_inv)
    mean_delta = scored.X @ (fit_s.beta - fit_c.beta)
    v_rep = fit_c.sigma2 * H
    if statistic == "lik":
        p = orthant_double_array(mean_delta, fit_s.sigma2 + v_rep, fit_s.sigma2 - v_rep)
    else:
        # y_rep - y_scored has mean x'(beta_cond - beta_scored)
        p = special.ndtr(-mean_delta / np.sqrt(fit_s.sigma2 + v_rep))
    p = np.asarray(p, dtype=float)
    agg = float(p.mean()) if target == TARGETS[0] else None
    return CongruenceEstimate(p, statistic, "thm", pointwise=True, aggregate=agg)


def pcm_closed(hist: Dataset, curr: Dataset, model: EndpointModel, statistic: str = "lik") -> CongruenceEstimate:
    """Dispatch to the closed form for ``model.kind`` and ``statistic``."""
    _check_statistic(statistic)
    if model.kind == "linear_regression":
        return pcm_closed_regression(hist, curr, TARGETS[0], statistic)
    if model.kind == "poisson_regression":
        raise ValidationError("no closed form p_CM for Poisson endpoints; use the Monte Carlo estimator")
    if statistic == "lik":
        return pcm_closed_normal(hist, curr, model)
    return pcm_closed_obs(hist, curr, model)


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

def _poisson_comparable(hist: Dataset, curr: Dataset):
    """Drop design columns that are identically zero in the historical data.

    Those coefficients are not identified by the historical data alone, so only
    current rows that are also zero in them (the comparable subgroup, e.g. the
    control arm of a dose-response experiment) can be scored.
    """
    keep = np.any(hist.X != 0, axis=0)
    rows = np.all(curr.X[:, ~keep] == 0, axis=1)
    if not rows.any():
        raise RankDeficiencyError("no current rows are comparable with the historical design")
    return keep, rows


def _historical_draws(hist: Dataset, curr: Dataset, model: EndpointModel, R: int, gen):
    """Posterior draws given the historical data alone, plus a location/scale per current row.

    Returns (loc, scale, y_c) with loc/scale shaped (R, n) or (R, 1), or for
    Poisson (rate, None, y_c).
    """
    m = hist.size
    if model.kind == "normal_known_var":
        mu = samplers.draw_normal_known_var(gen, hist.y.mean(), model.sigma2_h, m, R)
        return mu[:, None], np.full((R, 1), math.sqrt(model.sigma2_h)), curr.y
    if model.kind == "normal_unknown_var":
        mu, s2 = samplers.draw_normal_unknown_var(gen, hist.y, np.ones(m), R)
        return mu[:, None], np.sqrt(s2)[:, None], curr.y
    if model.kind == "linear_regression":
        if hist.X is None or curr.X is None:
            raise ValidationError("regression p_CM needs design matrices on both datasets")
        post = samplers.regression_posterior(hist.X, hist.y, np.ones(m))
        beta, s2 = post.draw(gen, R)
        return beta @ curr.X.T, np.sqrt(s2)[:, None], curr.y
    if model.kind == "poisson_regression":
        if hist.X is None or curr.X is None:
            raise ValidationError("Poisson p_CM needs design matrices on both datasets")
        keep, rows = _poisson_comparable(hist, curr)
        res = samplers.poisson_mh(
            hist.X[:, keep], hist.y, np.ones(m), samplers.DEFAULT_BURN_IN + R, samplers.DEFAULT_BURN_IN, gen
        )
        rate = np.exp(res.draws @ curr.X[rows][:, keep].T)
        return rate, None, curr.y[rows]
    raise ValidationError(f"unsupported endpoint kind {model.kind!r}")


def pcm_monte_carlo(
    hist: Dataset,
    curr: Dataset,
    model: EndpointModel,
    statistic: str = "lik",
    R: int = DEFAULT_R,
    rng: Optional[RngStream] = None,
    flip: bool = False,
) -> CongruenceEstimate:
    """Average of I[T(y_rep_ir; theta_r) >= T(y_c_i; theta_r)] over R draws and n rows.

    theta_r are posterior draws given the historical data only and one fresh
    predictive draw is made per (i, r).  Ties count as successes.  ``flip``
    reverses the inequality.
    """
    _check_statistic(statistic)
    R = int(R)
    if R < 1:
        raise ValidationError(f"R must be positive, got {R}")
    if R < MIN_R:
        warnings.warn(f"R={R} Monte Carlo draws is below {MIN_R}; the estimate is unstable", FewDrawsWarning)
    gen = (rng or RngStream(0)).generator()
    loc, scale, yc = _historical_draws(hist, curr, model, R, gen)
    shape = (R, yc.size)
    if scale is None:
        y_rep = gen.poisson(np.broadcast_to(loc, shape)).astype(float)
        if statistic == "lik":
            lp_rep = stats.poisson.logpmf(y_rep, loc)
            lp_c = stats.poisson.logpmf(yc[None, :], loc)
            ind = (y_rep == yc) | (lp_rep >= lp_c if not flip else lp_rep <= lp_c)
        else:
            ind = y_rep >= yc if not flip else y_rep <= yc
    else:
        y_rep = loc + scale * gen.standard_normal(shape)
        if statistic == "lik":
            # same scale on both sides: density order is reversed distance order
            d_rep, d_c = np.abs(y_rep - loc), np.abs(yc[None, :] - loc)
            ind = d_rep <= d_c if not flip else d_rep >= d_c
        else:
            ind = y_rep >= yc if not flip else y_rep <= yc
    total = ind.size
    return CongruenceEstimate(float(np.count_nonzero(ind)) / total, statistic, "sim", mc_draws=total)


def _vector_statistic(statistic_T) -> Callable[[np.ndarray], np.ndarray]:
    if callable(statistic_T):
        return statistic_T
    if statistic_T == "max":
        return lambda a: np.max(a, axis=-1)
    if statistic_T == "mean":
        return lambda a: np.mean(a, axis=-1)
    if isinstance(statistic_T, str) and statistic_T.startswith("quantile:"):
        q = float(statistic_T.split(":", 1)[1])
        if not 0 <= q <= 1:
            raise ValidationError(f"quantile level must be in [0, 1], got {q}")
        return lambda a: np.quantile(a, q, axis=-1)
    raise ValidationError(f"unknown vector statistic {statistic_T!r}; use 'max', 'mean' or 'quantile:q'")


def pcm_naive_vector(
    hist: Dataset,
    curr: Dataset,
    model: EndpointModel,
    statistic_T="mean",
    R: int = DEFAULT_R,
    rng: Optional[RngStream] = None,
) -> float:
    """Whole-vector posterior predictive p-value Pr(T(Y_rep) >= T(Y_c) | Y_h).

    Unlike the marginal p_CM this is (approximately) uniform when the two
    datasets are congruent, which is why it is not used for borrowing.
    """
    if not model.is_normal:
        raise ValidationError("the whole-vector p-value is implemented for normal endpoints")
    R = int(R)
    if R < 1:
        raise ValidationError(f"R must be positive, got {R}")
    if R < MIN_R:
        warnings.warn(f"R={R} Monte Carlo draws is below {MIN_R}; the estimate is unstable", FewDrawsWarning)
    T = _vector_statistic(statistic_T)
    gen = (rng or RngStream(0)).generator()
    loc, scale, yc = _historical_draws(hist, curr, model, R, gen)
    y_rep = loc + scale * gen.standard_normal((R, yc.size))
    t_obs = T(yc[None, :])
    return float(np.mean(T(y_rep) >= t_obs))
