"""Low-level posterior samplers with per-observation likelihood weights.

Every sampler takes a weight vector ``w``: each observation's log-likelihood
is multiplied by its weight (1 for current rows, the power parameter for
historical rows).  The initial prior is never raised to a power.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import special

from .errors import (
    DegenerateInputError,
    ImproperPosteriorError,
    RankDeficiencyError,
    SamplerDiagnosticError,
    ValidationError,
)
from .stats_core import sample_inv_gamma

ACCEPT_BOUNDS = (0.05, 0.8)
DEFAULT_ITERS = 6500
DEFAULT_BURN_IN = 1500


def _check_weights(w, size):
    w = np.asarray(w, dtype=float)
    if w.shape != (size,):
        raise ValidationError(f"weight vector has shape {w.shape}, expected ({size},)")
    if np.any(~np.isfinite(w)) or np.any(w < 0) or np.any(w > 1):
        raise ValidationError("power parameters must lie in [0, 1]")
    return w


# ---------------------------------------------------------------------------
# Normal mean / variance
# ---------------------------------------------------------------------------

def weighted_normal_stats(y, w):
    """Return (total weight, weighted mean, weighted sum of squares about the mean)."""
    y = np.asarray(y, dtype=float)
    w = _check_weights(w, y.size)
    tot = float(w.sum())
    if tot <= 0:
        raise ImproperPosteriorError("all observations have zero weight")
    ybar = float(w @ y) / tot
    ss = float(w @ (y - ybar) ** 2)
    return tot, ybar, ss


def normal_unknown_var_params(y, w):
    """Normal-inverse-gamma posterior under the prior 1/sigma^2.

    Returns (mean, precision multiplier W, IG shape, IG scale):
    mu | s2 ~ N(mean, s2 / W),  s2 ~ IG((W - 1)/2, SS/2).
    """
    tot, ybar, ss = weighted_normal_stats(y, w)
    if tot <= 1:
        raise ImproperPosteriorError(
            f"effective sample size n + alpha*m = {tot:.4g} <= 1 gives an improper posterior"
        )
    if not ss > 0:
        raise DegenerateInputError("weighted responses have zero spread")
    return ybar, tot, (tot - 1) / 2, ss / 2


def draw_normal_unknown_var(gen, y, w, size):
    mean, tot, shape, scale = normal_unknown_var_params(y, w)
    sigma2 = sample_inv_gamma(gen, shape, scale, size)
    mu = mean + np.sqrt(sigma2 / tot) * gen.standard_normal(size)
    return mu, sigma2


def draw_normal_known_var(gen, ybar, sigma2, m, size):
    """Flat-prior posterior of a normal mean with known variance: N(ybar, sigma2/m)."""
    return ybar + np.sqrt(sigma2 / m) * gen.standard_normal(size)


# ---------------------------------------------------------------------------
# Linear regression
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegressionPosterior:
    beta_hat: np.ndarray
    xtwx_inv: np.ndarray
    shape: float
    scale: float

    def draw(self, gen, size):
        sigma2 = sample_inv_gamma(gen, self.shape, self.scale, size)
        chol = np.linalg.cholesky(self.xtwx_inv)
        z = gen.standard_normal((size, self.beta_hat.size))
        beta = self.beta_hat + np.sqrt(sigma2)[:, None] * (z @ chol.T)
        return beta, sigma2


def regression_posterior(X, y, w, sigma_prior_power=None) -> RegressionPosterior:
    """Weighted-least-squares normal-inverse-gamma posterior.

    The prior is (sigma^2)^-q with q = (p+2)/2 by default; q = 1 gives the
    1/sigma^2 reference prior.  Then beta | s2 ~ N(beta_w, s2 (X'WX)^-1) and
    s2 ~ IG(sum(w)/2 + q - p/2 - 1, SSE_w/2).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    w = _check_weights(w, n)
    q = (p + 2) / 2 if sigma_prior_power is None else float(sigma_prior_power)
    xtwx = X.T @ (w[:, None] * X)
    if np.linalg.matrix_rank(xtwx) < p:
        raise RankDeficiencyError("weighted cross-product matrix X'WX is singular")
    xtwx_inv = np.linalg.inv(xtwx)
    xtwx_inv = (xtwx_inv + xtwx_inv.T) / 2
    beta_hat = xtwx_inv @ (X.T @ (w * y))
    resid = y - X @ beta_hat
    sse = float(w @ resid**2)
    shape = w.sum() / 2 + q - p / 2 - 1
    if shape <= 0:
        raise ImproperPosteriorError(f"inverse-gamma shape {shape:.4g} <= 0; too little weighted data")
    if not sse > 0:
        raise DegenerateInputError("weighted regression residuals are all zero")
    return RegressionPosterior(beta_hat, xtwx_inv, shape, sse / 2)


# ---------------------------------------------------------------------------
# Random-walk Metropolis
# ---------------------------------------------------------------------------

@dataclass
class MetropolisResult:
    draws: np.ndarray
    acceptance_rate: float
    scale: float


def random_walk_metropolis(
    log_target: Callable[[np.ndarray], float],
    init,
    proposal_chol,
    iters: int,
    burn_in: int,
    gen: np.random.Generator,
    scale: float | None = None,
    target_accept: float = 0.3,
) -> MetropolisResult:
    """Gaussian random-walk Metropolis with Robbins-Monro scale adaptation.

    The global log-scale is adapted toward ``target_accept`` during burn-in
    only and frozen afterwards, so the retained chain is a valid MH chain.
    ``acceptance_rate`` is measured over the retained iterations.
    """
    if burn_in < 0 or iters <= burn_in:
        raise ValidationError(f"need iters > burn_in >= 0, got iters={iters}, burn_in={burn_in}")
    x = np.array(init, dtype=float)
    d = x.size
    L = np.asarray(proposal_chol, dtype=float)
    log_s = np.log(2.38 / np.sqrt(d) if scale is None else scale)
    lp = log_target(x)
    if not np.isfinite(lp):
        raise SamplerDiagnosticError("log target is not finite at the initial point")
    out = np.empty((iters - burn_in, d))
    accepted = 0
    z_all = gen.standard_normal((iters, d))
    u_all = np.log(gen.random(iters))
    for t in range(iters):
        prop = x + np.exp(log_s) * (L @ z_all[t])
        lp_prop = log_target(prop)
        acc = np.isfinite(lp_prop) and u_all[t] < lp_prop - lp
        if acc:
            x, lp = prop, lp_prop
        if t < burn_in:
            log_s += (float(acc) - target_accept) / (t + 1) ** 0.6
        else:
            accepted += acc
            out[t - burn_in] = x
    return MetropolisResult(out, float(accepted) / (iters - burn_in), float(np.exp(log_s)))


# ---------------------------------------------------------------------------
# Poisson regression
# ---------------------------------------------------------------------------

def poisson_loglik(beta, X, y, w):
    eta = X @ beta
    return float(w @ (y * eta - np.exp(eta) - special.gammaln(y + 1)))


def poisson_mode(X, y, w, max_iter=100, tol=1e-10):
    """Weighted Poisson MLE by Newton-Raphson; returns (mode, inverse negative Hessian)."""
    n, p = X.shape
    if np.linalg.matrix_rank(X[w > 0]) < p:
        raise RankDeficiencyError("Poisson design restricted to positively weighted rows is rank deficient")
    beta = np.zeros(p)
    beta[0] = np.log(max(float(w @ y) / w.sum(), 0.5))
    for _ in range(max_iter):
        mu = np.exp(np.clip(X @ beta, -700, 700))
        grad = X.T @ (w * (y - mu))
        hess = X.T @ ((w * mu)[:, None] * X)
        step = np.linalg.solve(hess, grad)
        # halve the step until the log-likelihood does not decrease
        ll0 = poisson_loglik(beta, X, y, w)
        for _ in range(50):
            cand = beta + step
            if poisson_loglik(cand, X, y, w) >= ll0 - 1e-12:
                break
            step = step / 2
        beta = cand
        if np.max(np.abs(step)) < tol:
            break
    mu = np.exp(X @ beta)
    cov = np.linalg.inv(X.T @ ((w * mu)[:, None] * X))
    return beta, (cov + cov.T) / 2


def poisson_mh(X, y, w, iters, burn_in, gen, proposal_scale=None) -> MetropolisResult:
    """Flat-prior Poisson regression posterior with weighted log-likelihood."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = _check_weights(w, y.size)
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise ValidationError("Poisson responses must be non-negative integers")
    mode, cov = poisson_mode(X, y, w)
    chol = np.linalg.cholesky(cov)
    res = random_walk_metropolis(
        lambda b: poisson_loglik(b, X, y, w), mode, chol, iters, burn_in, gen, scale=proposal_scale
    )
    lo, hi = ACCEPT_BOUNDS
    if not lo < res.acceptance_rate < hi:
        raise SamplerDiagnosticError(
            f"MH acceptance rate {res.acceptance_rate:.3f} outside ({lo}, {hi}) after adaptation",
            acceptance_rate=res.acceptance_rate,
        )
    return res
