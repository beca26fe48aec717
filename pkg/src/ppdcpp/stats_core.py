"""Numerical primitives shared by the congruence, calibration and posterior modules.

The bivariate normal orthant probability uses the Drezner-Wesolowsky /
Genz Gauss-Legendre scheme (double precision accurate).  Everything else is a
thin layer over numpy/scipy so that callers never touch global RNG state.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import integrate, special, stats

from .errors import OracleError, ValidationError

_TWOPI = 2.0 * math.pi
# |rho| at or beyond this is treated as perfectly (anti-)correlated
DEGENERATE_RHO = 1.0 - 1e-12

# the oracle integrates over [-12, 12]^2; the excluded mass is below 1e-30
_ORACLE_BOX = 12.0
_GL_NODES = {n: np.polynomial.legendre.leggauss(n) for n in (6, 12, 20)}


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RngStream:
    """Identity of a reproducible, counter-based random stream.

    Two streams with the same ``(seed, stream_id, path)`` produce bit-identical
    draws.  ``child`` derives independent sub-streams without consuming any
    state, so replicates can be scheduled in any order.
    """

    seed: int
    stream_id: int = 0
    path: tuple[int, ...] = field(default=())

    def __post_init__(self):
        for v in (self.seed, self.stream_id, *self.path):
            if not (0 <= int(v) < 2**64):
                raise ValidationError(f"RNG identifiers must be unsigned 64-bit integers, got {v}")

    def child(self, k: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.path + (int(k),))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id), *self.path))
        return np.random.Generator(np.random.Philox(ss))

    def as_dict(self) -> dict:
        return {"seed": int(self.seed), "stream_id": int(self.stream_id), "path": list(self.path)}


# ---------------------------------------------------------------------------
# Univariate densities, CDFs, samplers
# ---------------------------------------------------------------------------

def norm_pdf(x, loc=0.0, scale=1.0):
    return stats.norm.pdf(x, loc, scale)


def norm_logpdf(x, loc=0.0, scale=1.0):
    return stats.norm.logpdf(x, loc, scale)


def norm_cdf(x, loc=0.0, scale=1.0):
    return stats.norm.cdf(x, loc, scale)


def norm_ppf(q, loc=0.0, scale=1.0):
    return stats.norm.ppf(q, loc, scale)


def t_pdf(x, df, loc=0.0, scale=1.0):
    return stats.t.pdf(x, df, loc, scale)


def t_cdf(x, df, loc=0.0, scale=1.0):
    return stats.t.cdf(x, df, loc, scale)


def t_ppf(q, df, loc=0.0, scale=1.0):
    return stats.t.ppf(q, df, loc, scale)


def sample_t(gen: np.random.Generator, df, loc=0.0, scale=1.0, size=None):
    return loc + scale * gen.standard_t(df, size=size)


def sample_inv_gamma(gen: np.random.Generator, shape, scale, size=None):
    """Draw from InvGamma(shape, scale), density proportional to x^(-shape-1) exp(-scale/x)."""
    return scale / gen.gamma(shape, 1.0, size=size)


def sample_mvn(gen: np.random.Generator, mean, cov, size: int):
    mean = np.asarray(mean, dtype=float)
    chol = np.linalg.cholesky(np.asarray(cov, dtype=float))
    z = gen.standard_normal((size, mean.size))
    return mean + z @ chol.T


# ---------------------------------------------------------------------------
# Bivariate normal orthant probabilities
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SymmetricBvnSpec:
    """(U, V) bivariate normal with a common mean, common variance and covariance ``cov``."""

    mean_delta: float
    var: float
    cov: float

    def __post_init__(self):
        vals = (self.mean_delta, self.var, self.cov)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError(f"non-finite bivariate normal parameters: {vals}")
        if self.var <= 0:
            raise ValidationError(f"variance must be positive, got {self.var}")
        if abs(self.cov) > self.var * (1 + 1e-12):
            raise ValidationError(f"|cov| = {abs(self.cov)} exceeds var = {self.var}")

    @property
    def rho(self) -> float:
        return float(np.clip(self.cov / self.var, -1.0, 1.0))

    @property
    def z(self) -> float:
        """Standardized common mean."""
        return self.mean_delta / math.sqrt(self.var)


def bvn_upper(h, k, rho):
    """P(X > h, Y > k) for standard bivariate normal (X, Y) with correlation ``rho``.

    Vectorized over broadcastable arrays.  Genz's BVNU: 6/12/20-point
    Gauss-Legendre depending on |rho|, with the Drezner-Wesolowsky
    asymptotic expansion for |rho| >= 0.925 and analytic limits at |rho| = 1.
    """
    h, k, rho = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (h, k, rho)))
    out = np.empty(h.shape, dtype=float)
    a = np.abs(rho)

    pos1 = rho >= DEGENERATE_RHO
    neg1 = rho <= -DEGENERATE_RHO
    out[pos1] = special.ndtr(-np.maximum(h[pos1], k[pos1]))
    out[neg1] = np.maximum(0.0, special.ndtr(-h[neg1]) - special.ndtr(k[neg1]))

    regular = ~(pos1 | neg1)
    for lo, hi, npts in ((0.0, 0.3, 6), (0.3, 0.75, 12), (0.75, 0.925, 20)):
        sel = regular & (a >= lo) & (a < hi)
        if np.any(sel):
            out[sel] = _bvnu_small_rho(h[sel], k[sel], rho[sel], npts)
    sel = regular & (a >= 0.925)
    if np.any(sel):
        out[sel] = _bvnu_large_rho(h[sel], k[sel], rho[sel])
    return out if out.ndim else float(out)


def _bvnu_small_rho(h, k, r, npts):
    x, w = _GL_NODES[npts]
    hk = (h * k)[:, None]
    hs = ((h * h + k * k) / 2)[:, None]
    asr = np.arcsin(r)[:, None]
    sn = np.sin(asr * (x[None, :] + 1) / 2)
    total = (w[None, :] * np.exp((sn * hk - hs) / (1 - sn * sn))).sum(axis=1)
    return total * np.arcsin(r) / (2 * _TWOPI) + special.ndtr(-h) * special.ndtr(-k)


def _bvnu_large_rho(h, k, r):
    x, w = _GL_NODES[20]
    k = np.where(r < 0, -k, k)
    hk = h * k
    as_ = (1 - r) * (1 + r)
    a = np.sqrt(as_)
    bs = (h - k) ** 2
    c = (4 - hk) / 8
    d = (12 - hk) / 16
    bvn = a * np.exp(-(bs / as_ + hk) / 2) * (1 - c * (bs - as_) * (1 - d * bs / 5) / 3 + c * d * as_ * as_ / 5)
    b = np.sqrt(bs)
    tail = np.exp(-hk / 2) * math.sqrt(_TWOPI) * special.ndtr(-b / a) * b * (1 - c * bs * (1 - d * bs / 5) / 3)
    bvn = bvn - np.where(hk > -160, tail, 0.0)

    half_a = (a / 2)[:, None]
    xs = (half_a * (x[None, :] + 1)) ** 2
    rs = np.sqrt(1 - xs)
    bsc, hkc, cc, dc = bs[:, None], hk[:, None], c[:, None], d[:, None]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        term = np.exp(-(bsc / xs + hkc) / 2) * (
            np.exp(-hkc * (1 - rs) / (2 * (1 + rs))) / rs - (1 + cc * xs * (1 + dc * xs))
        )
    term = np.where(np.isfinite(term), term, 0.0)
    bvn = bvn + (half_a[:, 0] * (w[None, :] * term).sum(axis=1))
    bvn = -bvn / _TWOPI
    return np.where(
        r > 0,
        bvn + special.ndtr(-np.maximum(h, k)),
        -bvn + np.maximum(0.0, special.ndtr(-h) - special.ndtr(-k)),
    )


def orthant_double(spec: SymmetricBvnSpec) -> float:
    """Pr(U >= 0, V >= 0) + Pr(U <= 0, V <= 0) for the symmetric pair in ``spec``."""
    return float(orthant_double_array(spec.mean_delta, spec.var, spec.cov))


def orthant_double_array(mean_delta, var, cov):
    """Vectorized :func:`orthant_double` over arrays of (mean, var, cov)."""
    mean_delta, var, cov = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (mean_delta, var, cov))
    )
    if not (np.all(np.isfinite(mean_delta)) and np.all(np.isfinite(var)) and np.all(np.isfinite(cov))):
        raise ValidationError("non-finite bivariate normal parameters")
    if np.any(var <= 0):
        raise ValidationError("variance must be positive")
    if np.any(np.abs(cov) > var * (1 + 1e-12)):
        raise ValidationError("|cov| exceeds var")
    rho = np.clip(cov / var, -1.0, 1.0)
    z = mean_delta / np.sqrt(var)
    # U >= 0 <=> Z >= -z ; U <= 0 <=> -Z >= z
    p = bvn_upper(-z, -z, rho) + bvn_upper(z, z, rho)
    p = np.clip(p, 0.0, 1.0)
    return p if p.ndim else float(p)


def orthant_quadrature_oracle(spec: SymmetricBvnSpec, abs_tol: float = 1e-10) -> float:
    """Same quantity as :func:`orthant_double`, by adaptive 2-D quadrature.

    Integrates the standard normal density over each orthant after the
    Cholesky change of variables Z1 = u, Z2 = rho*u + sqrt(1 - rho^2)*v, so the
    integrand is phi(u)phi(v) and the region boundary is linear.  Test-only.
    """
    rho = spec.rho
    if abs(rho) >= DEGENERATE_RHO:
        raise ValidationError("quadrature oracle requires a non-degenerate correlation")
    s = math.sqrt(1 - rho * rho)
    z = spec.z
    box = _ORACLE_BOX

    def dens(v, u):
        return math.exp(-(u * u + v * v) / 2) / _TWOPI

    def clip(x):
        return min(max(x, -box), box)

    # upper: Z1 >= -z and Z2 >= -z ; lower: Z1 <= -z and Z2 <= -z
    opts = dict(epsabs=abs_tol / 4, epsrel=0)
    upper = err_u = lower = err_l = 0.0
    if -z < box:
        upper, err_u = integrate.dblquad(
            dens, clip(-z), box, lambda u: clip((-z - rho * u) / s), lambda u: box, **opts
        )
    if -z > -box:
        lower, err_l = integrate.dblquad(
            dens, -box, clip(-z), lambda u: -box, lambda u: clip((-z - rho * u) / s), **opts
        )
    if err_u + err_l > abs_tol:
        raise OracleError(f"quadrature error estimate {err_u + err_l:.3g} exceeds tolerance {abs_tol:.3g}")
    return upper + lower


# ---------------------------------------------------------------------------
# Binomial helpers
# ---------------------------------------------------------------------------

class BinomialCi(NamedTuple):
    lower: float
    upper: float
    method: str
    n: int
    w: int


CI_METHODS = ("wald", "clopper_pearson")


def binom_ci(n: int, w: int, level: float = 0.95, method: str = "clopper_pearson") -> BinomialCi:
    """Two-sided confidence interval for a binomial proportion.

    Wald intervals are clipped to [0, 1] and have zero width at w in {0, n}.
    Clopper-Pearson bounds are beta quantiles, with the usual 0/1 endpoints.
    """
    n, w = int(n), int(w)
    if n < 1:
        raise ValidationError(f"n must be positive, got {n}")
    if not 0 <= w <= n:
        raise ValidationError(f"count w={w} outside [0, {n}]")
    if not 0 < level < 1:
        raise ValidationError(f"confidence level must be in (0, 1), got {level}")
    tail = (1 - level) / 2
    if method == "wald":
        phat = w / n
        half = stats.norm.ppf(1 - tail) * math.sqrt(phat * (1 - phat) / n)
        lo, hi = max(0.0, phat - half), min(1.0, phat + half)
    elif method == "clopper_pearson":
        lo = 0.0 if w == 0 else float(stats.beta.ppf(tail, w, n - w + 1))
        hi = 1.0 if w == n else float(stats.beta.ppf(1 - tail, w + 1, n - w))
    else:
        raise ValidationError(f"unknown CI method {method!r}; expected one of {CI_METHODS}")
    return BinomialCi(lo, hi, method, n, w)


def binom_abs_dev_expectation(n: int, p: float) -> float:
    """Exact E|W/n - 1/2| for W ~ Binomial(n, p)."""
    n = int(n)
    if n < 1:
        raise ValidationError(f"n must be positive, got {n}")
    if not 0 <= p <= 1:
        raise ValidationError(f"p must be in [0, 1], got {p}")
    w = np.arange(n + 1)
    return float(np.sum(stats.binom.pmf(w, n, p) * np.abs(w / n - 0.5)))
