"""Replication engine for operating characteristics of the borrowing methods.

A scenario describes how historical/current pairs are generated, which method
variants are run on each pair, and optionally a sweep axis.  Every replicate
owns an RNG stream (stream id = replicate index) with fixed children for the
current data, the historical data, Monte Carlo p_CM and the posterior fit.  The
same streams are reused at every grid point and by every method, so curves are
smooth in the sweep value and methods are compared on identical data.
"""
from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Optional

import numpy as np
from scipy import stats

from . import __version__
from .calibration import CalibrationConfig, power_from_s, solve_sigmoid, unequal_size_cap
from .congruence import pcm_closed, pcm_monte_carlo, pcm_naive_vector
from .data import Dataset, EndpointModel
from .errors import NumericalError, ScenarioFailure, ValidationError
from .posterior import (
    PowerAssignment,
    assign_pointwise_powers,
    fit_linear_regression,
    fit_normal_known_var,
    fit_normal_unknown_var,
)
from .samplers import DEFAULT_BURN_IN, DEFAULT_ITERS
from .stats_core import RngStream

METHODS = ("thm_lik", "thm_obs", "sim_lik", "sim_obs", "pw_lik", "pw_obs", "no_borrow", "pool")
SIM_ENDPOINTS = ("normal_known_var", "normal_unknown_var", "linear_regression")
NUMERIC_AXES = ("mean_diff", "mu_h", "sigma_h", "sigma_c", "x1_p_h", "n", "m", "nm")
FAILURE_TOLERANCE = 0.01

# child streams of each replicate
CURRENT, HISTORICAL, MC, FIT = 0, 1, 2, 3

DEFAULT_PARAMS = {
    "normal": {"mu_c": 20.0, "mu_h": 20.0, "sigma_c": 0.5, "sigma_h": 0.5},
    "regression": {
        "beta_c": [50.0, 8.0, 0.5],
        "beta_h": [50.0, 8.0, 0.5],
        "sigma_c": 0.5,
        "sigma_h": 0.5,
        "x1_p_c": 0.5,
        "x1_p_h": 0.5,
        "x2_low": 40,
        "x2_high": 70,
    },
}


def _family(endpoint: str) -> str:
    return "regression" if endpoint == "linear_regression" else "normal"


@dataclass
class SweepSpec:
    axis: str
    values: list

    def labels(self) -> list:
        if self.axis == "setup":
            return [str(v["label"]) for v in self.values]
        return [float(v) for v in self.values]


@dataclass
class ScenarioSpec:
    name: str
    endpoint: str
    n: int
    m: int
    methods: list
    replicates: int = 500
    params: dict = field(default_factory=dict)
    calibration: dict = field(default_factory=dict)
    cap: bool = False
    mc_draws: int = 5000
    iters: int = DEFAULT_ITERS
    burn_in: int = DEFAULT_BURN_IN
    seed: int = 0
    sweep: Optional[SweepSpec] = None
    panels: Optional[list] = None
    workers: int = 1

    def __post_init__(self):
        if self.endpoint not in SIM_ENDPOINTS:
            raise ValidationError(f"endpoint: must be one of {SIM_ENDPOINTS}, got {self.endpoint!r}")
        if isinstance(self.methods, str):
            self.methods = [self.methods]
        for i, mth in enumerate(self.methods):
            if mth not in METHODS:
                raise ValidationError(f"methods[{i}]: unknown method {mth!r}; expected one of {METHODS}")
            if mth.startswith("pw_") and self.endpoint != "linear_regression":
                raise ValidationError(f"methods[{i}]: pointwise borrowing needs the linear_regression endpoint")
        if not self.methods:
            raise ValidationError("methods: at least one method is required")
        for name in ("n", "m", "replicates", "mc_draws", "workers"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValidationError(f"{name}: must be a positive integer, got {v!r}")
            setattr(self, name, int(v))
        unknown = set(self.params) - set(DEFAULT_PARAMS[_family(self.endpoint)])
        if unknown:
            raise ValidationError(f"params: unknown keys {sorted(unknown)} for endpoint {self.endpoint}")
        self.params = {**DEFAULT_PARAMS[_family(self.endpoint)], **self.params}
        CalibrationConfig(n_current=max(self.n, 2), **self.calibration)
        if isinstance(self.sweep, dict):
            self.sweep = SweepSpec(**self.sweep)
        if self.sweep is not None:
            self._check_sweep()
        if self.panels is not None:
            self._check_panels()

    def _check_sweep(self):
        ax, vals = self.sweep.axis, self.sweep.values
        if not vals:
            raise ValidationError("sweep.values: empty grid")
        if ax == "setup":
            for i, v in enumerate(vals):
                if not isinstance(v, dict) or "label" not in v:
                    raise ValidationError(f"sweep.values[{i}]: setup entries need a 'label'")
            return
        if ax not in NUMERIC_AXES and not ax.startswith("beta_h."):
            raise ValidationError(f"sweep.axis: unknown axis {ax!r}")
        arr = np.asarray(vals, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise ValidationError("sweep.values: grid must be finite")
        if np.any(np.diff(arr) < 0):
            raise ValidationError("sweep.values: grid must be sorted ascending")

    def _check_panels(self):
        if not isinstance(self.panels, list) or not self.panels:
            raise ValidationError("panels: must be a non-empty list")
        allowed = {"label", "n", "m"} | set(self.params)
        for i, pnl in enumerate(self.panels):
            if not isinstance(pnl, dict) or "label" not in pnl:
                raise ValidationError(f"panels[{i}]: each panel needs a 'label'")
            extra = set(pnl) - allowed
            if extra:
                raise ValidationError(f"panels[{i}]: unknown keys {sorted(extra)}")

    def panel_spec(self, panel: dict) -> "ScenarioSpec":
        over = {k: v for k, v in panel.items() if k not in ("label", "n", "m")}
        return replace(
            self,
            n=int(panel.get("n", self.n)),
            m=int(panel.get("m", self.m)),
            params={**self.params, **over},
            panels=None,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        allowed = {f for f in cls.__dataclass_fields__}
        extra = set(d) - allowed
        if extra:
            raise ValidationError(f"$: unknown scenario fields {sorted(extra)}")
        for req in ("name", "endpoint", "n", "m", "methods"):
            if req not in d:
                raise ValidationError(f"$.{req}: required field missing")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ValidationError(f"$: {exc}") from None

    @classmethod
    def from_json(cls, path) -> "ScenarioSpec":
        with open(path, encoding="utf-8") as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(d)

    def as_dict(self) -> dict:
        d = asdict(self)
        if self.sweep is not None:
            d["sweep"] = {"axis": self.sweep.axis, "values": list(self.sweep.values)}
        return d


# ---------------------------------------------------------------------------
# Grid points and data generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PointConfig:
    """Fully resolved generator parameters for one grid point."""

    n: int
    m: int
    params: dict


def resolve_point(spec: ScenarioSpec, value=None) -> PointConfig:
    n, m = spec.n, spec.m
    params = json.loads(json.dumps(spec.params))
    if spec.sweep is None:
        return PointConfig(n, m, params)
    ax = spec.sweep.axis
    if ax == "setup":
        over = {k: v for k, v in value.items() if k != "label"}
        n = int(over.pop("n", n))
        m = int(over.pop("m", m))
        unknown = set(over) - set(params)
        if unknown:
            raise ValidationError(f"sweep.values: unknown setup keys {sorted(unknown)}")
        params.update(over)
    elif ax == "mean_diff":
        params["mu_h"] = params["mu_c"] + float(value)
    elif ax in ("n", "m", "nm"):
        k = int(value)
        if k < 1:
            raise ValidationError(f"sweep.values: sample size {value} must be positive")
        n = k if ax in ("n", "nm") else n
        m = k if ax in ("m", "nm") else m
    elif ax.startswith("beta_h."):
        params["beta_h"][int(ax.split(".", 1)[1])] = float(value)
    else:
        params[ax] = float(value)
    return PointConfig(n, m, params)


def _design(gen, size, p1, low, high):
    x1 = (gen.random(size) < p1).astype(float)
    x2 = gen.integers(int(low), int(high) + 1, size).astype(float)
    return np.column_stack([np.ones(size), x1, x2])


def generate_pair(endpoint: str, point: PointConfig, rep: RngStream):
    """Historical and current datasets for one replicate."""
    pr = point.params
    gc, gh = rep.child(CURRENT).generator(), rep.child(HISTORICAL).generator()
    if endpoint == "linear_regression":
        Xc = _design(gc, point.n, pr["x1_p_c"], pr["x2_low"], pr["x2_high"])
        Xh = _design(gh, point.m, pr["x1_p_h"], pr["x2_low"], pr["x2_high"])
        yc = Xc @ np.asarray(pr["beta_c"], float) + pr["sigma_c"] * gc.standard_normal(point.n)
        yh = Xh @ np.asarray(pr["beta_h"], float) + pr["sigma_h"] * gh.standard_normal(point.m)
        return Dataset(yh, Xh, "historical"), Dataset(yc, Xc, "current")
    yc = pr["mu_c"] + pr["sigma_c"] * gc.standard_normal(point.n)
    yh = pr["mu_h"] + pr["sigma_h"] * gh.standard_normal(point.m)
    return Dataset(yh, label="historical"), Dataset(yc, label="current")


def _endpoint_model(endpoint, point):
    if endpoint == "normal_known_var":
        return EndpointModel(endpoint, point.params["sigma_h"] ** 2, point.params["sigma_c"] ** 2)
    return EndpointModel(endpoint)


def truth(endpoint, point) -> dict:
    if endpoint == "linear_regression":
        return {f"beta{j}": float(b) for j, b in enumerate(point.params["beta_c"])}
    return {"mu": float(point.params["mu_c"])}


# ---------------------------------------------------------------------------
# One replicate
# ---------------------------------------------------------------------------

def method_power(method, hist, curr, model, curve, cap, R, rep: RngStream) -> PowerAssignment:
    if method == "no_borrow":
        return PowerAssignment.global_(0.0)
    if method == "pool":
        return PowerAssignment.global_(1.0)
    estimator, statistic = method.split("_")
    if estimator == "pw":
        return assign_pointwise_powers(hist, curr, curve, statistic, cap)
    if estimator == "thm":
        est = pcm_closed(hist, curr, model, statistic)
    else:
        est = pcm_monte_carlo(hist, curr, model, statistic, R, rep.child(MC))
    return PowerAssignment.global_(power_from_s(curve, est.global_s, cap))


def fit(endpoint, hist, curr, model, power, iters, burn_in, rep: RngStream):
    if endpoint == "normal_known_var":
        return fit_normal_known_var(hist, curr, model.sigma2_h, model.sigma2_c, power)
    if endpoint == "normal_unknown_var":
        return fit_normal_unknown_var(hist, curr, power, iters, burn_in, rep.child(FIT))[1]
    return fit_linear_regression(hist, curr, power, iters, burn_in, rep.child(FIT))[1]


@dataclass
class ReplicateOutcome:
    alpha: float
    pointwise: Optional[tuple]
    mean: np.ndarray
    sd: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


def run_replicate(spec: ScenarioSpec, point: PointConfig, curve, index: int) -> dict:
    """All methods on one generated pair; failures become reason codes."""
    rep = RngStream(spec.seed, index)
    hist, curr = generate_pair(spec.endpoint, point, rep)
    model = _endpoint_model(spec.endpoint, point)
    cap = unequal_size_cap(point.n, point.m) if spec.cap else None
    names = list(truth(spec.endpoint, point))
    out = {}
    for method in spec.methods:
        try:
            power = method_power(method, hist, curr, model, curve, cap, spec.mc_draws, rep)
            summ = fit(spec.endpoint, hist, curr, model, power, spec.iters, spec.burn_in, rep)
        except NumericalError as exc:
            out[method] = type(exc).__name__
            continue
        idx = [summ.names.index(k) for k in names]
        pw = None
        if power.kind == "pointwise":
            v = power.values
            pw = (float(v.min()), float(np.median(v)), float(v.max()))
        out[method] = ReplicateOutcome(
            power.alpha, pw, summ.mean[idx], summ.sd[idx], summ.lower[idx], summ.upper[idx]
        )
    return out


def _replicate_worker(args):
    return run_replicate(*args)


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

@dataclass
class MethodMetrics:
    method: str
    parameters: list
    avg_power: float
    prob_complete_borrow: float
    prob_discard: float
    avg_bias: np.ndarray
    avg_posterior_sd: np.ndarray
    coverage_probability: np.ndarray
    avg_interval_length: np.ndarray
    replicates_ok: int
    failures: dict
    alphas: np.ndarray
    pointwise_summary: Optional[tuple] = None
    pointwise_medians: Optional[np.ndarray] = None

    def rows(self) -> list:
        base = {
            "method": self.method,
            "avg_power": self.avg_power,
            "prob_complete_borrow": self.prob_complete_borrow,
            "prob_discard": self.prob_discard,
            "pw_min": self.pointwise_summary[0] if self.pointwise_summary else "",
            "pw_median": self.pointwise_summary[1] if self.pointwise_summary else "",
            "pw_max": self.pointwise_summary[2] if self.pointwise_summary else "",
            "replicates_ok": self.replicates_ok,
            "failures": sum(self.failures.values()),
        }
        return [
            {
                **base,
                "parameter": name,
                "avg_bias": float(self.avg_bias[j]),
                "avg_posterior_sd": float(self.avg_posterior_sd[j]),
                "coverage_probability": float(self.coverage_probability[j]),
                "avg_interval_length": float(self.avg_interval_length[j]),
            }
            for j, name in enumerate(self.parameters)
        ]

    def rounded_summary(self, digits: int = 2) -> dict:
        """Estimation metrics rounded as a printed table would show them."""
        return {
            name: tuple(
                round(float(arr[j]), digits)
                for arr in (self.avg_bias, self.avg_posterior_sd, self.coverage_probability, self.avg_interval_length)
            )
            for j, name in enumerate(self.parameters)
        }


def aggregate(method, outcomes: list, truth_map: dict, alpha_c, alpha_ic) -> MethodMetrics:
    total = len(outcomes)
    ok = [o for o in outcomes if isinstance(o, ReplicateOutcome)]
    failures: dict = {}
    for o in outcomes:
        if isinstance(o, str):
            failures[o] = failures.get(o, 0) + 1
    n_fail = total - len(ok)
    if n_fail and n_fail >= FAILURE_TOLERANCE * total:
        raise ScenarioFailure(
            f"method {method}: {n_fail} of {total} replicates failed ({failures}); "
            f"at most {FAILURE_TOLERANCE:.0%} may be excluded"
        )
    names = list(truth_map)
    tv = np.array([truth_map[k] for k in names])
    mean = np.array([o.mean for o in ok])
    sd = np.array([o.sd for o in ok])
    lo = np.array([o.lower for o in ok])
    hi = np.array([o.upper for o in ok])
    alphas = np.array([o.alpha for o in ok])
    pw = pw_med = None
    if ok and ok[0].pointwise is not None:
        trip = np.array([o.pointwise for o in ok])
        pw = tuple(float(v) for v in trip.mean(axis=0))
        pw_med = trip[:, 1]
    return MethodMetrics(
        method=method,
        parameters=names,
        avg_power=float(alphas.mean()),
        prob_complete_borrow=float(np.mean(alphas > alpha_c)),
        prob_discard=float(np.mean(alphas < alpha_ic)),
        avg_bias=np.abs(mean - tv).mean(axis=0),
        avg_posterior_sd=sd.mean(axis=0),
        coverage_probability=((lo <= tv) & (tv <= hi)).mean(axis=0),
        avg_interval_length=(hi - lo).mean(axis=0),
        replicates_ok=len(ok),
        failures=failures,
        alphas=alphas,
        pointwise_summary=pw,
        pointwise_medians=pw_med,
    )


@dataclass
class PointReport:
    grid_value: Any
    n: int
    m: int
    methods: dict
    panel: Optional[str] = None

    def __getitem__(self, method) -> MethodMetrics:
        return self.methods[method]


@dataclass
class MetricsReport:
    name: str
    seed: int
    axis: Optional[str]
    points: list
    spec: dict

    def point(self, value, panel=None) -> PointReport:
        for p in self.points:
            if p.grid_value == value and p.panel == panel:
                return p
        raise KeyError((value, panel))

    def curve(self, method, attr="avg_power", panel=None) -> np.ndarray:
        return np.array([getattr(p.methods[method], attr) for p in self.points if p.panel == panel])

    def rows(self) -> list:
        lead = self.axis or "point"
        panels = any(p.panel is not None for p in self.points)
        out = []
        for p in self.points:
            head = {lead: p.grid_value, **({"panel": p.panel} if panels else {}), "n": p.n, "m": p.m}
            for mm in p.methods.values():
                for r in mm.rows():
                    out.append({**head, **r})
        return out

    def digest(self) -> list:
        """One short line per grid point."""
        lines = []
        for p in self.points:
            parts = [f"{k}: alpha={v.avg_power:.3f}" for k, v in p.methods.items()]
            where = f"[{p.panel}] " if p.panel is not None else ""
            lines.append(f"{where}{self.axis or 'point'}={p.grid_value}  " + "  ".join(parts))
        return lines

    def summary(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "axis": self.axis,
            "version": __version__,
            "scenario": self.spec,
            "points": [
                {
                    "grid_value": p.grid_value,
                    "panel": p.panel,
                    "n": p.n,
                    "m": p.m,
                    "methods": {
                        k: {
                            "avg_power": v.avg_power,
                            "prob_complete_borrow": v.prob_complete_borrow,
                            "prob_discard": v.prob_discard,
                            "pointwise_summary": list(v.pointwise_summary) if v.pointwise_summary else None,
                            "replicates_ok": v.replicates_ok,
                            "failures": v.failures,
                            "estimation": v.rows(),
                        }
                        for k, v in p.methods.items()
                    },
                }
                for p in self.points
            ],
        }

    def write(self, out_dir) -> tuple:
        """Write ``scenario-<name>-<seed>.csv`` and the matching ``.json`` summary."""
        os.makedirs(out_dir, exist_ok=True)
        stem = os.path.join(out_dir, f"scenario-{self.name}-{self.seed}")
        rows = self.rows()
        with open(stem + ".csv", "w", newline="", encoding="utf-8") as fh:
            wr = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            wr.writeheader()
            for r in rows:
                wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        with open(stem + ".json", "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return stem + ".csv", stem + ".json"


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------

def _run_point(spec: ScenarioSpec, point: PointConfig, grid_value) -> PointReport:
    cfg = CalibrationConfig(n_current=point.n, **spec.calibration)
    curve = solve_sigmoid(cfg)
    jobs = [(spec, point, curve, r) for r in range(spec.replicates)]
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as ex:
            results = list(ex.map(_replicate_worker, jobs, chunksize=max(1, len(jobs) // (4 * spec.workers))))
    else:
        results = [_replicate_worker(j) for j in jobs]
    tmap = truth(spec.endpoint, point)
    methods = {
        mth: aggregate(mth, [r[mth] for r in results], tmap, cfg.alpha_c, cfg.alpha_ic)
        for mth in spec.methods
    }
    return PointReport(grid_value, point.n, point.m, methods)


def run_scenario(spec: ScenarioSpec) -> MetricsReport:
    """Run one scenario; a sweep is delegated to :func:`run_sweep`.

    With ``panels`` the scenario (or its sweep) is repeated once per panel
    override and the points are concatenated, each tagged with its panel label.
    """
    if spec.panels is not None:
        points = []
        for pnl in spec.panels:
            sub = run_scenario(spec.panel_spec(pnl))
            for p in sub.points:
                p.panel = str(pnl["label"])
            points.extend(sub.points)
        return MetricsReport(spec.name, spec.seed, spec.sweep.axis if spec.sweep else None, points, spec.as_dict())
    if spec.sweep is not None:
        return run_sweep(spec)
    pt = _run_point(spec, resolve_point(spec), None)
    return MetricsReport(spec.name, spec.seed, None, [pt], spec.as_dict())


def run_sweep(spec: ScenarioSpec) -> MetricsReport:
    if spec.sweep is None:
        raise ValidationError("sweep: the scenario has no sweep axis")
    points = [
        _run_point(spec, resolve_point(spec, raw), label)
        for raw, label in zip(spec.sweep.values, spec.sweep.labels())
    ]
    return MetricsReport(spec.name, spec.seed, spec.sweep.axis, points, spec.as_dict())


@dataclass
class UniformityResult:
    naive: np.ndarray
    marginal: np.ndarray
    ks_statistic: float
    ks_pvalue: float
    statistic_T: str

    @property
    def marginal_sd(self) -> float:
        return float(np.std(self.marginal, ddof=1)) if self.marginal.size > 1 else 0.0

    def histogram(self, bins: int = 20):
        return np.histogram(self.naive, bins=bins, range=(0.0, 1.0))

    def as_dict(self) -> dict:
        counts, edges = self.histogram()
        return {
            "pairs": int(self.naive.size),
            "statistic_T": self.statistic_T,
            "ks_statistic": self.ks_statistic,
            "ks_pvalue": self.ks_pvalue,
            "naive_sd": float(np.std(self.naive, ddof=1)) if self.naive.size > 1 else 0.0,
            "marginal_sd": self.marginal_sd,
            "histogram": {"edges": [float(e) for e in edges], "counts": [int(c) for c in counts]},
        }


def run_uniformity_demo(
    n: int = 50,
    m: int = 50,
    pairs: int = 500,
    rng: Optional[RngStream] = None,
    statistic_T="mean",
    R: int = 2000,
    mu: float = 20.0,
    sigma: float = 0.5,
) -> UniformityResult:
    """Whole-vector p-values for congruent pairs, next to the marginal p_CM.

    Both arms are drawn from N(mu, sigma^2) with the variance treated as known.
    The marginal values use the closed form with the likelihood statistic.
    """
    if pairs < 1:
        raise ValidationError(f"pairs must be positive, got {pairs}")
    rng = rng or RngStream(0)
    model = EndpointModel("normal_known_var", sigma**2, sigma**2)
    point = PointConfig(n, m, {"mu_c": mu, "mu_h": mu, "sigma_c": sigma, "sigma_h": sigma})
    naive = np.empty(pairs)
    marg = np.empty(pairs)
    for k in range(pairs):
        rep = RngStream(rng.seed, rng.stream_id, rng.path + (k,))
        hist, curr = generate_pair("normal_known_var", point, rep)
        naive[k] = pcm_naive_vector(hist, curr, model, statistic_T, R, rep.child(MC))
        marg[k] = pcm_closed(hist, curr, model, "lik").global_p
    ks = stats.kstest(naive, "uniform")
    label = statistic_T if isinstance(statistic_T, str) else getattr(statistic_T, "__name__", "callable")
    return UniformityResult(naive, marg, float(ks.statistic), float(ks.pvalue), label)
