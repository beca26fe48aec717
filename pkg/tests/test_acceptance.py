"""Acceptance suite: one test per criterion, each logging a pass/fail line.

The simulation criteria run the full replicate counts on one CPU; together
they take several minutes.  Run just this file with ``pytest -v -s
tests/test_acceptance.py`` to see each line as it is produced; the lines are
also repeated in the terminal summary.
"""
import json
import math
import os
import time

import numpy as np
import pytest
from scipy import stats

from acceptance_log import record
from ppdcpp import congruence as C
from ppdcpp.calibration import CalibrationConfig, power_from_s, solve_sigmoid
from ppdcpp.cli import main
from ppdcpp.data import Dataset, EndpointModel
from ppdcpp.errors import CalibrationInfeasibleError
from ppdcpp.posterior import (
    PowerAssignment,
    fit_linear_regression,
    fit_normal_known_var,
    fit_normal_unknown_var,
    fit_poisson_regression_mh,
)
from ppdcpp.simharness import ScenarioSpec, run_scenario, run_uniformity_demo
from ppdcpp.stats_core import RngStream, SymmetricBvnSpec, orthant_double, orthant_quadrature_oracle

pytestmark = pytest.mark.slow

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def binom_se(p, k):
    return math.sqrt(max(p * (1 - p), 0.0) / k)


def batch_means_se(x, batches=50):
    b = np.asarray(x)[: len(x) // batches * batches].reshape(batches, -1).mean(axis=1)
    return b.std(ddof=1) / math.sqrt(batches)


def test_criterion_01_orthant_oracle():
    g = np.random.default_rng(101)
    t0 = time.perf_counter()
    errs = []
    for _ in range(200):
        var = float(np.exp(g.uniform(np.log(0.05), np.log(20))))
        rho = float(g.uniform(-0.99, 0.99))
        delta = float(g.uniform(-4, 4)) * math.sqrt(var)
        spec = SymmetricBvnSpec(delta, var, rho * var)
        errs.append(abs(orthant_double(spec) - orthant_quadrature_oracle(spec)))
    elapsed = time.perf_counter() - t0
    ok = max(errs) < 1e-7 and elapsed < 10
    record(1, "orthant vs quadrature oracle", ok, f"max abs error {max(errs):.2e} over 200 specs in {elapsed:.1f}s")
    assert ok


def test_criterion_02_closed_form_vs_monte_carlo():
    # Current and historical samples are evenly spaced normal quantiles, so the
    # sample moments match their targets and the closed form's plug-in
    # approximations are accurate to well under one Monte Carlo SE.
    g = np.random.default_rng(2024)
    t0 = time.perf_counter()
    within = 0
    worst = 0.0
    R = 5000
    for k in range(100):
        n = int(g.integers(300, 1001))
        m = int(g.integers(2000, 5001))
        sc = g.uniform(0.3, 2)
        sh = sc * np.exp(g.uniform(np.log(0.5), np.log(2)))
        mu_c = g.uniform(-5, 5)
        shift = g.uniform(0, 3) * sc if k % 2 else 0.0
        yh = mu_c + shift + sh * stats.norm.ppf((np.arange(m) + 0.5) / m)
        yc = mu_c + sc * stats.norm.ppf((np.arange(n) + 0.5) / n)
        model = EndpointModel("normal_known_var", sh**2, sc**2) if k % 4 < 2 else EndpointModel("normal_unknown_var")
        hist, curr = Dataset(yh, label="historical"), Dataset(yc)
        thm = C.pcm_closed(hist, curr, model).p_cm
        sim = C.pcm_monte_carlo(hist, curr, model, R=R, rng=RngStream(7, k)).p_cm
        z = abs(sim - thm) / (binom_se(thm, n * R) + 0.5 / (n * R))
        worst = max(worst, z)
        within += z <= 4
    elapsed = time.perf_counter() - t0
    ok = within >= 99 and elapsed < 120
    record(2, "closed form vs Monte Carlo p_CM", ok, f"{within}/100 within 4 SE (worst {worst:.2f} SE) in {elapsed:.0f}s")
    assert ok


def test_criterion_03_large_sample_limits():
    g = np.random.default_rng(3)
    m = n = 100_000
    sigma = 0.5
    hist = Dataset(g.normal(20, sigma, m), label="historical")
    curr = Dataset(g.normal(20, sigma, n))
    shifted = Dataset(g.normal(20 + 8 * sigma, sigma, m), label="historical")
    model = EndpointModel("normal_unknown_var")
    p_cong = C.pcm_closed(hist, curr, model).p_cm
    p_shift = C.pcm_closed(shifted, curr, model).p_cm
    ok = abs(p_cong - 0.5) <= 0.02 and p_shift >= 0.999
    record(3, "large-m limits of p_CM", ok, f"congruent {p_cong:.4f}, 8-sigma shift {p_shift:.6f}")
    assert ok


def test_criterion_04_calibration_closed_form():
    g = np.random.default_rng(4)
    worst = 0.0
    solved = 0
    for _ in range(1000):
        cfg = CalibrationConfig(
            n_current=int(g.integers(2, 5000)),
            alpha_c=float(g.uniform(0.6, 0.999)),
            alpha_ic=float(g.uniform(0.001, 0.4)),
            tau=float(g.uniform(1.2, 6)),
            ci_method=str(g.choice(["wald", "clopper_pearson"])),
            ci_level=float(g.uniform(0.8, 0.99)),
        )
        try:
            c = solve_sigmoid(cfg)
        except CalibrationInfeasibleError:
            continue
        solved += 1
        worst = max(worst, abs(power_from_s(c, c.g1) - cfg.alpha_c), abs(power_from_s(c, c.g2) - cfg.alpha_ic))
    limit = solve_sigmoid(CalibrationConfig(10_000, tau=2, ci_method="wald"))
    ok = worst < 1e-10 and solved >= 900 and abs(limit.g2 - 0.25) <= 1e-3
    record(4, "calibration back-substitution and Wald limit", ok, f"max residual {worst:.1e} over {solved} configs; g2 = {limit.g2:.6f}")
    assert ok


def test_criterion_05_borrowing_consistency():
    t0 = time.perf_counter()
    out = {}
    for label, mu_h in (("congruent", 20.0), ("shift", 24.0)):
        spec = ScenarioSpec(
            name="consistency", endpoint="normal_known_var", n=200, m=200,
            methods=["thm_lik", "sim_lik"], replicates=500, params={"mu_h": mu_h}, seed=11,
        )
        out[label] = run_scenario(spec).points[0]
    elapsed = time.perf_counter() - t0
    parts, ok = [], elapsed < 180
    for mth in ("thm_lik", "sim_lik"):
        c, s = out["congruent"][mth], out["shift"][mth]
        ok &= c.avg_power >= 0.95 and c.prob_complete_borrow >= 0.8
        ok &= s.avg_power <= 0.01 and s.prob_discard >= 0.95
        parts.append(f"{mth} congruent {c.avg_power:.3f}/{c.prob_complete_borrow:.2f}, shift {s.avg_power:.2e}/{s.prob_discard:.2f}")
    record(5, "borrowing consistency", ok, "; ".join(parts) + f" in {elapsed:.0f}s")
    assert ok


def test_criterion_06_figure_shape():
    grid = [-3.0, -2.0, -1.0, -0.1, 0.0, 0.1, 1.0, 2.0, 3.0]  # sigma = 0.5
    methods = ["thm_lik", "thm_obs", "sim_lik", "sim_obs"]
    spec = ScenarioSpec(
        name="shape", endpoint="normal_known_var", n=50, m=50, methods=methods,
        replicates=500, seed=3, sweep={"axis": "mean_diff", "values": grid},
    )
    t0 = time.perf_counter()
    rep = run_scenario(spec)
    elapsed = time.perf_counter() - t0
    d = np.abs(np.array(grid)) / 0.5
    ok = elapsed < 600
    parts = []
    for mth in methods:
        a = rep.curve(mth)
        near, far = a[d <= 0.2].min(), a[d >= 6].max()
        mono = True
        for side in (np.array(grid) <= 0, np.array(grid) >= 0):
            idx = np.where(side)[0]
            idx = idx[np.argsort(d[idx])]
            for i, j in zip(idx[:-1], idx[1:]):
                se = max(binom_se(a[i], 500), binom_se(a[j], 500))
                mono &= a[j] <= a[i] + 2 * se
        ok &= near >= 0.8 and far <= 0.02 and mono
        parts.append(f"{mth} min near {near:.3f} max far {far:.4f} monotone {mono}")
    record(6, "power curve shape over mean difference", ok, "; ".join(parts) + f" in {elapsed:.0f}s")
    assert ok


def regression_point(methods, beta_h):
    spec = ScenarioSpec(
        name="table", endpoint="linear_regression", n=50, m=50, methods=methods,
        replicates=500, params={"beta_h": list(beta_h)}, seed=5,
    )
    return run_scenario(spec).points[0]


def test_criterion_07_regression_congruent_row():
    mm = regression_point(["thm_lik"], (50, 8, 0.5))["thm_lik"]
    bias = mm.avg_bias
    cov = mm.coverage_probability
    ok = 0.95 <= mm.avg_power <= 1.0
    ok &= abs(bias[0] - 0.25) <= 0.3 * 0.25 and abs(bias[1] - 0.08) <= 0.3 * 0.08
    ok &= bool(np.all((cov >= 0.92) & (cov <= 0.98)))
    record(7, "regression congruent row", ok, f"power {mm.avg_power:.3f}, bias ({bias[0]:.3f}, {bias[1]:.3f}), coverage {np.round(cov, 3).tolist()}")
    assert ok


def test_criterion_08_regression_discard_row():
    methods = ["thm_lik", "thm_obs", "sim_lik", "sim_obs"]
    pt = regression_point(methods + ["no_borrow"], (40, 8, 0.5))
    ref = pt["no_borrow"].rounded_summary(2)
    ok = True
    parts = []
    for mth in methods:
        mm = pt[mth]
        same = mm.rounded_summary(2) == ref
        ok &= mm.avg_power <= 0.005 and same
        fields = ("bias", "sd", "coverage", "length")
        diff = [
            f"{par} {k} {v} vs {w}"
            for par, row in mm.rounded_summary(2).items()
            for k, v, w in zip(fields, row, ref[par])
            if v != w
        ]
        parts.append(f"{mth} power {mm.avg_power:.1e}" + ("" if same else f" differs: {', '.join(diff)}"))
    record(8, "regression discard row equals no-borrow", ok, "; ".join(parts))
    assert ok


def test_criterion_09_regression_pointwise_row():
    pt = regression_point(["pw_lik", "no_borrow"], (50, 0, 0.5))
    trip = np.array(pt["pw_lik"].pointwise_summary)
    b_pw, b_nb = pt["pw_lik"].avg_bias[0], pt["no_borrow"].avg_bias[0]
    ok = bool(np.all(np.abs(trip - np.array([0.0, 0.45, 0.99])) <= 0.15)) and b_pw < b_nb
    record(9, "pointwise borrowing under covariate shift", ok, f"(min, median, max) {np.round(trip, 3).tolist()}, beta0 bias {b_pw:.3f} vs {b_nb:.3f}")
    assert ok


def test_criterion_10_uniformity():
    res = run_uniformity_demo(n=50, m=50, pairs=500, rng=RngStream(20240603), statistic_T="mean", R=2000)
    ok = res.ks_pvalue > 0.01 and res.marginal_sd < 0.14
    record(10, "naive p-value uniformity and marginal concentration", ok, f"KS p {res.ks_pvalue:.3f}, marginal SD {res.marginal_sd:.4f}")
    assert ok


def test_criterion_11_variance_sweep():
    spec = ScenarioSpec(
        name="variance", endpoint="normal_unknown_var", n=50, m=50, methods=["thm_obs", "thm_lik"],
        replicates=500, seed=5, sweep={"axis": "sigma_h", "values": [0.5, 0.75, 1.0, 1.25, 1.5]},
    )
    rep = run_scenario(spec)
    obs, lik = rep.curve("thm_obs"), rep.curve("thm_lik")
    ok = np.ptp(obs) < 0.05 and lik[0] - lik[-1] >= 0.3
    record(11, "variance sweep", ok, f"obs range {np.ptp(obs):.4f} {np.round(obs, 3).tolist()}; lik drop {lik[0] - lik[-1]:.3f}")
    assert ok


def covariate_shift_sweep():
    spec = ScenarioSpec(
        name="covshift", endpoint="linear_regression", n=50, m=50, methods=["pw_lik"],
        replicates=500, seed=5, params={"beta_h": [50, 0, 0.5]},
        sweep={"axis": "x1_p_h", "values": [0.3, 0.5, 0.7]},
    )
    return run_scenario(spec)


@pytest.fixture(scope="module")
def covshift():
    return covariate_shift_sweep()


def test_criterion_12_covariate_shift(covshift):
    parts, ok = [], True
    for p in covshift.points:
        med = p["pw_lik"].pointwise_summary[1]
        ok &= abs(med - (1 - p.grid_value)) <= 0.1
        parts.append(f"p={p.grid_value}: median alpha_i {med:.3f} (target {1 - p.grid_value:.1f})")
    record(12, "covariate-shift sweep median", ok, "; ".join(parts))
    assert ok


def test_covariate_shift_mean_power_tracks_untreated_share(covshift):
    # Rows with x1 = 1 are incongruent and rows with x1 = 0 congruent, so the
    # power distribution is bimodal and its mean follows the untreated share.
    for p in covshift.points:
        assert abs(p["pw_lik"].avg_power - (1 - p.grid_value)) <= 0.1


def _reduction_pairs():
    g = np.random.default_rng(13)
    normal = (Dataset(g.normal(21, 0.5, 40), label="historical"), Dataset(g.normal(20, 0.5, 30)))
    Xh = np.column_stack([np.ones(50), g.binomial(1, 0.5, 50), g.integers(40, 71, 50)])
    Xc = np.column_stack([np.ones(50), g.binomial(1, 0.5, 50), g.integers(40, 71, 50)])
    reg = (
        Dataset(Xh @ [49.5, 8, 0.5] + g.normal(0, 0.5, 50), Xh, "historical"),
        Dataset(Xc @ [50, 8, 0.5] + g.normal(0, 0.5, 50), Xc),
    )
    Ph = np.column_stack([np.ones(40), g.normal(size=40)])
    Pc = np.column_stack([np.ones(40), g.normal(size=40)])
    pois = (
        Dataset(g.poisson(np.exp(1.2 + 0.3 * Ph[:, 1])).astype(float), Ph, "historical"),
        Dataset(g.poisson(np.exp(1.0 + 0.3 * Pc[:, 1])).astype(float), Pc),
    )
    return normal, reg, pois


def test_criterion_13_reductions():
    normal, reg, pois = _reduction_pairs()
    checks = {}

    def pooled(hist, curr):
        X = None if curr.X is None else np.vstack([curr.X, hist.X])
        return Dataset(np.concatenate([curr.y, hist.y]), X)

    def filler(curr):
        X = None if curr.X is None else np.eye(1, curr.X.shape[1])
        return Dataset(np.array([1.0, 2.0]) if X is None else np.array([1.0]), X, "historical")

    # known variance: analytic
    h, c = normal
    for a, ref in ((0.0, c), (1.0, pooled(h, c))):
        got = fit_normal_known_var(h, c, 0.25, 0.25, PowerAssignment.global_(a))
        want = fit_normal_known_var(filler(ref), ref, 0.25, 0.25, PowerAssignment.global_(0.0))
        checks[f"normal_known_var a={a:g}"] = np.allclose(got.mean, want.mean, rtol=0, atol=1e-12) and np.allclose(got.sd, want.sd, rtol=0, atol=1e-15)

    # conjugate samplers: identical draws from the same stream
    for kind, fitter, (h, c) in (("normal_unknown_var", fit_normal_unknown_var, normal), ("linear_regression", fit_linear_regression, reg)):
        for a, ref in ((0.0, c), (1.0, pooled(h, c))):
            d1, _ = fitter(h, c, PowerAssignment.global_(a), rng=RngStream(8))
            d2, _ = fitter(filler(ref), ref, PowerAssignment.global_(0.0), rng=RngStream(8))
            checks[f"{kind} a={a:g}"] = bool(np.array_equal(d1.draws, d2.draws))

    # Metropolis: independent chains agree within 3 Monte Carlo SEs
    h, c = pois
    for a, ref in ((0.0, c), (1.0, pooled(h, c))):
        d1, _ = fit_poisson_regression_mh(h, c, PowerAssignment.global_(a), iters=21_500, burn_in=1500, rng=RngStream(8))
        d2, _ = fit_poisson_regression_mh(filler(ref), ref, PowerAssignment.global_(0.0), iters=21_500, burn_in=1500, rng=RngStream(9))
        ok = True
        for j in range(d1.draws.shape[1]):
            x, y = d1.draws[:, j], d2.draws[:, j]
            ok &= abs(x.mean() - y.mean()) <= 3 * math.hypot(batch_means_se(x), batch_means_se(y))
        checks[f"poisson_regression a={a:g}"] = ok
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    record(13, "reductions to no-borrow and pooling", ok, f"{len(checks) - len(failed)}/{len(checks)} checks" + (f"; failed {failed}" if failed else ""))
    assert ok


def test_criterion_14_real_data_recipes(tmp_path, capsys):
    # The real datasets are not redistributable; the README recipes are run
    # end to end on synthetic stand-ins with the same column layout.
    g = np.random.default_rng(14)

    def write(path, header, rows):
        with open(path, "w") as fh:
            fh.write(",".join(header) + "\n")
            for r in rows:
                fh.write(",".join(repr(float(v)) for v in r) + "\n")

    cols = ["weight_gain", "infant_male", "age_weeks", "mother_pneumo", "infant_hib"]
    for name, k in (("site_u.csv", 77), ("site_g.csv", 78)):
        X = np.column_stack([g.binomial(1, 0.5, k), g.uniform(20, 30, k), g.binomial(1, 0.5, k), g.binomial(1, 0.5, k)])
        y = 1.0 + X @ [0.3, 0.2, 0.0, -0.2] + g.normal(0, 0.6, k)
        write(tmp_path / name, cols, np.column_stack([y, X]))
    dose = np.repeat([0, 0.25, 0.5, 1, 2, 4], 10)
    counts = g.poisson(np.exp(3.3 - 0.1 * dose - 0.05 * dose**2))
    write(tmp_path / "cdubia_jan1992.csv", ["offspring", "dose", "dose_sq"], np.column_stack([counts, dose, dose**2]))
    write(tmp_path / "cdubia_apr1991_control.csv", ["offspring", "dose", "dose_sq"], np.column_stack([g.poisson(27, 10), np.zeros(10), np.zeros(10)]))

    readme = open(os.path.join(ROOT, "README.md")).read()
    recipes = []
    for block in readme.split("```")[1::2]:
        for line in block.replace("\\\n", " ").splitlines():
            if line.startswith("ppdcpp analyze") and ("site_u.csv" in line or "cdubia" in line):
                recipes.append(line.split())
    results = []
    cwd = os.getcwd()
    os.chdir(tmp_path)
    try:
        for argv in recipes:
            code = main(argv[1:])
            out = capsys.readouterr().out
            results.append((code, json.loads(out) if code == 0 else None))
    finally:
        os.chdir(cwd)
    ok = len(recipes) == 2 and all(code == 0 for code, _ in results)
    if ok:
        ok = all(0.0 <= r["power"]["alpha"] <= 1.0 and r["posterior"]["parameters"] for _, r in results)
    record(14, "real-data recipes run on synthetic stand-ins", ok, f"{len(recipes)} recipes, exit codes {[c for c, _ in results]}")
    assert ok
