"""Command-line interface: ``ppdcpp pcm|calibrate|analyze|simulate|uniformity``.

Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 I/O failure.
Errors are reported on stderr as a JSON object.  Every JSON result carries a
``provenance`` block echoing the configuration, the seed and the version.
"""
from __future__ import annotations

import argparse
import json
import os
import secrets
import sys
from importlib import resources

from . import __version__
from .calibration import CalibrationConfig, emit_curve, power_from_s, solve_sigmoid, unequal_size_cap
from .congruence import pcm_closed, pcm_closed_regression, pcm_monte_carlo
from .csvio import dumps_json, ingest_csv, write_json, write_table
from .data import ENDPOINT_KINDS, EndpointModel
from .errors import DataFileError, PpdcppError, ValidationError
from .posterior import (
    PowerAssignment,
    assign_pointwise_powers,
    fit_linear_regression,
    fit_normal_known_var,
    fit_normal_unknown_var,
    fit_poisson_regression_mh,
)
from .simharness import ScenarioSpec, run_scenario, run_uniformity_demo
from .stats_core import CI_METHODS, RngStream

OUTPUT_DIR_ENV = "PPDCPP_OUTPUT_DIR"


class StageError(Exception):
    """Wraps a library error with the pipeline stage it came from."""

    def __init__(self, stage, exc):
        super().__init__(str(exc))
        self.stage = stage
        self.exc = exc


class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, et, exc, tb):
        if isinstance(exc, PpdcppError):
            raise StageError(self.name, exc) from exc
        return False


# ---------------------------------------------------------------------------
# Argument groups
# ---------------------------------------------------------------------------

def _csv_list(s):
    return [c.strip() for c in s.split(",") if c.strip()] if s else []


def _add_data_args(p):
    g = p.add_argument_group("data")
    g.add_argument("--historical", required=True, help="historical CSV file")
    g.add_argument("--current", required=True, help="current CSV file")
    g.add_argument("--response", default="y", help="response column (default: y)")
    g.add_argument("--covariates", type=_csv_list, default=[], help="comma-separated covariate columns")
    g.add_argument("--endpoint", choices=ENDPOINT_KINDS, default="normal_unknown_var")
    g.add_argument("--sigma2-h", type=float, help="known historical variance (normal_known_var)")
    g.add_argument("--sigma2-c", type=float, help="known current variance (normal_known_var)")


def _add_pcm_args(p):
    g = p.add_argument_group("congruence")
    g.add_argument("--statistic", choices=("lik", "obs"), default="lik")
    g.add_argument("--estimator", choices=("thm", "sim"), default="thm")
    g.add_argument("--mode", choices=("global", "pointwise"), default="global")
    g.add_argument("--mc-draws", type=int, default=5000, help="Monte Carlo draws R")
    g.add_argument("--seed", type=int, help="RNG seed (generated and printed when omitted)")


def _add_calibration_args(p):
    g = p.add_argument_group("calibration")
    g.add_argument("--alpha-c", type=float, default=0.99)
    g.add_argument("--alpha-ic", type=float, default=0.01)
    g.add_argument("--tau", type=float, default=2.0)
    g.add_argument("--ci-method", choices=CI_METHODS, default="clopper_pearson")
    g.add_argument("--ci-level", type=float, default=0.95)
    g.add_argument("--calibration-mode", choices=("k_adjusted", "unadjusted"), default="k_adjusted")
    g.add_argument("--k1-zero", action="store_true", help="use k1 = 0 (floored at 1/(2 n tau))")


def _add_output_arg(p):
    p.add_argument("--output", help="write the result here instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ppdcpp", description="Congruence-calibrated power priors.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pcm", help="congruence measure between two datasets")
    _add_data_args(p)
    _add_pcm_args(p)
    p.add_argument("--flip", action="store_true", help="reverse the Monte Carlo indicator")
    _add_output_arg(p)

    p = sub.add_parser("calibrate", help="sigmoid curve table (s, alpha) for both calibration modes")
    p.add_argument("--n-current", type=int, required=True)
    _add_calibration_args(p)
    p.add_argument("--grid-points", type=int, default=101)
    p.add_argument("--output", help="CSV path for the curve table (metadata JSON goes to stdout)")

    p = sub.add_parser("analyze", help="p_CM, calibration and power-prior fit")
    _add_data_args(p)
    _add_pcm_args(p)
    _add_calibration_args(p)
    p.add_argument("--cap", action="store_true", help="cap the power at n/m")
    p.add_argument("--power", type=float, help="skip calibration and use this global power")
    p.add_argument("--iters", type=int, default=6500)
    p.add_argument("--burn-in", type=int, default=1500)
    p.add_argument("--proposal-scale", type=float, help="fixed MH proposal scale (Poisson)")
    p.add_argument(
        "--sigma-prior-power",
        type=float,
        help="q in the (sigma^2)^-q initial prior for linear regression; default (p+2)/2, 1 gives 1/sigma^2",
    )
    p.add_argument("--draws-csv", help="dump posterior draws to this CSV")
    _add_output_arg(p)

    p = sub.add_parser("simulate", help="run a scenario JSON file or a bundled scenario")
    p.add_argument("scenario", help="path to a scenario JSON, or a bundled name (fig2, table1, a5_uniformity)")
    p.add_argument("--output-dir", help=f"output directory (default: ${OUTPUT_DIR_ENV} or .)")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--replicates", type=int, help="override the replicate count")
    p.add_argument("--workers", type=int, help="worker processes")

    p = sub.add_parser("uniformity", help="null distribution of the whole-vector p-value")
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--m", type=int, default=50)
    p.add_argument("--pairs", type=int, default=500)
    p.add_argument("--statistic-t", default="mean", help="max, mean or quantile:q")
    p.add_argument("--mc-draws", type=int, default=2000)
    p.add_argument("--seed", type=int)
    _add_output_arg(p)
    return parser


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _seed(args):
    if getattr(args, "seed", None) is None:
        args.seed = secrets.randbits(63)
        print(f"seed: {args.seed}", file=sys.stderr)
    return args.seed


def _provenance(args) -> dict:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    return {"command": args.command, "config": cfg, "seed": getattr(args, "seed", None), "version": __version__}


def _emit(args, obj):
    text = dumps_json(obj)
    if getattr(args, "output", None):
        with _Stage("output"):
            write_json(args.output, obj)
    else:
        sys.stdout.write(text)


def _model(args) -> EndpointModel:
    if args.endpoint == "normal_known_var":
        return EndpointModel(args.endpoint, args.sigma2_h, args.sigma2_c)
    return EndpointModel(args.endpoint)


def _check_combo(args):
    regression = args.endpoint in ("linear_regression", "poisson_regression")
    if regression and not args.covariates:
        raise ValidationError(f"--endpoint {args.endpoint} needs --covariates")
    if not regression and args.covariates:
        raise ValidationError(f"--endpoint {args.endpoint} does not take covariates")
    if args.mode == "pointwise" and args.endpoint != "linear_regression":
        raise ValidationError("--mode pointwise requires --endpoint linear_regression")
    if args.endpoint == "poisson_regression" and args.estimator != "sim":
        raise ValidationError("--endpoint poisson_regression requires --estimator sim")
    if args.mode == "pointwise" and args.estimator != "thm":
        raise ValidationError("--mode pointwise uses the closed form; pass --estimator thm")


def _load(args):
    with _Stage("ingest"):
        hist = ingest_csv(args.historical, args.response, args.covariates, "historical")
        curr = ingest_csv(args.current, args.response, args.covariates, "current")
    return hist, curr


def _estimate(args, hist, curr, model, rng):
    if args.mode == "pointwise":
        return pcm_closed_regression(hist, curr, "score_hist_given_current", args.statistic)
    if args.estimator == "thm":
        return pcm_closed(hist, curr, model, args.statistic)
    return pcm_monte_carlo(hist, curr, model, args.statistic, args.mc_draws, rng, getattr(args, "flip", False))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_pcm(args):
    with _Stage("config"):
        _check_combo(args)
        model = _model(args)
    seed = _seed(args) if args.estimator == "sim" else args.seed
    hist, curr = _load(args)
    with _Stage("pcm"):
        est = _estimate(args, hist, curr, model, RngStream(seed) if seed is not None else None)
    out = {"provenance": _provenance(args), **est.as_dict()}
    _emit(args, out)
    return 0


def _calibration_config(args, n, mode=None) -> CalibrationConfig:
    return CalibrationConfig(
        n_current=n,
        alpha_c=args.alpha_c,
        alpha_ic=args.alpha_ic,
        tau=args.tau,
        ci_method=args.ci_method,
        ci_level=args.ci_level,
        mode=mode or args.calibration_mode,
        k1_zero=args.k1_zero,
    )


def cmd_calibrate(args):
    with _Stage("calibrate"):
        tables = {}
        for mode in ("k_adjusted", "unadjusted"):
            tables[mode] = emit_curve(solve_sigmoid(_calibration_config(args, args.n_current, mode)), args.grid_points)
    s = tables["k_adjusted"].s
    rows = zip(s, tables["k_adjusted"].alpha, tables["unadjusted"].alpha)
    cols = ["s", "alpha_k_adjusted", "alpha_unadjusted"]
    if args.output:
        with _Stage("output"):
            write_table(args.output, cols, rows)
        meta = {"provenance": _provenance(args), "curves": {k: t.metadata for k, t in tables.items()}}
        sys.stdout.write(dumps_json(meta))
    else:
        write_table(None, cols, rows, fh=sys.stdout)
    return 0


def cmd_analyze(args):
    with _Stage("config"):
        _check_combo(args)
        model = _model(args)
        if args.power is not None and args.mode == "pointwise":
            raise ValidationError("--power sets a global power; drop --mode pointwise")
        if args.sigma_prior_power is not None and args.endpoint != "linear_regression":
            raise ValidationError("--sigma-prior-power applies to --endpoint linear_regression only")
    seed = _seed(args)
    root = RngStream(seed)
    hist, curr = _load(args)
    out = {"provenance": _provenance(args)}
    cap = unequal_size_cap(curr.size, hist.size) if args.cap else None
    if args.power is not None:
        with _Stage("config"):
            power = PowerAssignment.global_(args.power)
        out["pcm"] = None
        out["curve"] = None
    else:
        with _Stage("pcm"):
            est = _estimate(args, hist, curr, model, root.child(0))
        out["pcm"] = est.as_dict()
        with _Stage("calibrate"):
            curve = solve_sigmoid(_calibration_config(args, curr.size))
            if args.mode == "pointwise":
                power = assign_pointwise_powers(hist, curr, curve, args.statistic, cap)
            else:
                power = PowerAssignment.global_(power_from_s(curve, est.global_s, cap))
        out["curve"] = curve.as_dict()
    out["cap"] = cap
    out["power"] = power.as_dict()
    draws = None
    with _Stage("fit"):
        if args.endpoint == "normal_known_var":
            summary = fit_normal_known_var(hist, curr, model.sigma2_h, model.sigma2_c, power)
        elif args.endpoint == "normal_unknown_var":
            draws, summary = fit_normal_unknown_var(hist, curr, power, args.iters, args.burn_in, root.child(1))
        elif args.endpoint == "linear_regression":
            draws, summary = fit_linear_regression(
                hist, curr, power, args.iters, args.burn_in, root.child(1), args.sigma_prior_power
            )
        else:
            draws, summary = fit_poisson_regression_mh(
                hist, curr, power, args.iters, args.burn_in, args.proposal_scale, root.child(1)
            )
    out["posterior"] = summary.as_dict()
    if args.draws_csv:
        if draws is None:
            raise StageError("output", ValidationError("the known-variance fit is analytic and has no draws"))
        with _Stage("output"):
            try:
                draws.to_csv(args.draws_csv)
            except OSError as exc:
                raise DataFileError(f"{args.draws_csv}: {exc}") from None
    _emit(args, out)
    return 0


def _resolve_scenario(name):
    if os.path.exists(name):
        return name
    bundled = resources.files("ppdcpp") / "scenarios" / f"{name}.json"
    if bundled.is_file():
        return str(bundled)
    raise DataFileError(f"{name}: no such scenario file or bundled scenario")


def cmd_simulate(args):
    with _Stage("config"):
        path = _resolve_scenario(args.scenario)
        with open(path, encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ValidationError(f"{path}: $ must be a JSON object")
        kind = raw.pop("kind", "scenario")
        for key in ("seed", "replicates", "workers"):
            if getattr(args, key, None) is not None:
                raw[key] = getattr(args, key)
        if raw.get("seed") is None:
            raw["seed"] = _seed(args)
        args.seed = raw["seed"]
    out_dir = args.output_dir or os.environ.get(OUTPUT_DIR_ENV) or "."
    if kind == "uniformity":
        return _simulate_uniformity(args, raw, out_dir)
    with _Stage("config"):
        spec = ScenarioSpec.from_dict(raw)
    with _Stage("simulate"):
        report = run_scenario(spec)
    for line in report.digest():
        print(line)
    with _Stage("output"):
        try:
            csv_path, json_path = report.write(out_dir)
        except OSError as exc:
            raise DataFileError(f"{out_dir}: {exc}") from None
        summary = report.summary()
        summary["provenance"] = _provenance(args)
        write_json(json_path, summary)
    print(f"wrote {csv_path} and {json_path}")
    return 0


def _simulate_uniformity(args, raw, out_dir):
    allowed = {"name", "n", "m", "pairs", "statistic_T", "mc_draws", "seed", "replicates", "workers"}
    extra = set(raw) - allowed
    if extra:
        raise StageError("config", ValidationError(f"$: unknown uniformity fields {sorted(extra)}"))
    pairs = raw.get("replicates", raw.get("pairs", 500))
    with _Stage("simulate"):
        res = run_uniformity_demo(
            raw.get("n", 50), raw.get("m", 50), pairs, RngStream(raw["seed"]),
            raw.get("statistic_T", "mean"), raw.get("mc_draws", 2000),
        )
    name = raw.get("name", "uniformity")
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.join(out_dir, f"scenario-{name}-{raw['seed']}")
    counts, edges = res.histogram()
    with _Stage("output"):
        write_table(stem + ".csv", ["bin_lower", "bin_upper", "count"], zip(edges[:-1], edges[1:], counts))
        write_json(stem + ".json", {"provenance": _provenance(args), **res.as_dict()})
    print(f"pairs={res.naive.size} ks={res.ks_statistic:.4f} p={res.ks_pvalue:.4f} marginal_sd={res.marginal_sd:.4f}")
    print(f"wrote {stem}.csv and {stem}.json")
    return 0


def cmd_uniformity(args):
    seed = _seed(args)
    with _Stage("simulate"):
        res = run_uniformity_demo(args.n, args.m, args.pairs, RngStream(seed), args.statistic_t, args.mc_draws)
    out = {"provenance": _provenance(args), **res.as_dict(), "naive_values": [float(v) for v in res.naive]}
    _emit(args, out)
    return 0


COMMANDS = {
    "pcm": cmd_pcm,
    "calibrate": cmd_calibrate,
    "analyze": cmd_analyze,
    "simulate": cmd_simulate,
    "uniformity": cmd_uniformity,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except StageError as err:
        exc = err.exc
        payload = {"error": {"stage": err.stage, "type": type(exc).__name__, "message": str(exc)},
                   "exit_code": exc.exit_code}
        sys.stderr.write(dumps_json(payload))
        return exc.exit_code
    except PpdcppError as exc:
        payload = {"error": {"stage": None, "type": type(exc).__name__, "message": str(exc)},
                   "exit_code": exc.exit_code}
        sys.stderr.write(dumps_json(payload))
        return exc.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
