import csv
import json
import os

import numpy as np
import pytest

from ppdcpp.errors import ScenarioFailure, ValidationError
from ppdcpp.simharness import (
    PointConfig,
    ScenarioSpec,
    aggregate,
    generate_pair,
    resolve_point,
    run_scenario,
    run_uniformity_demo,
)
from ppdcpp.stats_core import RngStream


def small_spec(**kw):
    base = dict(
        name="small",
        endpoint="normal_known_var",
        n=20,
        m=20,
        methods=["thm_lik", "thm_obs", "no_borrow", "pool"],
        replicates=40,
        seed=7,
    )
    base.update(kw)
    return ScenarioSpec(**base)


class TestSpecValidation:
    @pytest.mark.parametrize(
        "kw,path",
        [
            ({"endpoint": "poisson_regression"}, "endpoint"),
            ({"methods": ["thm_lik", "magic"]}, "methods[1]"),
            ({"methods": ["pw_lik"]}, "methods[0]"),
            ({"replicates": 0}, "replicates"),
            ({"params": {"mu_x": 1.0}}, "params"),
            ({"sweep": {"axis": "mean_diff", "values": [1.0, 0.0]}}, "sweep.values"),
            ({"sweep": {"axis": "colour", "values": [1.0]}}, "sweep.axis"),
            ({"panels": [{"n": 5}]}, "panels[0]"),
        ],
    )
    def test_messages_name_the_field(self, kw, path):
        with pytest.raises(ValidationError) as exc:
            small_spec(**kw)
        assert str(exc.value).startswith(path)

    def test_bad_calibration_rejected(self):
        with pytest.raises(ValidationError):
            small_spec(calibration={"tau": 0.5})

    def test_round_trip(self, tmp_path):
        spec = small_spec(sweep={"axis": "mean_diff", "values": [0.0, 1.0]})
        path = tmp_path / "s.json"
        path.write_text(json.dumps(spec.as_dict()))
        again = ScenarioSpec.from_json(path)
        assert again.as_dict() == spec.as_dict()

    def test_bundled_scenarios_load(self):
        from importlib import resources

        root = resources.files("ppdcpp") / "scenarios"
        for name in ("fig2.json", "table1.json"):
            ScenarioSpec.from_json(root / name)


class TestGeneration:
    def test_reproducible(self):
        pt = resolve_point(small_spec())
        a = generate_pair("normal_known_var", pt, RngStream(3, 5))
        b = generate_pair("normal_known_var", pt, RngStream(3, 5))
        assert a == b

    def test_common_random_numbers_across_grid(self):
        spec = small_spec(sweep={"axis": "mean_diff", "values": [0.0, 2.0]})
        h0, c0 = generate_pair(spec.endpoint, resolve_point(spec, 0.0), RngStream(1, 0))
        h2, c2 = generate_pair(spec.endpoint, resolve_point(spec, 2.0), RngStream(1, 0))
        assert c0 == c2
        assert np.allclose(h2.y - h0.y, 2.0)

    def test_regression_design(self):
        spec = small_spec(endpoint="linear_regression", methods=["no_borrow"], n=400, m=400)
        pt = resolve_point(spec)
        hist, curr = generate_pair(spec.endpoint, pt, RngStream(2, 0))
        assert curr.X.shape == (400, 3)
        assert np.all(curr.X[:, 0] == 1)
        assert set(np.unique(curr.X[:, 1])) == {0.0, 1.0}
        assert curr.X[:, 2].min() >= 40 and curr.X[:, 2].max() <= 70
        assert np.all(curr.X[:, 2] == np.round(curr.X[:, 2]))

    def test_setup_axis(self):
        spec = small_spec(
            endpoint="linear_regression",
            methods=["no_borrow"],
            sweep={"axis": "setup", "values": [{"label": "a"}, {"label": "b", "beta_h": [40, 8, 0.5]}]},
        )
        pt = resolve_point(spec, spec.sweep.values[1])
        assert pt.params["beta_h"] == [40, 8, 0.5]
        assert pt.params["beta_c"] == [50, 8, 0.5]


class TestRunScenario:
    def test_bit_identical_reruns(self):
        a = run_scenario(small_spec())
        b = run_scenario(small_spec())
        assert a.rows() == b.rows()

    def test_no_borrow_ignores_historical_parameters(self):
        a = run_scenario(small_spec(methods=["no_borrow"]))
        b = run_scenario(small_spec(methods=["no_borrow"], params={"mu_h": 35.0, "sigma_h": 3.0}))
        assert a.rows() == b.rows()

    def test_seed_changes_results(self):
        a = run_scenario(small_spec(methods=["thm_lik"]))
        b = run_scenario(small_spec(methods=["thm_lik"], seed=8))
        assert a.rows() != b.rows()

    def test_method_subset_does_not_change_draws(self):
        both = run_scenario(small_spec(methods=["thm_lik", "no_borrow"]))
        one = run_scenario(small_spec(methods=["thm_lik"]))
        assert both.point(None)["thm_lik"].rows() == one.point(None)["thm_lik"].rows()

    def test_worker_count_does_not_change_results(self):
        a = run_scenario(small_spec(methods=["thm_lik"], replicates=8))
        b = run_scenario(small_spec(methods=["thm_lik"], replicates=8, workers=2))
        assert a.rows() == b.rows()

    def test_known_variance_metrics(self):
        rep = run_scenario(small_spec(replicates=200))
        nb = rep.point(None)["no_borrow"]
        # the posterior sd is sigma/sqrt(n) in every replicate
        assert nb.avg_posterior_sd[0] == pytest.approx(0.5 / np.sqrt(20))
        assert nb.avg_power == 0.0 and nb.prob_discard == 1.0
        assert 0.9 < nb.coverage_probability[0] <= 1.0
        # E|xbar - mu| = sigma/sqrt(n) sqrt(2/pi)
        assert nb.avg_bias[0] == pytest.approx(0.5 / np.sqrt(20) * np.sqrt(2 / np.pi), rel=0.15)
        assert rep.point(None)["pool"].avg_power == 1.0

    def test_failure_threshold(self):
        # no current subject is treated, so the current-only design is rank deficient
        spec = small_spec(
            endpoint="linear_regression", methods=["no_borrow"], params={"x1_p_c": 0.0}, replicates=5, iters=600, burn_in=100
        )
        with pytest.raises(ScenarioFailure, match="RankDeficiencyError"):
            run_scenario(spec)

    def test_aggregate_tolerates_rare_failures(self):
        rep = run_scenario(small_spec(methods=["no_borrow"], replicates=200))
        ok = rep.point(None)["no_borrow"]
        assert ok.replicates_ok == 200
        from ppdcpp.simharness import ReplicateOutcome

        outcomes = [ReplicateOutcome(0.0, None, np.array([20.0]), np.array([0.1]), np.array([19.8]), np.array([20.2]))] * 199
        m = aggregate("x", outcomes + ["NumericalError"], {"mu": 20.0}, 0.99, 0.01)
        assert m.replicates_ok == 199 and m.failures == {"NumericalError": 1}
        with pytest.raises(ScenarioFailure):
            aggregate("x", outcomes[:98] + ["NumericalError"] * 2, {"mu": 20.0}, 0.99, 0.01)

    def test_sweep_and_panels(self):
        spec = small_spec(
            methods=["thm_lik"],
            replicates=20,
            sweep={"axis": "mean_diff", "values": [0.0, 4.0]},
            panels=[{"label": "small", "n": 10, "m": 10}, {"label": "large"}],
        )
        rep = run_scenario(spec)
        assert [(p.panel, p.grid_value) for p in rep.points] == [("small", 0.0), ("small", 4.0), ("large", 0.0), ("large", 4.0)]
        assert rep.point(0.0, "small").n == 10
        assert rep.curve("thm_lik", panel="large")[0] > rep.curve("thm_lik", panel="large")[1]
        assert {"panel", "mean_diff"} <= set(rep.rows()[0])

    def test_write_outputs(self, tmp_path):
        rep = run_scenario(small_spec(replicates=10))
        csv_path, json_path = rep.write(tmp_path)
        assert os.path.basename(csv_path) == "scenario-small-7.csv"
        assert os.path.basename(json_path) == "scenario-small-7.json"
        with open(csv_path) as fh:
            rows = list(csv.DictReader(fh))
        assert {r["method"] for r in rows} == {"thm_lik", "thm_obs", "no_borrow", "pool"}
        summary = json.loads(open(json_path).read())
        assert summary["seed"] == 7 and summary["scenario"]["name"] == "small"
        again = tmp_path / "again"
        run_scenario(small_spec(replicates=10)).write(again)
        assert open(csv_path, "rb").read() == open(again / "scenario-small-7.csv", "rb").read()


class TestUniformityDemo:
    def test_small_run(self):
        res = run_uniformity_demo(n=20, m=20, pairs=30, rng=RngStream(4), R=200)
        assert res.naive.shape == res.marginal.shape == (30,)
        assert np.all((0 <= res.naive) & (res.naive <= 1))
        assert sum(res.as_dict()["histogram"]["counts"]) == 30

    def test_reproducible(self):
        a = run_uniformity_demo(n=10, m=10, pairs=5, rng=RngStream(4), R=100)
        b = run_uniformity_demo(n=10, m=10, pairs=5, rng=RngStream(4), R=100)
        assert np.array_equal(a.naive, b.naive)

    def test_point_config_type(self):
        assert PointConfig(1, 2, {}).m == 2
