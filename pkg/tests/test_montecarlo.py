import math
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
from scipy.special import expit

from tve.data import DgdSpec, outcome_lp
from tve.errors import ConfigError
from tve.montecarlo import (
    ESTIMATORS,
    ScenarioConfig,
    mc_variance_oracle,
    per_rep_columns,
    psi_truth,
    rep_seed,
    run_rep,
    run_reps,
    run_scenario,
    scenario_metrics,
    sigma2_at,
    sigma2_oracle,
    sigma2_quadrature,
    summarize,
    summarize_table,
)


class TestOracles:
    @pytest.mark.parametrize("kind", ["simple", "complex"])
    @pytest.mark.parametrize("bp", [-2.0, 0.0, 0.5])
    def test_null_truth_is_zero(self, kind, bp):
        assert psi_truth(DgdSpec(kind, bp, 0.0)) == 0.0

    @pytest.mark.parametrize("kind", ["simple", "complex"])
    def test_truth_matches_monte_carlo(self, kind):
        spec = DgdSpec(kind, 0.0, 0.5)
        w = np.random.default_rng(5).random((10_000_000, 3))
        p1 = expit(outcome_lp(spec, w[:, 0], w[:, 1], w[:, 2], 1.0)).mean()
        p0 = expit(outcome_lp(spec, w[:, 0], w[:, 1], w[:, 2], 0.0)).mean()
        assert psi_truth(spec) == pytest.approx(math.log(p1 / p0), abs=2e-4)

    def test_truth_monotone_in_effect(self):
        vals = [psi_truth(DgdSpec("simple", 0.0, b)) for b in (0.0, 0.25, 0.5, 1.0)]
        assert np.all(np.diff(vals) > 0)

    def test_quadrature_converged(self):
        spec = DgdSpec("complex", 0.5, 0.5)
        assert sigma2_quadrature(spec, nodes=32) == pytest.approx(sigma2_quadrature(spec), rel=1e-10)

    def test_constant_nuisance(self):
        h = np.full(7, 0.5)
        assert sigma2_at(h, h, h) == pytest.approx(4.0, abs=1e-14)

    def test_weaker_overlap_larger_variance(self):
        assert sigma2_quadrature(DgdSpec("simple", 0.5)) > sigma2_quadrature(DgdSpec("simple", -2.0))

    def test_mc_oracle(self):
        x = np.random.default_rng(0).normal(0, 0.1, 20_000)
        scaled, raw, se = mc_variance_oracle(x, 100)
        assert raw == pytest.approx(0.01, rel=0.03)
        assert scaled == pytest.approx(100 * raw)
        # normal data: se(var) ~ var * sqrt(2 / r)
        assert se == pytest.approx(scaled * math.sqrt(2 / x.size), rel=0.1)

    def test_mc_oracle_needs_reps(self):
        with pytest.raises(ConfigError):
            sigma2_oracle(DgdSpec(), 100, 10, 0)


class TestConfig:
    @pytest.mark.parametrize(
        "kw",
        [{"reps": 0}, {"n": 1}, {"level": 1.0}, {"estimators": ("bogus",)}, {"d_eps": 0.0}, {"max_iter": 0}],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            ScenarioConfig(**kw)

    def test_dict_dgd(self):
        cfg = ScenarioConfig(dgd={"kind": "complex", "beta_p": 0.5})
        assert cfg.dgd == DgdSpec("complex", 0.5, 0.0)


SMALL = ScenarioConfig(dgd=DgdSpec("simple", -2.0, 0.0), n=200, reps=6, seed=11)


class TestReplications:
    def test_row_schema(self):
        row = run_rep(SMALL, 0)
        assert list(row) == per_rep_columns()
        assert row["seed_stream"] == rep_seed(11, 0)
        assert row["failed_reason"] == ""
        for s in ("ic", "ss", "it", "os"):
            assert row[f"ci_lo_{s}"] <= row["psi_hat"] <= row[f"ci_hi_{s}"]
            assert row[f"covered_{s}"] in (0, 1)

    def test_deterministic(self):
        a = pd.DataFrame(run_reps(SMALL, range(3)))
        b = pd.DataFrame(run_reps(SMALL, range(3)))
        pd.testing.assert_frame_equal(a, b)

    def test_rep_independent_of_batch(self):
        whole = run_reps(SMALL, range(4))
        assert run_rep(SMALL, 3) == whole[3]

    def test_jobs_invariant(self):
        a = pd.DataFrame(run_reps(SMALL, range(6), jobs=1))
        b = pd.DataFrame(run_reps(SMALL, range(6), jobs=3))
        pd.testing.assert_frame_equal(a, b)

    def test_seeds_distinct(self):
        assert len({rep_seed(0, r) for r in range(1000)}) == 1000
        assert rep_seed(0, 1) != rep_seed(1, 1)

    def test_estimator_subset(self):
        cfg = replace(SMALL, estimators=("ss",))
        row = run_rep(cfg, 0)
        assert np.isnan(row["sigma2_os"]) and row["sigma2_ss"] > 0
        assert row["steps_os"] == ""


@pytest.fixture(scope="module")
def result():
    return run_scenario(SMALL)


class TestScenario:
    def test_metrics(self, result):
        assert set(result.metrics) == set(ESTIMATORS)
        for m in result.metrics.values():
            assert 0 <= m.coverage <= 1 and 0 <= m.type1 <= 1
            assert m.usable == SMALL.reps - result.n_failed
            assert m.rmse >= abs(m.bias)
        assert result.oracle.reps_used == SMALL.reps - result.n_failed
        assert result.sigma2_oracle == sigma2_quadrature(SMALL.dgd)

    def test_type1_nan_under_alternative(self):
        res = run_scenario(replace(SMALL, dgd=DgdSpec("simple", -2.0, 0.5), reps=3))
        assert all(math.isnan(m.type1) for m in res.metrics.values())

    def test_exclusion_accounting(self, result):
        t = result.table.copy()
        t.loc[0, "failed_reason"] = "PositivityError"
        t.loc[0, "covered_ss"] = np.nan
        m = scenario_metrics(t, ("ss",), result.sigma2_oracle)["ss"]
        kept = t.loc[1:, "covered_ss"].astype(float)
        assert m.usable == len(t) - 1
        assert m.coverage == pytest.approx(kept.mean())

    def test_summarize_shape(self, result):
        s = summarize([result, result])
        assert len(s) == 2 * len(ESTIMATORS)
        assert list(s.columns[:5]) == ["dgd", "beta_p", "beta_psi", "n", "estimator"]

    def test_summarize_empty(self):
        with pytest.raises(ValueError):
            summarize([])

    def test_summarize_table_matches(self, result):
        a = summarize([result])
        b = summarize_table(result.table)
        cols = ["coverage", "type1", "bias", "rmse", "mean_sigma2", "n_failed", "reps"]
        np.testing.assert_array_equal(a[cols].to_numpy(float), b[cols].to_numpy(float))
