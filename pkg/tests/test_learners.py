import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit, logit

from tve.data import Dataset, DgdSpec, simulate
from tve.errors import InputError, PositivityError, SeparationError
from tve.learners import (
    MISSPECIFIED_Q,
    Formula,
    LearnerSpec,
    fit_logistic,
    fit_logistic_safe,
    fit_nuisances,
    fold_ids,
    make_fit,
    select_formula,
    truncate,
)


class TestFitLogistic:
    def test_intercept_closed_form(self):
        y = np.array([1, 0, 1, 1, 0, 1, 0, 1.0])
        b = fit_logistic(np.ones((8, 1)), y)
        assert b[0] == pytest.approx(logit(y.mean()), abs=1e-10)

    def test_offset_intercept(self):
        rng = np.random.default_rng(1)
        off = rng.normal(size=400)
        y = (rng.random(400) < expit(off + 0.7)).astype(float)
        b = fit_logistic(np.ones((400, 1)), y, offset=off)
        # score equation with the offset
        assert abs(np.sum(y - expit(off + b[0]))) < 1e-7

    def test_recovers_generating_coefficients(self):
        rng = np.random.default_rng(2)
        n = 100_000
        x = np.column_stack([np.ones(n), rng.normal(size=n), rng.random(n)])
        beta = np.array([-0.4, 0.8, 1.5])
        y = (rng.random(n) < expit(x @ beta)).astype(float)
        b = fit_logistic(x, y)
        mu = expit(x @ b)
        cov = np.linalg.inv((x.T * (mu * (1 - mu))) @ x)
        se = np.sqrt(np.diag(cov))
        assert np.all(np.abs(b - beta) <= 3 * se)

    def test_separation(self):
        x = np.array([0.0, 0.1, 0.2, 0.8, 0.9, 1.0])
        with pytest.raises(SeparationError):
            fit_logistic(np.column_stack([np.ones(6), x]), (x > 0.5).astype(float))

    def test_x_equals_y_separates(self):
        y = np.array([0, 1, 0, 1, 1.0])
        with pytest.raises(SeparationError):
            fit_logistic(np.column_stack([np.ones(5), y]), y)

    def test_ridge_fallback(self):
        x = np.array([0.0, 0.1, 0.2, 0.8, 0.9, 1.0])
        b, used = fit_logistic_safe(np.column_stack([np.ones(6), x]), (x > 0.5).astype(float))
        assert used and np.all(np.isfinite(b)) and np.max(np.abs(b)) < 30

    @pytest.mark.parametrize("bad", [np.nan, np.inf])
    def test_non_finite(self, bad):
        x = np.ones((3, 1))
        x[1, 0] = bad
        with pytest.raises(InputError):
            fit_logistic(x, np.array([0, 1, 0.0]))

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            fit_logistic(np.ones((3, 1)), np.array([0, 1.0]))


class TestFormula:
    def test_design_columns(self):
        w = np.arange(6.0).reshape(2, 3)
        f = Formula("f", covariates=("W1", 2), treatment=True, expand=True)
        x = f.design(w, ("W1", "W2", "W3"), a=np.array([1, 0]))
        # intercept, A, W1, W3, W1*W3, W1^2, W3^2
        assert x.shape == (2, 7)
        assert np.allclose(x[1], [1, 0, 3, 5, 15, 9, 25])

    def test_round_trip_dict(self):
        f = Formula("f", covariates=(0, 1), treatment=False, expand=True)
        assert Formula.from_dict(f.to_dict()) == f

    def test_unknown_key(self):
        with pytest.raises(InputError):
            Formula.from_dict({"name": "x", "bogus": 1})

    def test_needs_treatment(self):
        with pytest.raises(InputError):
            Formula("f").design(np.zeros((2, 1)), ("W1",))

    def test_learner_spec_round_trip(self):
        spec = LearnerSpec(folds=5, misspecify_q=True)
        assert LearnerSpec.from_dict(spec.to_dict()) == spec

    def test_misspecified_formula(self):
        assert LearnerSpec(misspecify_q=True).effective_q_specs == (MISSPECIFIED_Q,)

    @pytest.mark.parametrize("kw", [{"folds": 1}, {"q_specs": ()}, {"g_specs": ()}])
    def test_spec_invariants(self, kw):
        with pytest.raises(InputError):
            LearnerSpec(**kw)


class TestTruncation:
    def test_raw_low_value(self):
        fit = make_fit(np.full(3, 0.5), np.full(3, 0.5), np.array([0.01, 0.5, 0.6]))
        assert fit.g1[0] == 0.025 and fit.n_g_truncated == 1

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=40))
    def test_idempotent(self, xs):
        x = np.array(xs)
        once, n1 = truncate(x, 0.025, 0.975)
        twice, n2 = truncate(once, 0.025, 0.975)
        assert np.array_equal(once, twice) and n1 == n2
        assert np.all((once >= 0.025) & (once <= 0.975))


class TestSelection:
    def test_fold_ids_deterministic_and_balanced(self):
        a, b = fold_ids(103, 10, 4), fold_ids(103, 10, 4)
        assert np.array_equal(a, b)
        counts = np.bincount(a)
        assert counts.max() - counts.min() <= 1

    def test_order_invariance(self):
        d, _ = simulate(DgdSpec("simple", -1.0, 0.0), 800, 6)
        lib = [Formula("intercept", (), False), Formula("main", None, False), Formula("big", None, False, True)]
        ids = fold_ids(d.n, 5, 1)
        y = d.a.astype(float)
        i1, _ = select_formula(lib, [f.design(d.w, d.names) for f in lib], y, ids, 5)
        rev = lib[::-1]
        i2, _ = select_formula(rev, [f.design(d.w, d.names) for f in rev], y, ids, 5)
        assert lib[i1].name == rev[i2].name

    def test_tie_breaks_to_earlier(self):
        rng = np.random.default_rng(0)
        y = rng.integers(0, 2, 60).astype(float)
        x = np.ones((60, 1))
        lib = [Formula("a", (), False), Formula("b", (), False)]
        i, _ = select_formula(lib, [x, x.copy()], y, fold_ids(60, 5, 0), 5)
        assert i == 0

    def test_true_g_formula_selected(self):
        # large n: the main-terms propensity model is the truth and should win or tie
        wins = 0
        for seed in range(20):
            d, _ = simulate(DgdSpec("simple", -1.0, 0.0), 5000, seed)
            fit = fit_nuisances(d, LearnerSpec(), seed=seed)
            wins += fit.meta["g_formula"] in ("main", "main+int+sq")
        assert wins >= 19


class TestFitNuisances:
    def test_single_arm(self):
        d = Dataset(np.random.default_rng(0).random((20, 2)), np.ones(20, int), np.arange(20) % 2)
        with pytest.raises(PositivityError):
            fit_nuisances(d)

    def test_bounds_and_counts(self, sim500):
        d, _, fit = sim500
        lo, hi, qlo, qhi = fit.truncation_bounds
        assert np.all((fit.g1 >= lo) & (fit.g1 <= hi))
        assert np.all((fit.qbar1 >= qlo) & (fit.qbar1 <= qhi))
        assert fit.n_g_truncated == np.count_nonzero((fit.g1 <= lo) | (fit.g1 >= hi))
        assert fit.meta["folds"] == 10

    def test_deterministic(self):
        d, _ = simulate(DgdSpec("simple", 0.0, 0.5), 300, 1)
        f1, f2 = fit_nuisances(d, seed=9), fit_nuisances(d, seed=9)
        assert np.array_equal(f1.qbar1, f2.qbar1) and np.array_equal(f1.g1, f2.g1)

    def test_misspecified_flag(self):
        d, _ = simulate(DgdSpec("simple", 0.0, 0.5), 300, 1)
        fit = fit_nuisances(d, LearnerSpec(misspecify_q=True))
        assert fit.meta["q_formula"] == MISSPECIFIED_Q.name and fit.meta["misspecify_q"]

    def test_updated_recounts(self, sim500):
        _, _, fit = sim500
        new = fit.updated(fit.qbar1, fit.qbar0, np.full(fit.n, 0.001))
        assert new.n_g_truncated == fit.n and np.all(new.g1 == 0.025)
