"""Scenario runner: replication loop, oracle values and metric aggregation."""

from __future__ import annotations

import concurrent.futures as cf
import math
import multiprocessing as mp
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.special import expit

from .data import DgdSpec, outcome_lp, propensity_lp, simulate
from .errors import ConfigError, DegenerateFitError, PositivityError, PsiDegenerateError, ScenarioError
from .learners import G_BOUNDS, Q_BOUNDS, LearnerSpec, fit_nuisances
from .target_psi import tmle_psi
from .variance import (
    D_EPS,
    MAX_ITER,
    confidence_interval,
    var_ic,
    var_iterative,
    var_onestep,
    var_ss,
)

ESTIMATORS = ("ic", "ss", "iterative", "onestep")
SHORT = {"ic": "ic", "ss": "ss", "iterative": "it", "onestep": "os"}

QUAD_NODES = 64


def per_rep_columns():
    """Fixed column order of the per-replication table."""
    shorts = [SHORT[e] for e in ESTIMATORS]
    cols = ["dgd", "beta_p", "beta_psi", "n", "rep", "seed_stream", "psi_hat"]
    cols += [f"sigma2_{s}" for s in shorts]
    for s in shorts:
        cols += [f"ci_lo_{s}", f"ci_hi_{s}"]
    cols += [f"covered_{s}" for s in shorts]
    cols += [f"reject_{s}" for s in shorts]
    cols += ["steps_os", "term_os", "steps_it", "term_it", "n_g_trunc", "n_q_trunc", "failed_reason"]
    return cols


# --------------------------------------------------------------------------
# oracles


def _cube(nodes=QUAD_NODES):
    x, w = np.polynomial.legendre.leggauss(nodes)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    g1, g2, g3 = np.meshgrid(x, x, x, indexing="ij")
    wt = (w[:, None, None] * w[None, :, None] * w[None, None, :]).ravel()
    return g1.ravel(), g2.ravel(), g3.ravel(), wt


def psi_truth(dgd, nodes=QUAD_NODES):
    """``log E[Qbar(1, W)] - log E[Qbar(0, W)]`` by tensor Gauss-Legendre quadrature."""
    dgd = _as_dgd(dgd)
    if dgd.beta_psi == 0.0:
        return 0.0
    w1, w2, w3, wt = _cube(nodes)
    p1 = float(np.dot(wt, expit(outcome_lp(dgd, w1, w2, w3, 1.0))))
    p0 = float(np.dot(wt, expit(outcome_lp(dgd, w1, w2, w3, 0.0))))
    return math.log(p1) - math.log(p0)


def sigma2_quadrature(dgd, nodes=QUAD_NODES):
    """Variance of the log(CRR) EIF at the true distribution, by quadrature."""
    dgd = _as_dgd(dgd)
    w1, w2, w3, wt = _cube(nodes)
    q1 = expit(outcome_lp(dgd, w1, w2, w3, 1.0))
    q0 = expit(outcome_lp(dgd, w1, w2, w3, 0.0))
    g1 = expit(propensity_lp(dgd, w1, w2, w3))
    return sigma2_at(q1, q0, g1, wt)


def sigma2_at(q1, q0, g1, weights=None):
    """Plug-in variance for given nuisance values and W-weights (default uniform)."""
    if weights is None:
        weights = np.full(len(q1), 1.0 / len(q1))
    p1 = float(np.dot(weights, q1))
    p0 = float(np.dot(weights, q0))
    integrand = (
        q1 * (1 - q1) / (p1**2 * g1) + q0 * (1 - q0) / (p0**2 * (1 - g1)) + (q1 / p1 - q0 / p0) ** 2
    )
    return float(np.dot(weights, integrand))


@dataclass(frozen=True)
class OracleValues:
    """Both reference values for the variance.

    ``mc_scaled = n * mc_raw`` with ``mc_raw`` the sample variance of the
    point estimates; ``mc_se`` is the Monte-Carlo standard error of
    ``mc_scaled``.
    """

    quadrature: float
    mc_scaled: float
    mc_raw: float
    mc_se: float
    reps_used: int


def mc_variance_oracle(psi_hats, n):
    """``(n * var, var, se(n * var))`` from point estimates across replications."""
    x = np.asarray(psi_hats, dtype=float)
    x = x[np.isfinite(x)]
    r = x.size
    if r < 2:
        return float("nan"), float("nan"), float("nan")
    var = float(np.var(x, ddof=1))
    c = x - x.mean()
    m4 = float(np.mean(c**4))
    # large-sample se of the sample variance, no normality assumption
    se = math.sqrt(max(m4 - var**2 * (r - 3) / (r - 1), 0.0) / r)
    return n * var, var, n * se


def sigma2_oracle(dgd, n, reps, seed, learner=None, jobs=1):
    """Run the point-estimate pipeline ``reps`` times and return `OracleValues`."""
    if reps < 100:
        raise ConfigError("the Monte-Carlo oracle needs reps >= 100")
    cfg = ScenarioConfig(dgd=_as_dgd(dgd), n=n, reps=reps, seed=seed, learner=learner or LearnerSpec(), estimators=())
    res = run_scenario(cfg, jobs=jobs)
    return res.oracle


# --------------------------------------------------------------------------
# scenarios


def _as_dgd(dgd):
    return dgd if isinstance(dgd, DgdSpec) else DgdSpec(**dgd)


@dataclass(frozen=True)
class ScenarioConfig:
    """One cell of a simulation grid.

    ``estimators`` is any subset of ``ESTIMATORS``; the point estimate is
    always computed.
    """

    dgd: DgdSpec = field(default_factory=DgdSpec)
    n: int = 1000
    reps: int = 500
    seed: int = 0
    learner: LearnerSpec = field(default_factory=LearnerSpec)
    level: float = 0.95
    estimators: tuple = ESTIMATORS
    d_eps: float = D_EPS
    max_iter: int = MAX_ITER
    g_bounds: tuple = G_BOUNDS
    q_bounds: tuple = Q_BOUNDS

    def __post_init__(self):
        object.__setattr__(self, "dgd", _as_dgd(self.dgd))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        object.__setattr__(self, "g_bounds", tuple(float(v) for v in self.g_bounds))
        object.__setattr__(self, "q_bounds", tuple(float(v) for v in self.q_bounds))
        if self.reps < 1:
            raise ConfigError("reps must be >= 1")
        if self.n < 2:
            raise ConfigError("n must be >= 2")
        if not 0.0 < self.level < 1.0:
            raise ConfigError("level must lie in (0, 1)")
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown:
            raise ConfigError(f"unknown estimators: {sorted(unknown)}")
        if not (self.d_eps > 0 and self.max_iter >= 1):
            raise ConfigError("d_eps must be > 0 and max_iter >= 1")


def rep_seed(seed, rep):
    """Integer seed of replication ``rep``; also written to the per-rep table."""
    return int(np.random.SeedSequence(int(seed), spawn_key=(int(rep),)).generate_state(1, np.uint32)[0])


def _empty_row(cfg, rep):
    row = dict.fromkeys(per_rep_columns(), np.nan)
    row.update(
        dgd=cfg.dgd.kind.value,
        beta_p=float(cfg.dgd.beta_p),
        beta_psi=float(cfg.dgd.beta_psi),
        n=int(cfg.n),
        rep=int(rep),
        seed_stream=rep_seed(cfg.seed, rep),
        failed_reason="",
    )
    for k in ("steps_os", "term_os", "steps_it", "term_it", "n_g_trunc", "n_q_trunc"):
        row[k] = ""
    return row


def run_rep(cfg, rep, truth=None):
    """One replication; returns a dict keyed by `per_rep_columns`."""
    row = _empty_row(cfg, rep)
    if truth is None:
        truth = psi_truth(cfg.dgd)
    d, _ = simulate(cfg.dgd, cfg.n, cfg.seed, rep=rep)
    try:
        fit0 = fit_nuisances(d, cfg.learner, seed=row["seed_stream"], g_bounds=cfg.g_bounds, q_bounds=cfg.q_bounds)
        row["n_g_trunc"] = fit0.n_g_truncated
        row["n_q_trunc"] = fit0.n_q_truncated
        pt = tmle_psi(d, fit0)
        row["psi_hat"] = pt.psi_hat
        values = {}
        if "ic" in cfg.estimators:
            values["ic"] = var_ic(d, pt)
        if "ss" in cfg.estimators:
            values["ss"] = var_ss(d, fit0)
        if "iterative" in cfg.estimators:
            values["iterative"], tr = var_iterative(d, fit0)
            row["steps_it"], row["term_it"] = tr.steps, tr.termination.value
        if "onestep" in cfg.estimators:
            values["onestep"], tr = var_onestep(d, fit0, d_eps=cfg.d_eps, max_iter=cfg.max_iter)
            row["steps_os"], row["term_os"] = tr.steps, tr.termination.value
    except (PositivityError, PsiDegenerateError, DegenerateFitError) as exc:
        row["failed_reason"] = type(exc).__name__
        row["psi_hat"] = np.nan
        return row
    for est, s2 in values.items():
        s = SHORT[est]
        lo, hi = confidence_interval(pt.psi_hat, s2, cfg.n, cfg.level)
        row[f"sigma2_{s}"] = s2
        row[f"ci_lo_{s}"], row[f"ci_hi_{s}"] = lo, hi
        row[f"covered_{s}"] = int(lo <= truth <= hi)
        row[f"reject_{s}"] = int(not lo <= 0.0 <= hi)
    return row


def _run_chunk(cfg, reps, truth):
    return [run_rep(cfg, r, truth) for r in reps]


def _warm_kernels():
    # compile (or load from cache) once in the parent so forked workers inherit it
    from . import kernels

    z = np.full(4, 0.5)
    kernels.get_flow()(z, np.array([0.0, 1.0, 0.0, 1.0]), z, z, z, 1e-3, 1, 0.01, 0.025, 0.975, 0.001, 0.999, 1e-15)


def run_reps(cfg, reps, jobs=1, truth=None):
    """Rows for the given replication indices, in index order."""
    reps = list(reps)
    if truth is None:
        truth = psi_truth(cfg.dgd)
    if jobs <= 1 or len(reps) <= 1:
        rows = _run_chunk(cfg, reps, truth)
    else:
        _warm_kernels()
        chunks = [reps[i::jobs] for i in range(jobs) if reps[i::jobs]]
        ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
        with cf.ProcessPoolExecutor(max_workers=len(chunks), mp_context=ctx) as pool:
            parts = list(pool.map(_run_chunk, [cfg] * len(chunks), chunks, [truth] * len(chunks)))
        rows = [r for part in parts for r in part]
    rows.sort(key=lambda r: r["rep"])
    return rows


@dataclass(frozen=True)
class EstimatorMetrics:
    coverage: float
    type1: float
    bias: float
    rmse: float
    mean_sigma2: float
    var_sigma2: float
    usable: int


@dataclass(frozen=True)
class ScenarioResult:
    config: ScenarioConfig
    metrics: dict
    psi_truth: float
    sigma2_oracle: float
    oracle: OracleValues
    n_failed: int
    table: pd.DataFrame = field(repr=False, compare=False)


def run_scenario(cfg, jobs=1):
    """Run every replication of ``cfg`` and aggregate.

    Raises
    ------
    ScenarioError
        Every replication failed.
    """
    truth = psi_truth(cfg.dgd)
    rows = run_reps(cfg, range(cfg.reps), jobs=jobs, truth=truth)
    table = pd.DataFrame(rows, columns=per_rep_columns())
    ok = table["failed_reason"] == ""
    if not ok.any():
        raise ScenarioError(f"all {cfg.reps} replications failed: {table['failed_reason'].value_counts().to_dict()}")
    s2_0 = sigma2_quadrature(cfg.dgd)
    mc_scaled, mc_raw, mc_se = mc_variance_oracle(table.loc[ok, "psi_hat"], cfg.n)
    oracle = OracleValues(s2_0, mc_scaled, mc_raw, mc_se, int(ok.sum()))
    metrics = scenario_metrics(table, cfg.estimators, s2_0)
    return ScenarioResult(cfg, metrics, truth, s2_0, oracle, int((~ok).sum()), table)


def scenario_metrics(table, estimators, sigma2_0):
    """Per-estimator metrics from a per-rep table of one scenario.

    Coverage and type-I denominators are the usable replications only.
    Type-I error is NaN unless the true effect is zero.
    """
    ok = table["failed_reason"].fillna("") == ""
    null = bool((table["beta_psi"] == 0.0).all())
    out = {}
    for est in estimators:
        s = SHORT[est]
        t = table.loc[ok]
        s2 = t[f"sigma2_{s}"].astype(float).to_numpy()
        err = s2 - sigma2_0
        out[est] = EstimatorMetrics(
            coverage=float(t[f"covered_{s}"].astype(float).mean()),
            type1=float(t[f"reject_{s}"].astype(float).mean()) if null else float("nan"),
            bias=float(err.mean()),
            rmse=float(np.sqrt(np.mean(err**2))),
            mean_sigma2=float(s2.mean()),
            var_sigma2=float(np.var(s2, ddof=1)) if s2.size > 1 else float("nan"),
            usable=int(ok.sum()),
        )
    return out


SUMMARY_KEYS = ["dgd", "beta_p", "beta_psi", "n", "estimator"]
SUMMARY_COLUMNS = SUMMARY_KEYS + ["coverage", "type1", "bias", "rmse", "mean_sigma2", "n_failed", "reps"]


def summarize(results):
    """Long-format table keyed by (dgd, beta_p, beta_psi, n, estimator)."""
    if not results:
        raise ValueError("nothing to summarize")
    rows = []
    for res in results:
        dgd = res.config.dgd
        for est, m in res.metrics.items():
            rows.append(
                {
                    "dgd": dgd.kind.value,
                    "beta_p": float(dgd.beta_p),
                    "beta_psi": float(dgd.beta_psi),
                    "n": int(res.config.n),
                    "estimator": est,
                    "coverage": m.coverage,
                    "type1": m.type1,
                    "bias": m.bias,
                    "rmse": m.rmse,
                    "mean_sigma2": m.mean_sigma2,
                    "n_failed": res.n_failed,
                    "reps": res.config.reps,
                }
            )
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def summarize_table(table):
    """Summary rows straight from a per-rep table (possibly several scenarios)."""
    out = []
    for key, grp in table.groupby(["dgd", "beta_p", "beta_psi", "n"], sort=True):
        kind, bp, bpsi, n = key
        dgd = DgdSpec(kind, float(bp), float(bpsi))
        ests = [e for e in ESTIMATORS if grp[f"sigma2_{SHORT[e]}"].notna().any()]
        metrics = scenario_metrics(grp, ests, sigma2_quadrature(dgd))
        n_failed = int((grp["failed_reason"].fillna("") != "").sum())
        cfg = replace(ScenarioConfig(), dgd=dgd, n=int(n), reps=len(grp), estimators=tuple(ests))
        res = ScenarioResult(cfg, metrics, psi_truth(dgd), float("nan"), None, n_failed, grp)
        out.append(summarize([res]))
    if not out:
        return pd.DataFrame(columns=SUMMARY_COLUMNS)
    return pd.concat(out, ignore_index=True)
