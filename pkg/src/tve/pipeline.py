"""End-to-end estimation on one dataset."""

from __future__ import annotations

from dataclasses import dataclass, field

from .learners import G_BOUNDS, Q_BOUNDS, LearnerSpec, fit_nuisances
from .target_psi import tmle_psi
from .variance import D_EPS, MAX_ITER, confidence_interval, estimate_variances


@dataclass(frozen=True)
class EstimateReport:
    """Point estimate, the four variance estimates and their Wald intervals."""

    n: int
    psi_hat: float
    sigma2: dict
    ci: dict
    level: float
    variance: object = field(repr=False)
    fit0: object = field(repr=False)
    psi_target: object = field(repr=False)

    def to_dict(self):
        v = self.variance
        return {
            "n": self.n,
            "psi_hat": self.psi_hat,
            "level": self.level,
            "sigma2": dict(self.sigma2),
            "ci": {k: list(v_) for k, v_ in self.ci.items()},
            "traces": {"iterative": v.iterative_trace.to_dict(), "onestep": v.onestep_trace.to_dict()},
            "truncation": {
                "bounds": list(self.fit0.truncation_bounds),
                "n_g_truncated": self.fit0.n_g_truncated,
                "n_q_truncated": self.fit0.n_q_truncated,
            },
            "learner": {
                k: self.fit0.meta[k] for k in ("q_formula", "g_formula", "folds", "misspecify_q") if k in self.fit0.meta
            },
            "psi_targeting": {
                "epsilon": [float(e) for e in self.psi_target.epsilon],
                "pn_eif_psi": self.psi_target.pn_eif_psi,
                "rounds": self.psi_target.rounds,
            },
        }


def estimate(d, learner=None, seed=0, level=0.95, d_eps=D_EPS, max_iter=MAX_ITER,
             g_bounds=G_BOUNDS, q_bounds=Q_BOUNDS):
    """Fit nuisances, target Psi and compute all four variance estimates."""
    fit0 = fit_nuisances(d, learner or LearnerSpec(), seed=seed, g_bounds=g_bounds, q_bounds=q_bounds)
    pt = tmle_psi(d, fit0)
    var = estimate_variances(d, fit0, pt, d_eps=d_eps, max_iter=max_iter)
    sigma2 = var.as_dict()
    ci = {k: confidence_interval(pt.psi_hat, s2, d.n, level) for k, s2 in sigma2.items()}
    return EstimateReport(d.n, pt.psi_hat, sigma2, ci, level, var, fit0, pt)
