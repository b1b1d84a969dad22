"""Initial nuisance estimation: IRLS logistic regression and a discrete
cross-validated selector over a small library of logistic formulas."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, log_expit

from .errors import (
    DegenerateFitError,
    InputError,
    PositivityError,
    SeparationError,
)
from .rng import stream

log = logging.getLogger(__name__)

G_BOUNDS = (0.025, 0.975)
Q_BOUNDS = (0.001, 0.999)

RIDGE_JITTER = 1e-8
RIDGE_FALLBACK = 1e-2
DIVERGENCE_LIMIT = 30.0


def _loglik(x, y, offset, beta, ridge):
    eta = offset + x @ beta
    ll = np.sum(y * log_expit(eta) + (1.0 - y) * log_expit(-eta))
    return ll - 0.5 * ridge * beta @ beta


def fit_logistic(x, y, offset=None, max_iter=100, tol=1e-8, ridge=0.0):
    """Maximum-likelihood logistic regression by Newton/IRLS.

    Parameters
    ----------
    x : array_like, shape (n, p)
        Design matrix. No intercept column is added.
    y : array_like, shape (n,)
        Responses in {0, 1}.
    offset : array_like, optional
        Fixed linear-predictor offset (logit scale).
    max_iter, tol : int, float
        Iteration cap and convergence threshold on the max absolute score.
    ridge : float
        L2 penalty ``ridge/2 * |beta|^2`` added to the negative log-likelihood.
        A jitter of 1e-8 is always added to the normal equations.

    Returns
    -------
    numpy.ndarray
        Coefficient vector of length p.

    Raises
    ------
    InputError
        If ``x``, ``y`` or ``offset`` contain non-finite values or disagree in length.
    SeparationError
        If the coefficients diverge past 30 in absolute value, or the fit
        reproduces ``y`` perfectly (complete separation).
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y, dtype=float)
    n, p = x.shape
    if y.shape != (n,):
        raise InputError(f"design has {n} rows but response has shape {y.shape}")
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y)) and np.all(np.isfinite(off))):
        raise InputError("non-finite value in logistic design, response or offset")

    beta = np.zeros(p)
    eye = np.eye(p)
    ll = _loglik(x, y, off, beta, ridge)
    for _ in range(max_iter):
        mu = expit(off + x @ beta)
        score = x.T @ (y - mu) - ridge * beta
        if np.max(np.abs(score)) < tol:
            break
        w = mu * (1.0 - mu)
        hess = (x.T * w) @ x + (ridge + RIDGE_JITTER) * eye
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, score, rcond=None)[0]
        # step halving keeps the penalized likelihood monotone
        for _ in range(30):
            cand = beta + step
            ll_new = _loglik(x, y, off, cand, ridge)
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            step = step / 2.0
        beta, ll = cand, ll_new
        if np.max(np.abs(beta)) > DIVERGENCE_LIMIT:
            raise SeparationError("logistic coefficients diverged", coef=beta)
        if np.max(np.abs(step)) < 1e-14 * (1.0 + np.max(np.abs(beta))):
            break

    mu = expit(off + x @ beta)
    if ridge == 0.0 and np.max(np.abs(y - mu)) < 1e-6:
        raise SeparationError("fitted probabilities reproduce the response exactly", coef=beta)
    return beta


def fit_logistic_safe(x, y, offset=None, **kw):
    """`fit_logistic` with the ridge fallback applied on separation."""
    try:
        return fit_logistic(x, y, offset=offset, **kw), False
    except SeparationError:
        kw = dict(kw)
        kw["ridge"] = RIDGE_FALLBACK
        return fit_logistic(x, y, offset=offset, **kw), True


# --------------------------------------------------------------------------
# formula library


@dataclass(frozen=True)
class Formula:
    """A logistic specification.

    ``covariates`` selects columns by name or position; ``None`` means all.
    ``expand`` adds pairwise products and squares of the selected covariates.
    """

    name: str
    covariates: Optional[tuple] = None
    treatment: bool = True
    expand: bool = False

    def columns(self, names):
        if self.covariates is None:
            return list(range(len(names)))
        idx = []
        for c in self.covariates:
            if isinstance(c, (int, np.integer)):
                if not 0 <= c < len(names):
                    raise InputError(f"formula {self.name!r}: column {c} out of range")
                idx.append(int(c))
            else:
                if c not in names:
                    raise InputError(f"formula {self.name!r}: unknown covariate {c!r}")
                idx.append(list(names).index(c))
        return idx

    def design(self, w, names, a=None):
        """Design matrix with intercept; ``a`` is used when ``treatment``."""
        cols = self.columns(names)
        n = w.shape[0]
        parts = [np.ones((n, 1))]
        if self.treatment:
            if a is None:
                raise InputError(f"formula {self.name!r} needs a treatment column")
            parts.append(np.asarray(a, dtype=float)[:, None])
        sub = w[:, cols]
        if sub.shape[1]:
            parts.append(sub)
        if self.expand:
            for i, j in combinations(range(len(cols)), 2):
                parts.append((sub[:, i] * sub[:, j])[:, None])
            parts.append(sub**2)
        return np.hstack(parts)

    def to_dict(self):
        return {
            "name": self.name,
            "covariates": None if self.covariates is None else list(self.covariates),
            "treatment": self.treatment,
            "expand": self.expand,
        }

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"name", "covariates", "treatment", "expand"}
        if unknown:
            raise InputError(f"unknown formula keys: {sorted(unknown)}")
        cov = d.get("covariates")
        return cls(
            name=str(d["name"]),
            covariates=None if cov is None else tuple(cov),
            treatment=bool(d.get("treatment", True)),
            expand=bool(d.get("expand", False)),
        )


def default_q_library():
    return [
        Formula("intercept", covariates=(), treatment=False),
        Formula("main", treatment=True),
        Formula("main+int+sq", treatment=True, expand=True),
    ]


def default_g_library():
    return [
        Formula("intercept", covariates=(), treatment=False),
        Formula("main", treatment=False),
        Formula("main+int+sq", treatment=False, expand=True),
    ]


# outcome on (A, first covariate) only
MISSPECIFIED_Q = Formula("misspecified:A+W1", covariates=(0,), treatment=True)


@dataclass(frozen=True)
class LearnerSpec:
    q_specs: tuple = field(default_factory=lambda: tuple(default_q_library()))
    g_specs: tuple = field(default_factory=lambda: tuple(default_g_library()))
    folds: int = 10
    misspecify_q: bool = False

    def __post_init__(self):
        object.__setattr__(self, "q_specs", tuple(self.q_specs))
        object.__setattr__(self, "g_specs", tuple(self.g_specs))
        if not self.q_specs or not self.g_specs:
            raise InputError("LearnerSpec needs at least one q and one g formula")
        if self.folds < 2:
            raise InputError("folds must be >= 2")

    @property
    def effective_q_specs(self):
        return (MISSPECIFIED_Q,) if self.misspecify_q else self.q_specs

    def to_dict(self):
        return {
            "q_specs": [f.to_dict() for f in self.q_specs],
            "g_specs": [f.to_dict() for f in self.g_specs],
            "folds": self.folds,
            "misspecify_q": self.misspecify_q,
        }

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"q_specs", "g_specs", "folds", "misspecify_q"}
        if unknown:
            raise InputError(f"unknown learner keys: {sorted(unknown)}")
        kw = {}
        if "q_specs" in d:
            kw["q_specs"] = tuple(Formula.from_dict(f) for f in d["q_specs"])
        if "g_specs" in d:
            kw["g_specs"] = tuple(Formula.from_dict(f) for f in d["g_specs"])
        if "folds" in d:
            kw["folds"] = int(d["folds"])
        if "misspecify_q" in d:
            kw["misspecify_q"] = bool(d["misspecify_q"])
        return cls(**kw)


# --------------------------------------------------------------------------
# fitted nuisances


@dataclass(frozen=True)
class NuisanceFit:
    """Per-unit nuisance predictions after truncation.

    ``g0`` is never stored; it is always ``1 - g1``.
    """

    qbar1: np.ndarray
    qbar0: np.ndarray
    g1: np.ndarray
    truncation_bounds: tuple = (*G_BOUNDS, *Q_BOUNDS)
    n_g_truncated: int = 0
    n_q_truncated: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def g0(self):
        return 1.0 - self.g1

    @property
    def n(self):
        return self.g1.shape[0]

    def qbar_a(self, a):
        """Outcome regression at the observed treatment."""
        return np.where(np.asarray(a) == 1, self.qbar1, self.qbar0)

    def with_values(self, qbar1=None, qbar0=None, g1=None, **meta):
        m = dict(self.meta)
        m.update(meta)
        return replace(
            self,
            qbar1=self.qbar1 if qbar1 is None else qbar1,
            qbar0=self.qbar0 if qbar0 is None else qbar0,
            g1=self.g1 if g1 is None else g1,
            meta=m,
        )

    def updated(self, qbar1, qbar0, g1, **meta):
        """New fit from raw values, truncated to this fit's bounds and recounted."""
        g_lo, g_hi, q_lo, q_hi = self.truncation_bounds
        m = dict(self.meta)
        m.update(meta)
        return make_fit(qbar1, qbar0, g1, (g_lo, g_hi), (q_lo, q_hi), **m)


def truncate(x, lo, hi):
    """Clip to ``[lo, hi]``; returns the clipped array and the count at a bound."""
    x = np.asarray(x, dtype=float)
    hits = int(np.count_nonzero((x <= lo) | (x >= hi)))
    return np.clip(x, lo, hi), hits


def make_fit(qbar1, qbar0, g1, g_bounds=G_BOUNDS, q_bounds=Q_BOUNDS, **meta):
    """Build a truncated NuisanceFit from raw probability vectors."""
    g, ng = truncate(g1, *g_bounds)
    q1, n1 = truncate(qbar1, *q_bounds)
    q0, n0 = truncate(qbar0, *q_bounds)
    return NuisanceFit(q1, q0, g, (*g_bounds, *q_bounds), ng, n1 + n0, dict(meta))


def fold_ids(n, folds, seed):
    """Deterministic fold label per row, a function of (seed, row index)."""
    perm = stream(seed, "folds").permutation(n)
    ids = np.empty(n, dtype=np.int64)
    ids[perm] = np.arange(n) % folds
    return ids


def _cv_risk(x, y, ids, folds):
    total = 0.0
    for v in range(folds):
        test = ids == v
        if not test.any():
            continue
        train = ~test
        try:
            beta, _ = fit_logistic_safe(x[train], y[train])
        except SeparationError:
            return np.inf
        eta = x[test] @ beta
        total -= np.sum(y[test] * log_expit(eta) + (1.0 - y[test]) * log_expit(-eta))
    return total / len(y)


def select_formula(candidates, designs, y, ids, folds):
    """Pick the candidate with the smallest CV risk; ties go to the earlier one.

    Returns (index, risks). With a single candidate no CV is run.
    """
    if len(candidates) == 1:
        return 0, [np.nan]
    risks = [_cv_risk(x, y, ids, folds) for x in designs]
    finite = [r for r in risks if np.isfinite(r)]
    if not finite:
        raise DegenerateFitError("every candidate formula failed in cross-validation")
    best = min(finite)
    for i, r in enumerate(risks):
        if r <= best + 1e-12:
            return i, risks
    raise AssertionError("unreachable")


def _fit_g(d, spec, ids, folds):
    a = d.a.astype(float)
    cands = list(spec.g_specs)
    designs = [f.design(d.w, d.names) for f in cands]
    gi, risks = select_formula(cands, designs, a, ids, folds)
    try:
        beta, ridge = fit_logistic_safe(designs[gi], a)
    except SeparationError as exc:
        raise DegenerateFitError(f"propensity refit failed: {exc}") from exc
    return expit(designs[gi] @ beta), cands[gi].name, risks, ridge


def fit_propensity(d, spec=None, seed=0):
    """Untruncated fitted g(1|W) from the CV-selected propensity formula."""
    spec = spec or LearnerSpec()
    if d.a.min() == d.a.max():
        raise PositivityError("only one treatment arm present")
    folds = min(spec.folds, d.n)
    return _fit_g(d, spec, fold_ids(d.n, folds, seed), folds)[0]


def fit_nuisances(d, spec=None, seed=0, g_bounds=G_BOUNDS, q_bounds=Q_BOUNDS):
    """Fit Q-bar and g by discrete cross-validated selection.

    Returns a truncated `NuisanceFit`. Selected formulas, CV risks and
    whether the ridge fallback fired are stored in ``fit.meta``.
    """
    spec = spec or LearnerSpec()
    a = d.a.astype(float)
    y = d.y.astype(float)
    n = d.n
    if a.min() == a.max():
        raise PositivityError("only one treatment arm present")
    folds = min(spec.folds, n)
    ids = fold_ids(n, folds, seed)

    q_cands = list(spec.effective_q_specs)
    q_designs = [f.design(d.w, d.names, a) for f in q_cands]
    qi, q_risks = select_formula(q_cands, q_designs, y, ids, folds)
    try:
        qb, q_ridge = fit_logistic_safe(q_designs[qi], y)
    except SeparationError as exc:
        raise DegenerateFitError(f"outcome refit failed: {exc}") from exc
    raw_g1, g_name, g_risks, g_ridge = _fit_g(d, spec, ids, folds)

    qf = q_cands[qi]
    ones, zeros = np.ones(n), np.zeros(n)
    raw_q1 = expit(qf.design(d.w, d.names, ones if qf.treatment else None) @ qb)
    raw_q0 = expit(qf.design(d.w, d.names, zeros if qf.treatment else None) @ qb)
    return make_fit(
        raw_q1,
        raw_q0,
        raw_g1,
        g_bounds,
        q_bounds,
        q_formula=qf.name,
        g_formula=g_name,
        q_cv_risk=q_risks,
        g_cv_risk=g_risks,
        q_ridge=q_ridge,
        g_ridge=g_ridge,
        folds=folds,
        misspecify_q=spec.misspecify_q,
    )
