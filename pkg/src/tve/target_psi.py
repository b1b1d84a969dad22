"""TMLE of the log causal risk ratio."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

from .eif import eif_psi, moments
from .learners import fit_logistic_safe

MAX_ROUNDS = 20


@dataclass(frozen=True)
class PsiTarget:
    """Targeted fit for log(CRR).

    Attributes
    ----------
    fit_star : NuisanceFit
        Q-bar after fluctuation; g is carried through unchanged.
    psi_hat : float
        ``log(psi1*) - log(psi0*)``.
    epsilon : ndarray, shape (2,)
        Accumulated fluctuation coefficients for ``A/g1`` and ``(1-A)/g0``.
    pn_eif_psi : float
        Empirical mean of the log(CRR) EIF at ``fit_star``.
    """

    fit_star: object
    psi_hat: float
    epsilon: np.ndarray
    pn_eif_psi: float
    rounds: int = 0
    meta: dict = field(default_factory=dict, compare=False)


def residual_bound(eif):
    """``max(1e-8, sd(eif) / (sqrt(n) log n))``."""
    n = eif.shape[0]
    if n < 2:
        return 1e-8
    return max(1e-8, float(np.std(eif, ddof=1)) / (math.sqrt(n) * math.log(n)))


def tmle_psi(d, fit0, max_rounds=MAX_ROUNDS):
    """Target both treatment-specific means with one two-covariate fluctuation.

    ``logit Qbar_eps = logit Qbar + eps1 * A / g1 + eps2 * (1 - A) / g0`` is
    fit by offset logistic MLE and the update re-truncated. The first
    fluctuation is always applied; further rounds run only while the EIF
    residual exceeds `residual_bound`.

    Raises
    ------
    PsiDegenerateError
        A treatment-specific mean falls below the floor.
    """
    a = d.a.astype(float)
    y = d.y.astype(float)
    g1 = fit0.g1
    c1, c0 = a / g1, (1.0 - a) / (1.0 - g1)
    x = np.column_stack([c1, c0])
    fit = fit0
    eps = np.zeros(2)
    ridge_used = False
    rounds = 0
    while True:
        m = moments(fit)
        eif = eif_psi(fit, m, d)
        pn = float(np.mean(eif))
        if (rounds >= 1 and abs(pn) <= residual_bound(eif)) or rounds >= max_rounds:
            break
        offset = logit(fit.qbar_a(d.a))
        e, ridge = fit_logistic_safe(x, y, offset=offset)
        ridge_used |= ridge
        eps += e
        fit = fit.updated(
            expit(logit(fit.qbar1) + e[0] / g1),
            expit(logit(fit.qbar0) + e[1] / (1.0 - g1)),
            g1,
        )
        rounds += 1
    return PsiTarget(
        fit_star=fit,
        psi_hat=math.log(m.psi1) - math.log(m.psi0),
        epsilon=eps,
        pn_eif_psi=pn,
        rounds=rounds,
        meta={"ridge": ridge_used, "converged": abs(pn) <= residual_bound(eif)},
    )
