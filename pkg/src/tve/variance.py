"""The four estimators of the variance of the log(CRR) EIF.

``ic``
    Empirical second moment of the EIF at the Psi-targeted fit.
``ss``
    Substitution value at the untargeted initial fit.
``iterative``
    Plug-in after repeated scalar logistic fluctuations of Q-bar and g.
``onestep``
    Plug-in after the one-step flow along the universal least favorable
    path (`tve.kernels`).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit
from scipy.stats import norm

from . import kernels
from .eif import eif_psi, moments, sigma2_plugin
from .errors import PsiDegenerateError
from .learners import fit_logistic_safe

D_EPS = 1e-3
MAX_ITER = 10_000
MAX_ROUNDS = 100
STEP_RHO = 0.01
MIN_STEP_FRACTION = 1e-12


class Termination(str, enum.Enum):
    SOLVED = "Solved"
    LOSS_INCREASED = "LossIncreased"
    MAX_ITER = "MaxIter"
    ALREADY_SOLVED = "AlreadySolved"


_CODES = {
    kernels.SOLVED: Termination.SOLVED,
    kernels.LOSS_INCREASED: Termination.LOSS_INCREASED,
    kernels.MAX_ITER: Termination.MAX_ITER,
    kernels.ALREADY_SOLVED: Termination.ALREADY_SOLVED,
}


@dataclass(frozen=True)
class FlowTrace:
    """Path of a targeting run.

    ``loss_path`` and ``pn_eif_path`` have ``steps + 1`` entries (the
    starting point first). ``step_path`` holds the epsilon magnitude of each
    kept step (one-step) or the fitted ``eps_q`` of each round (iterative).
    """

    steps: int
    loss_path: np.ndarray
    pn_eif_path: np.ndarray
    termination: Termination
    epsilon_total: float
    step_path: np.ndarray = field(default_factory=lambda: np.zeros(0))
    fit: object = field(default=None, compare=False, repr=False)
    meta: dict = field(default_factory=dict, compare=False)

    def to_dict(self):
        return {
            "steps": int(self.steps),
            "termination": self.termination.value,
            "epsilon_total": float(self.epsilon_total),
            "loss_path": [float(v) for v in self.loss_path],
            "pn_eif_path": [float(v) for v in self.pn_eif_path],
            "step_path": [float(v) for v in self.step_path],
            **{k: v for k, v in self.meta.items() if isinstance(v, (int, float, str, bool))},
        }


@dataclass(frozen=True)
class VarianceReport:
    ic: float
    ss: float
    iterative: float
    onestep: float
    iterative_trace: FlowTrace
    onestep_trace: FlowTrace

    def as_dict(self):
        return {"ic": self.ic, "ss": self.ss, "iterative": self.iterative, "onestep": self.onestep}


def _arrays(d):
    return d.y.astype(float), d.a.astype(float)


def stopping_threshold(sd, n):
    """``sd / (sqrt(n) log n)``."""
    return sd / (math.sqrt(n) * math.log(n))


def flow_state(d, fit):
    """``(pn, sd, loss)`` at ``fit``: Pn[D*] of the targeted EIF part, the sd
    of the full variance EIF and the empirical log-likelihood loss."""
    y, a = _arrays(d)
    ok, pn, sd, loss, *_ = kernels.state_numpy(y, a, fit.qbar1, fit.qbar0, fit.g1)
    if not ok:
        raise PsiDegenerateError("treatment-specific mean below floor")
    return pn, sd, loss


def is_solved(d, fit):
    pn, sd, _ = flow_state(d, fit)
    return abs(pn) <= stopping_threshold(sd, d.n)


def var_ic(d, pt):
    """Mean of the squared log(CRR) EIF at the Psi-targeted fit."""
    fit = pt.fit_star
    eif = eif_psi(fit, moments(fit), d)
    return float(np.mean(eif * eif))


def var_ss(d, fit0):
    """Plug-in at the initial fit."""
    return sigma2_plugin(fit0)


def var_onestep(d, fit0, d_eps=D_EPS, max_iter=MAX_ITER, rho=STEP_RHO, use_numba=None):
    """One-step TMLE of the variance along the universal least favorable path.

    Parameters
    ----------
    d_eps : float
        Largest epsilon step; the kernel halves it when a trial step does
        not decrease the loss or moves Pn[D*] by more than ``rho``
        relative.
    max_iter : int
        Cap on kept steps.
    use_numba : bool or None
        Kernel choice; None follows ``TVE_NUMBA``.

    Returns
    -------
    (float, FlowTrace)
    """
    if d.n < 2:
        raise ValueError("the flow needs n >= 2")
    y, a = _arrays(d)
    g_lo, g_hi, q_lo, q_hi = fit0.truncation_bounds
    flow = kernels.get_flow(use_numba)
    q1, q0, g1, loss_path, pn_path, step_path, code, eps_total = flow(
        y, a,
        np.ascontiguousarray(fit0.qbar1, dtype=float),
        np.ascontiguousarray(fit0.qbar0, dtype=float),
        np.ascontiguousarray(fit0.g1, dtype=float),
        float(d_eps), int(max_iter), float(rho),
        float(g_lo), float(g_hi), float(q_lo), float(q_hi),
        float(d_eps) * MIN_STEP_FRACTION,
    )
    if code == kernels.PSI_DEGENERATE:
        raise PsiDegenerateError("treatment-specific mean fell below the floor during the flow")
    term = _CODES[int(code)]
    if term is Termination.ALREADY_SOLVED:
        fit = fit0
    else:
        fit = fit0.updated(q1, q0, g1)
    trace = FlowTrace(
        steps=len(step_path),
        loss_path=np.asarray(loss_path),
        pn_eif_path=np.asarray(pn_path),
        termination=term,
        epsilon_total=float(eps_total),
        step_path=np.asarray(step_path),
        fit=fit,
        meta={"d_eps": float(d_eps), "rho": float(rho)},
    )
    return sigma2_plugin(fit), trace


def var_iterative(d, fit0, max_rounds=MAX_ROUNDS):
    """Iterative TMLE of the variance.

    Each round fits scalar ``eps_q`` (Y on ``-h_qbar``, offset logit Q-bar)
    and ``eps_g`` (A on ``-h_g``, offset logit g) by logistic MLE, applies
    both, re-truncates and recomputes. Stops when the residual threshold is
    met, after ``max_rounds``, or with LossIncreased when two consecutive
    rounds raise the loss without shrinking ``|Pn[D*]|``.

    Returns
    -------
    (float, FlowTrace)
    """
    y, a = _arrays(d)
    fit = fit0
    pn, sd, loss = flow_state(d, fit)
    losses, pns, eps_q, eps_g = [loss], [pn], [], []
    strikes = 0
    ridge_used = False
    term = Termination.MAX_ITER
    if abs(pn) <= stopping_threshold(sd, d.n):
        term = Termination.ALREADY_SOLVED
    else:
        for _ in range(max_rounds):
            h1, h0, hg = kernels.state_numpy(y, a, fit.qbar1, fit.qbar0, fit.g1)[4:]
            hq = np.where(d.a == 1, h1, h0)
            eq, rq = fit_logistic_safe(-hq[:, None], y, offset=logit(fit.qbar_a(d.a)))
            eg, rg = fit_logistic_safe(-hg[:, None], a, offset=logit(fit.g1))
            ridge_used |= rq or rg
            fit = fit.updated(
                expit(logit(fit.qbar1) - eq[0] * h1),
                expit(logit(fit.qbar0) - eq[0] * h0),
                expit(logit(fit.g1) - eg[0] * hg),
            )
            new_pn, sd, new_loss = flow_state(d, fit)
            eps_q.append(float(eq[0]))
            eps_g.append(float(eg[0]))
            losses.append(new_loss)
            pns.append(new_pn)
            if abs(new_pn) <= stopping_threshold(sd, d.n):
                term = Termination.SOLVED
                break
            stalled = new_loss > loss and abs(new_pn) >= abs(pn)
            strikes = strikes + 1 if stalled else 0
            pn, loss = new_pn, new_loss
            if strikes >= 2:
                term = Termination.LOSS_INCREASED
                break
    trace = FlowTrace(
        steps=len(eps_q),
        loss_path=np.asarray(losses),
        pn_eif_path=np.asarray(pns),
        termination=term,
        epsilon_total=float(sum(eps_q)),
        step_path=np.asarray(eps_q),
        fit=fit,
        meta={"epsilon_g_total": float(sum(eps_g)), "ridge": ridge_used},
    )
    return sigma2_plugin(fit), trace


def estimate_variances(d, fit0, pt, **onestep_opts):
    """All four estimators on one dataset."""
    it, it_trace = var_iterative(d, fit0)
    os_, os_trace = var_onestep(d, fit0, **onestep_opts)
    return VarianceReport(
        ic=var_ic(d, pt),
        ss=var_ss(d, fit0),
        iterative=it,
        onestep=os_,
        iterative_trace=it_trace,
        onestep_trace=os_trace,
    )


def z_value(level):
    return float(norm.ppf(0.5 + level / 2.0))


def confidence_interval(psi_hat, sigma2, n, level=0.95):
    """Wald interval ``psi_hat -/+ z * sqrt(sigma2 / n)``."""
    if sigma2 < 0 or n < 1:
        raise ValueError("need sigma2 >= 0 and n >= 1")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    half = z_value(level) * math.sqrt(sigma2 / n)
    return psi_hat - half, psi_hat + half
