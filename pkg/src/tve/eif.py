"""Efficient influence functions for log(CRR) and for the variance of its EIF.

Every aggregate (treatment-specific means and the five cross moments) is an
empirical mean over the current sample, so the marginal-W component of the
variance EIF has empirical mean exactly zero.

Notation used below: ``q1 = Qbar(1, W)``, ``q0 = Qbar(0, W)``,
``g1 = g(1 | W)``, ``g0 = 1 - g1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PsiDegenerateError

PSI_FLOOR = 1e-6


@dataclass(frozen=True)
class MomentSet:
    psi1: float
    psi0: float
    th1: float  # mean q1 (1 - q1) / g1
    th2: float  # mean q0 (1 - q0) / g0
    th3: float  # mean q1^2
    th4: float  # mean q0^2
    th5: float  # mean q1 q0

    def __post_init__(self):
        if not (self.psi1 >= PSI_FLOOR and self.psi0 >= PSI_FLOOR):
            raise PsiDegenerateError(
                f"treatment-specific mean below floor: psi1={self.psi1:.3g}, psi0={self.psi0:.3g}"
            )


@dataclass(frozen=True)
class EifVectors:
    d_psi: np.ndarray
    d_sigma_qw: np.ndarray
    d_sigma_qbar: np.ndarray
    d_sigma_g: np.ndarray
    h_qbar: np.ndarray
    h_g: np.ndarray

    @property
    def full(self):
        return self.d_sigma_qw + self.d_sigma_qbar + self.d_sigma_g

    @property
    def targeted(self):
        """Components the fluctuations act on (Q-bar and g)."""
        return self.d_sigma_qbar + self.d_sigma_g


def moments_from_arrays(q1, q0, g1):
    g0 = 1.0 - g1
    return MomentSet(
        psi1=float(np.mean(q1)),
        psi0=float(np.mean(q0)),
        th1=float(np.mean(q1 * (1.0 - q1) / g1)),
        th2=float(np.mean(q0 * (1.0 - q0) / g0)),
        th3=float(np.mean(q1 * q1)),
        th4=float(np.mean(q0 * q0)),
        th5=float(np.mean(q1 * q0)),
    )


def moments(fit):
    """Empirical moments of a nuisance fit; raises `PsiDegenerateError` below the floor."""
    return moments_from_arrays(fit.qbar1, fit.qbar0, fit.g1)


def eif_psi(fit, m, d):
    """Per-unit EIF of log(CRR) at (fit, m)."""
    a = d.a
    q1, q0, g1 = fit.qbar1, fit.qbar0, fit.g1
    qa = np.where(a == 1, q1, q0)
    weight = np.where(a == 1, 1.0 / (m.psi1 * g1), -1.0 / (m.psi0 * (1.0 - g1)))
    return weight * (d.y - qa) + q1 / m.psi1 - q0 / m.psi0


def plugin_integrand(q1, q0, g1, m):
    """Per-W integrand whose mean is the variance plug-in."""
    g0 = 1.0 - g1
    return (
        q1 * (1.0 - q1) / (m.psi1**2 * g1)
        + q0 * (1.0 - q0) / (m.psi0**2 * g0)
        + (q1 / m.psi1 - q0 / m.psi0) ** 2
    )


def sigma2_plugin(fit, m=None, d=None):
    """Substitution value of the EIF variance at ``fit``.

    ``d`` is accepted for signature symmetry; the plug-in does not use the
    observed treatment or outcome.
    """
    m = moments(fit) if m is None else m
    return float(np.mean(plugin_integrand(fit.qbar1, fit.qbar0, fit.g1, m)))


def sigma2_from_moments(m):
    """The same quantity written through the five cross moments."""
    return (
        m.th1 / m.psi1**2
        + m.th2 / m.psi0**2
        + m.th3 / m.psi1**2
        + m.th4 / m.psi0**2
        - 2.0 * m.th5 / (m.psi1 * m.psi0)
    )


def counterfactual_clever(q1, q0, g1, m):
    """Clever covariates evaluated at A=1 and A=0, plus the propensity one.

    Returns ``(h1, h0, hg)``; the observed-treatment covariate is
    ``A * h1 + (1 - A) * h0``.
    """
    g0 = 1.0 - g1
    p1, p0 = m.psi1, m.psi0
    inner1 = (
        (1.0 - 2.0 * q1) / g1
        + 2.0 * q1
        - 2.0 * p1 * q0 / p0
        - 2.0 / p1 * (m.th1 + m.th3)
        + 2.0 * m.th5 / p0
    )
    inner0 = (
        (1.0 - 2.0 * q0) / g0
        + 2.0 * q0
        - 2.0 * p0 * q1 / p1
        - 2.0 / p0 * (m.th2 + m.th4)
        + 2.0 * m.th5 / p1
    )
    h1 = inner1 / (p1**2 * g1)
    h0 = inner0 / (p0**2 * g0)
    hg = q0 * (1.0 - q0) / (p0**2 * g0**2) - q1 * (1.0 - q1) / (p1**2 * g1**2)
    return h1, h0, hg


def clever_covariates(fit, m, d):
    """``(h_qbar, h_g)`` per unit at the observed treatment."""
    h1, h0, hg = counterfactual_clever(fit.qbar1, fit.qbar0, fit.g1, m)
    return np.where(d.a == 1, h1, h0), hg


def qw_delta_terms(fit, m):
    """Marginal-W terms that the displayed Q_W component leaves out.

    The plug-in also depends on W through ``psi1`` and ``psi0``; the exact
    gradient adds ``dS/dpsi1 * (q1 - psi1) + dS/dpsi0 * (q0 - psi0)``. The
    sum has empirical mean zero, so targeting is unaffected.
    """
    d1 = -2.0 * (m.th1 + m.th3) / m.psi1**3 + 2.0 * m.th5 / (m.psi1**2 * m.psi0)
    d0 = -2.0 * (m.th2 + m.th4) / m.psi0**3 + 2.0 * m.th5 / (m.psi1 * m.psi0**2)
    return d1 * (fit.qbar1 - m.psi1) + d0 * (fit.qbar0 - m.psi0)


def eif_sigma2(fit, m, d):
    """All EIF pieces for the variance parameter at ``fit``."""
    q1, q0, g1 = fit.qbar1, fit.qbar0, fit.g1
    integrand = plugin_integrand(q1, q0, g1, m)
    h_qbar, h_g = clever_covariates(fit, m, d)
    qa = np.where(d.a == 1, q1, q0)
    return EifVectors(
        d_psi=eif_psi(fit, m, d),
        d_sigma_qw=integrand - np.mean(integrand),
        d_sigma_qbar=h_qbar * (d.y - qa),
        d_sigma_g=h_g * (d.a - g1),
        h_qbar=h_qbar,
        h_g=h_g,
    )
