"""Hot loop of the one-step variance TMLE.

The flow integrates the universal least favorable path in many small steps,
recomputing the moments, clever covariates and loss after each one. At
n = 500 a single flow makes thousands of such passes, so the kernel is
compiled with numba. The same source also runs as plain numpy; the
``TVE_NUMBA`` environment flag picks the variant (see `tve._accel`).

All inputs are float64 arrays; ``a`` and ``y`` are 0/1 floats.
"""

import numpy as np

from ._accel import njit, numba_enabled

PSI_FLOOR = 1e-6

# termination codes shared with `tve.variance`
SOLVED = 0
LOSS_INCREASED = 1
MAX_ITER = 2
ALREADY_SOLVED = 3
PSI_DEGENERATE = 4


def _state(y, a, q1, q0, g1):
    """Quantities the flow needs at one point of the path.

    Returns ``(ok, pn, sd, loss, h1, h0, hg)`` where ``pn`` is the empirical
    mean of the targeted EIF part, ``sd`` the sample sd of the full EIF and
    ``ok`` is False when a treatment-specific mean is below the floor.
    """
    n = y.shape[0]
    g0 = 1.0 - g1
    p1 = q1.mean()
    p0 = q0.mean()
    if p1 < PSI_FLOOR or p0 < PSI_FLOOR:
        z = np.zeros(n)
        return False, 0.0, 0.0, 0.0, z, z, z
    v1 = q1 * (1.0 - q1)
    v0 = q0 * (1.0 - q0)
    th1 = (v1 / g1).mean()
    th2 = (v0 / g0).mean()
    th3 = (q1 * q1).mean()
    th4 = (q0 * q0).mean()
    th5 = (q1 * q0).mean()
    h1 = (
        (1.0 - 2.0 * q1) / g1 + 2.0 * q1 - 2.0 * p1 * q0 / p0 - 2.0 / p1 * (th1 + th3) + 2.0 * th5 / p0
    ) / (p1 * p1 * g1)
    h0 = (
        (1.0 - 2.0 * q0) / g0 + 2.0 * q0 - 2.0 * p0 * q1 / p1 - 2.0 / p0 * (th2 + th4) + 2.0 * th5 / p1
    ) / (p0 * p0 * g0)
    hg = v0 / (p0 * p0 * g0 * g0) - v1 / (p1 * p1 * g1 * g1)

    qa = a * q1 + (1.0 - a) * q0
    ga = a * g1 + (1.0 - a) * g0
    targeted = (a * h1 + (1.0 - a) * h0) * (y - qa) + hg * (a - g1)
    diff = q1 / p1 - q0 / p0
    integrand = v1 / (p1 * p1 * g1) + v0 / (p0 * p0 * g0) + diff * diff
    full = targeted + integrand - integrand.mean()
    pn = targeted.mean()
    c = full - full.mean()
    sd = np.sqrt((c * c).sum() / (n - 1)) if n > 1 else 0.0
    loss = -(y * np.log(qa) + (1.0 - y) * np.log1p(-qa)).mean() - np.log(ga).mean()
    return True, pn, sd, loss, h1, h0, hg


def _state_loops(y, a, q1, q0, g1):
    """`_state` written as fused loops, for the compiled variant."""
    n = y.shape[0]
    p1 = p0 = th1 = th2 = th3 = th4 = th5 = 0.0
    for i in range(n):
        u1, u0, v = q1[i], q0[i], g1[i]
        p1 += u1
        p0 += u0
        th1 += u1 * (1.0 - u1) / v
        th2 += u0 * (1.0 - u0) / (1.0 - v)
        th3 += u1 * u1
        th4 += u0 * u0
        th5 += u1 * u0
    p1 /= n
    p0 /= n
    h1 = np.empty(n)
    h0 = np.empty(n)
    hg = np.empty(n)
    if p1 < PSI_FLOOR or p0 < PSI_FLOOR:
        return False, 0.0, 0.0, 0.0, h1, h0, hg
    th1 /= n
    th2 /= n
    th3 /= n
    th4 /= n
    th5 /= n
    c1 = -2.0 / p1 * (th1 + th3) + 2.0 * th5 / p0
    c0 = -2.0 / p0 * (th2 + th4) + 2.0 * th5 / p1
    targeted = np.empty(n)
    integrand = np.empty(n)
    sum_t = sum_i = loss = 0.0
    for i in range(n):
        u1, u0, v = q1[i], q0[i], g1[i]
        w = 1.0 - v
        v1 = u1 * (1.0 - u1)
        v0 = u0 * (1.0 - u0)
        h1[i] = ((1.0 - 2.0 * u1) / v + 2.0 * u1 - 2.0 * p1 * u0 / p0 + c1) / (p1 * p1 * v)
        h0[i] = ((1.0 - 2.0 * u0) / w + 2.0 * u0 - 2.0 * p0 * u1 / p1 + c0) / (p0 * p0 * w)
        hg[i] = v0 / (p0 * p0 * w * w) - v1 / (p1 * p1 * v * v)
        if a[i] > 0.5:
            t = h1[i] * (y[i] - u1) + hg[i] * (1.0 - v)
            qa, ga = u1, v
        else:
            t = h0[i] * (y[i] - u0) - hg[i] * v
            qa, ga = u0, w
        diff = u1 / p1 - u0 / p0
        integrand[i] = v1 / (p1 * p1 * v) + v0 / (p0 * p0 * w) + diff * diff
        targeted[i] = t
        sum_t += t
        sum_i += integrand[i]
        if y[i] > 0.5:
            loss -= np.log(qa)
        else:
            loss -= np.log1p(-qa)
        loss -= np.log(ga)
    pn = sum_t / n
    mean_i = sum_i / n
    ss = 0.0
    for i in range(n):
        c = targeted[i] + integrand[i] - mean_i - pn
        ss += c * c
    sd = np.sqrt(ss / (n - 1)) if n > 1 else 0.0
    return True, pn, sd, loss / n, h1, h0, hg


def _make_flow(state):
    def flow(y, a, q1, q0, g1, d_eps, max_iter, rho, g_lo, g_hi, q_lo, q_hi, min_step):
        """Adaptive-step Euler integration of the one-step targeting flow.

        Each step moves ``logit -> logit + s * h * H`` with ``s`` the sign of
        the current Pn[D*], i.e. epsilon changes by ``-s * h`` on the path
        ``logit - epsilon * H`` and the loss falls at rate ``|Pn[D*]|``.
        A trial step is kept only if the loss strictly decreases and Pn[D*]
        moves by at most ``rho * |Pn[D*]|``; otherwise ``h`` is halved. ``h``
        doubles back towards ``d_eps`` after steps that changed Pn[D*] by
        less than a quarter of that budget. The flow gives up with
        LOSS_INCREASED once ``h`` falls below ``min_step``.
        """
        n = y.shape[0]
        thr_scale = np.sqrt(n) * np.log(n)
        loss_path = np.empty(max_iter + 1)
        pn_path = np.empty(max_iter + 1)
        step_path = np.empty(max_iter)

        ok, pn, sd, loss, h1, h0, hg = state(y, a, q1, q0, g1)
        if not ok:
            return q1, q0, g1, loss_path[:0], pn_path[:0], step_path[:0], PSI_DEGENERATE, 0.0
        loss_path[0] = loss
        pn_path[0] = pn
        if abs(pn) <= sd / thr_scale:
            return q1, q0, g1, loss_path[:1], pn_path[:1], step_path[:0], ALREADY_SOLVED, 0.0

        # work on the logit scale; clipping there equals clipping the probabilities
        lq_lo, lq_hi = np.log(q_lo / (1.0 - q_lo)), np.log(q_hi / (1.0 - q_hi))
        lg_lo, lg_hi = np.log(g_lo / (1.0 - g_lo)), np.log(g_hi / (1.0 - g_hi))
        lq1 = np.log(q1) - np.log1p(-q1)
        lq0 = np.log(q0) - np.log1p(-q0)
        lg1 = np.log(g1) - np.log1p(-g1)
        h = d_eps
        eps_total = 0.0
        k = 0
        code = MAX_ITER
        while k < max_iter:
            s = 1.0 if pn > 0 else -1.0
            nl1 = np.clip(lq1 + s * h * h1, lq_lo, lq_hi)
            nl0 = np.clip(lq0 + s * h * h0, lq_lo, lq_hi)
            nlg = np.clip(lg1 + s * h * hg, lg_lo, lg_hi)
            nq1 = 1.0 / (1.0 + np.exp(-nl1))
            nq0 = 1.0 / (1.0 + np.exp(-nl0))
            ng1 = 1.0 / (1.0 + np.exp(-nlg))
            c_ok, c_pn, c_sd, c_loss, c_h1, c_h0, c_hg = state(y, a, nq1, nq0, ng1)
            if not c_ok:
                code = PSI_DEGENERATE
                break
            if not (c_loss < loss and abs(c_pn - pn) <= rho * abs(pn)):
                h *= 0.5
                if h < min_step:
                    code = LOSS_INCREASED
                    break
                continue
            step_path[k] = h
            eps_total -= s * h
            small = abs(c_pn - pn) <= 0.25 * rho * abs(pn)
            q1, q0, g1 = nq1, nq0, ng1
            lq1, lq0, lg1 = nl1, nl0, nlg
            pn, sd, loss, h1, h0, hg = c_pn, c_sd, c_loss, c_h1, c_h0, c_hg
            k += 1
            loss_path[k] = loss
            pn_path[k] = pn
            if abs(pn) <= sd / thr_scale:
                code = SOLVED
                break
            if small:
                h = min(2.0 * h, d_eps)
        return q1, q0, g1, loss_path[: k + 1], pn_path[: k + 1], step_path[:k], code, eps_total

    return flow


state_numpy = _state
flow_numpy = _make_flow(_state)
state_numba = njit(_state_loops)
flow_numba = njit(_make_flow(state_numba))


def get_flow(use_numba=None):
    """The flow kernel; ``use_numba=None`` follows the ``TVE_NUMBA`` flag."""
    if use_numba is None:
        use_numba = numba_enabled()
    return flow_numba if use_numba else flow_numpy


def get_state(use_numba=None):
    if use_numba is None:
        use_numba = numba_enabled()
    return state_numba if use_numba else state_numpy
