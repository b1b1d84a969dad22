import os
import subprocess
import sys

import numpy as np
import pytest

from tve import kernels
from tve._accel import numba_enabled
from tve.data import DgdSpec, simulate
from tve.eif import eif_sigma2, moments
from tve.learners import fit_nuisances, make_fit

from conftest import balanced_dataset, constant_fit, random_dataset, random_fit


def _args(d, fit, **kw):
    opts = dict(d_eps=1e-3, max_iter=10_000, rho=0.01, bounds=(0.025, 0.975, 0.001, 0.999), min_step=1e-15)
    opts.update(kw)
    return (
        d.y.astype(float), d.a.astype(float), fit.qbar1.copy(), fit.qbar0.copy(), fit.g1.copy(),
        opts["d_eps"], opts["max_iter"], opts["rho"], *opts["bounds"], opts["min_step"],
    )


class TestState:
    @pytest.mark.parametrize("state", [kernels.state_numpy, kernels.state_numba], ids=["numpy", "numba"])
    def test_matches_eif_module(self, state, rng):
        d = random_dataset(60, rng)
        fit = random_fit(60, rng)
        ok, pn, sd, loss, h1, h0, hg = state(d.y * 1.0, d.a * 1.0, fit.qbar1, fit.qbar0, fit.g1)
        ev = eif_sigma2(fit, moments(fit), d)
        assert ok
        assert pn == pytest.approx(ev.targeted.mean(), abs=1e-12)
        assert sd == pytest.approx(np.std(ev.full, ddof=1), rel=1e-12)
        assert np.allclose(np.where(d.a == 1, h1, h0), ev.h_qbar, rtol=1e-12)
        assert np.allclose(hg, ev.h_g, rtol=1e-12, atol=1e-12)
        qa = fit.qbar_a(d.a)
        ga = np.where(d.a == 1, fit.g1, 1 - fit.g1)
        ref = -np.mean(d.y * np.log(qa) + (1 - d.y) * np.log(1 - qa)) - np.mean(np.log(ga))
        assert loss == pytest.approx(ref, rel=1e-12)

    @pytest.mark.parametrize("state", [kernels.state_numpy, kernels.state_numba], ids=["numpy", "numba"])
    def test_psi_floor(self, state):
        z = np.zeros(3)
        assert not state(z, z, np.full(3, 1e-8), np.full(3, 0.5), np.full(3, 0.5))[0]


class TestFlow:
    def test_variants_agree(self, sim500):
        d, _, fit = sim500
        rn = kernels.flow_numpy(*_args(d, fit))
        rb = kernels.flow_numba(*_args(d, fit))
        assert rn[6] == rb[6]
        assert len(rn[5]) == len(rb[5])
        assert np.allclose(rn[3], rb[3], rtol=1e-10)
        assert np.allclose(rn[0], rb[0], rtol=1e-8)

    @pytest.mark.parametrize("flow", [kernels.flow_numpy, kernels.flow_numba], ids=["numpy", "numba"])
    def test_already_solved(self, flow):
        # constant fit on balanced cells: Pn[D*] = mean(-16 (Y - 1/2)) = 0
        d = balanced_dataset(3)
        fit = constant_fit(d.n)
        out = flow(*_args(d, fit))
        assert out[6] == kernels.ALREADY_SOLVED
        assert len(out[5]) == 0 and out[7] == 0.0
        assert np.array_equal(out[2], fit.g1)

    @pytest.mark.parametrize("flow", [kernels.flow_numpy, kernels.flow_numba], ids=["numpy", "numba"])
    def test_kept_steps_decrease_loss(self, flow, sim500):
        d, _, fit = sim500
        q1, q0, g1, loss, pn, steps, code, eps = flow(*_args(d, fit))
        assert np.all(np.diff(loss) < 0)
        assert np.all(steps > 0) and np.all(steps <= 1e-3)
        # each step moves epsilon by -sign(pn) * h
        assert eps == pytest.approx(-np.sum(np.sign(pn[:-1]) * steps), abs=1e-15)

    def test_max_iter(self, sim500):
        d, _, fit = sim500
        out = kernels.flow_numpy(*_args(d, fit, max_iter=3))
        if out[6] == kernels.MAX_ITER:
            assert len(out[5]) == 3

    def test_key_property_interior(self):
        # wide bounds and a mild fit: the path stays inside the box, so
        # the loss slope along each kept step is Pn[D*]
        d, _ = simulate(DgdSpec("simple", -2.0, 0.3), 400, 12)
        fit = fit_nuisances(d, seed=12, g_bounds=(1e-6, 1 - 1e-6), q_bounds=(1e-9, 1 - 1e-9))
        q1, q0, g1, loss, pn, steps, code, eps = kernels.flow_numpy(
            *_args(d, fit, bounds=(1e-6, 1 - 1e-6, 1e-9, 1 - 1e-9))
        )
        assert len(steps) > 5
        if len(steps):
            fd = np.diff(loss) / (np.sign(pn[:-1]) * -steps)
            mask = np.abs(pn[:-1]) > 0.01
            assert np.all(np.abs(fd - pn[:-1])[mask] <= 0.01 * np.abs(pn[:-1])[mask])


def test_env_flag_selects_numpy():
    code = "import tve.kernels as k; print(k.get_flow() is k.flow_numpy)"
    env = dict(os.environ, TVE_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "True"


def test_default_uses_numba():
    if numba_enabled():
        assert kernels.get_flow() is kernels.flow_numba
    assert kernels.get_flow(False) is kernels.flow_numpy
