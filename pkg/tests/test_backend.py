import os
import subprocess
import sys

import numpy as np
import pytest

from doseshrink.backend import BACKEND, available, get_backend
from doseshrink.model import Layout, make_kernel

from conftest import ALL_LABELS, spec_for

needs_cython = pytest.mark.skipif("cython" not in available(), reason="compiled kernels not built")


def _setup(label, data, seed):
    rng = np.random.default_rng(seed)
    spec = spec_for(label)
    masks = (rng.random((3, data.p)) < 0.5).astype(float) if label.startswith("sas") else None
    kp = make_kernel(data, spec, masks, backend="python")
    kc = make_kernel(data, spec, masks, backend="cython")
    used = Layout(data.p, data.k).used(spec.resolved(data.k, data.d_max))
    return rng, kp, kc, used


@needs_cython
@pytest.mark.parametrize("label", ALL_LABELS)
def test_logp_grad_agree(label, example_data):
    rng, kp, kc, _ = _setup(label, example_data, 1)
    for _ in range(5):
        th = rng.normal(0, 0.6, kp.dim)
        a, b = kp.logp_grad(th), kc.logp_grad(th)
        assert a[0] == pytest.approx(b[0], rel=1e-11, abs=1e-9)
        np.testing.assert_allclose(a[1], b[1], rtol=1e-9, atol=1e-9)
        assert kp.loglik(th) == pytest.approx(kc.loglik(th), rel=1e-11)
        np.testing.assert_allclose(kp.coefficients(th), kc.coefficients(th), rtol=1e-14, atol=1e-15)


@needs_cython
@pytest.mark.parametrize("label", ["rhs_dep", "hs", "sas_dep", "noshrink"])
def test_nuts_transition_agree(label, example_data):
    rng, kp, kc, used = _setup(label, example_data, 2)
    th = rng.normal(0, 0.3, kp.dim) * used
    lp, g = kp.logp_grad(th)
    im = used.copy()
    depth = 8
    for _ in range(3):
        mom = rng.standard_normal(kp.dim) * used
        u_dir, u_sel = rng.random(depth), rng.random(2 ** depth)
        rp = get_backend("python").nuts_transition(kp, th, lp, g, 0.02, im, mom, u_dir, u_sel, depth)
        rc = get_backend("cython").nuts_transition(kc, th, lp, g, 0.02, im, mom, u_dir, u_sel, depth)
        np.testing.assert_allclose(rp[0], rc[0], rtol=1e-8, atol=1e-9)
        assert rp[4:7] == rc[4:7]          # depth, leapfrogs, divergent
        assert rp[3] == pytest.approx(rc[3], rel=1e-8)
        th, lp, g = rp[0], rp[1], rp[2]


def test_env_var_forces_python():
    env = dict(os.environ, DOSESHRINK_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import doseshrink; print(doseshrink.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_backend_selection():
    assert get_backend("python").__name__.endswith("_pykernels")
    assert BACKEND in available()
    with pytest.raises(ValueError):
        get_backend("fortran")


@needs_cython
@pytest.mark.parametrize("label", ["rhs_dep", "sas"])
def test_transition_sequences_agree(label, small_data):
    # long chains of transitions over several step sizes reach early U-turns and divergences
    rng, kp, kc, used = _setup(label, small_data, 3)
    th = rng.normal(0, 0.3, kp.dim) * used
    th[0] = 1.2
    lp, g = kp.logp_grad(th)
    py, cy = get_backend("python"), get_backend("cython")
    for _ in range(60):
        for eps in (0.05, 0.3, 1.0, 3.0):
            mom = rng.standard_normal(kp.dim) * used
            u_dir, u_sel = rng.random(10), rng.random(1024)
            rp = py.nuts_transition(kp, th, lp, g, eps, used, mom, u_dir, u_sel, 10)
            rc = cy.nuts_transition(kc, th, lp, g, eps, used, mom, u_dir, u_sel, 10)
            np.testing.assert_allclose(rp[0], rc[0], rtol=1e-8, atol=1e-9)
            assert rp[4:7] == rc[4:7]
            th, lp, g = rp[0], rp[1], rp[2]


def test_python_backend_runs(small_data):
    from doseshrink.mcmc import MCMCConfig, run_chains

    cfg = MCMCConfig(chains=2, warmup=60, draws=30, seed=1)
    s = run_chains(small_data, spec_for("hs"), cfg, backend="python")
    assert s.backend == "python" and np.all(np.isfinite(s.draws))
