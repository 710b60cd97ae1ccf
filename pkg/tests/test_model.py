import math
import zlib

import numpy as np
import pytest
from scipy import optimize

from doseshrink.backend import available
from doseshrink.emax import emax_mean, patient_params
from doseshrink.model import (Layout, from_parameters, log_posterior_and_grad, make_kernel, to_parameters)

from conftest import ALL_LABELS, spec_for


def _theta(kern, rng, scale=0.7):
    return rng.normal(0, scale, kern.dim)


def _masks(label, data, rng):
    if label.startswith("sas"):
        return (rng.random((3, data.p)) < 0.5).astype(float)
    return None


def fd_error(kern, theta, h=1e-5):
    lp, g = kern.logp_grad(theta)
    fd = np.empty_like(g)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        fd[i] = (kern.logp_grad(theta + e)[0] - kern.logp_grad(theta - e)[0]) / (2 * h)
    return float(np.max(np.abs(fd - g) / np.maximum(1.0, np.abs(g))))


@pytest.mark.parametrize("label", ALL_LABELS)
def test_gradient_matches_finite_differences(label, example_data):
    rng = np.random.default_rng(zlib.crc32(label.encode()))
    spec = spec_for(label)
    kern = make_kernel(example_data, spec, _masks(label, example_data, rng), backend="python")
    for _ in range(3):
        assert fd_error(kern, _theta(kern, rng)) < 1e-4


def test_alpha_e0_gradient_is_gaussian_score(small_data, rng):
    spec = spec_for("noshrink")
    kern = make_kernel(small_data, spec, backend="python")
    theta = _theta(kern, rng, 0.3)
    state = to_parameters(theta, small_data, spec)
    pp = patient_params(state.coeffs, small_data.covariates)
    mu = emax_mean(pp, small_data.dose)
    s2 = state.coeffs.sigma ** 2
    expected = float(np.sum(small_data.response - mu)) / s2 - theta[0] / spec.sigma_e0 ** 2
    assert kern.logp_grad(theta)[1][0] == pytest.approx(expected, rel=1e-10)


def test_gradient_vanishes_at_mode(small_data):
    spec = spec_for("noshrink")
    kern = make_kernel(small_data, spec, backend="python")
    lay = Layout(small_data.p, small_data.k)
    used = lay.used(spec.resolved(small_data.k, small_data.d_max)) > 0

    def f(v):
        th = np.zeros(kern.dim)
        th[used] = v
        lp, g = kern.logp_grad(th)
        return -lp, -g[used]

    x0 = np.zeros(int(used.sum()))
    x0[:2] = [1.2, 0.2]
    res = optimize.minimize(f, x0, jac=True, method="BFGS", options={"gtol": 1e-9, "maxiter": 5000})
    res = optimize.minimize(f, res.x, jac=True, method="BFGS", options={"gtol": 1e-9, "maxiter": 5000})
    assert np.linalg.norm(f(res.x)[1]) < 1e-6


@pytest.mark.parametrize("label", ALL_LABELS)
def test_parameter_round_trip(label, example_data):
    rng = np.random.default_rng(11)
    spec = spec_for(label)
    masks = _masks(label, example_data, rng)
    if label.startswith("sas"):
        # indicators are per group: make the mask consistent with the groups
        gi = example_data.group_index
        ind = rng.random((2, example_data.k)) < 0.5
        masks = np.vstack([ind[0][gi], ind[1][gi], ind[1][gi]]).astype(float)
    kern = make_kernel(example_data, spec, masks, backend="python")
    lay = Layout(example_data.p, example_data.k)
    theta = _theta(kern, rng) * lay.used(spec.resolved(example_data.k, example_data.d_max))
    state = to_parameters(theta, example_data, spec, masks)
    back, m2 = from_parameters(state, example_data, spec)
    np.testing.assert_allclose(kern.coefficients(back), kern.coefficients(theta), atol=1e-12)
    lp1, _ = log_posterior_and_grad(state, example_data, spec)
    lp2, _ = kern.logp_grad(theta)
    assert lp1 == pytest.approx(lp2, rel=1e-10)
    if masks is not None:
        np.testing.assert_array_equal(m2, masks)


def test_parameter_maps(small_data):
    spec = spec_for("rhs")
    kern = make_kernel(small_data, spec, backend="python")
    theta = np.zeros(kern.dim)
    theta[2], theta[3] = 0.4, -1.0
    st = to_parameters(theta, small_data, spec)
    nu, xi = 1 / (1 + math.exp(-0.4)), 1 / (1 + math.exp(1.0))
    assert st.coeffs.alpha_log_ed50 == pytest.approx(math.log(nu * small_data.d_max))
    assert st.coeffs.h == pytest.approx(0.5 + 9.5 * xi)
    assert 0.5 <= st.coeffs.h <= 10


@pytest.mark.parametrize("backend", available())
def test_nonfinite_state_is_flagged(small_data, backend):
    spec = spec_for("noshrink")
    kern = make_kernel(small_data, spec, backend=backend)
    theta = np.zeros(kern.dim)
    theta[4] = -800.0       # sigma underflows
    lp, _ = kern.logp_grad(theta)
    assert lp == -math.inf


def test_null_family_has_no_coefficients(small_data, rng):
    spec = spec_for("null")
    kern = make_kernel(small_data, spec, backend="python")
    assert np.all(kern.coefficients(_theta(kern, rng)) == 0)


def test_loglik_agrees_with_emax_module(small_data, rng):
    spec = spec_for("hs_dep")
    kern = make_kernel(small_data, spec, backend="python")
    theta = _theta(kern, rng, 0.4)
    st = to_parameters(theta, small_data, spec)
    from doseshrink.emax import log_likelihood

    assert kern.loglik(theta) == pytest.approx(log_likelihood(st.coeffs, small_data), rel=1e-12)
