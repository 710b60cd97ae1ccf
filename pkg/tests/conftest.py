import numpy as np
import pandas as pd
import pytest

from doseshrink.data import build_dataset

DOSES = np.array([0.0, 12.5, 25.0, 50.0, 100.0])
ETAS = {"eta_beta": 0.03, "eta_gamma": 0.006, "eta_delta": 0.026}
ALL_LABELS = ("sas", "sas_dep", "hs", "hs_dep", "rhs", "rhs_dep", "noshrink", "null")


def simulate_small(n=100, k=3, seed=0):
    rng = np.random.default_rng(seed)
    dose = np.repeat(DOSES, n // 5)
    x = rng.standard_normal((n, k))
    emax = 0.17 + 0.1 * x[:, 1]
    y = 1.2 + 0.1 * x[:, 0] + emax * dose / (dose + 20) + 0.25 * rng.standard_normal(n)
    return build_dataset(dose, y, {f"x{j + 1}": x[:, j] for j in range(k)})


def example_frame(n=270, seed=7):
    """Synthetic trial shaped like a typical dose-finding study: 4 continuous, 6 categorical covariates."""
    rng = np.random.default_rng(seed)
    dose = rng.choice(DOSES, n)
    df = pd.DataFrame({"dose": dose})
    for j in range(4):
        df[f"c{j + 1}"] = rng.normal(50, 10, n)
    for j in range(6):
        df[f"f{j + 1}"] = rng.choice(["a", "b", "c"] if j < 2 else ["no", "yes"], n)
    emax = 1.0 + 0.6 * (df.f1 == "b").to_numpy(float)
    df["response"] = -0.6 + emax * dose ** 2 / (dose ** 2 + 30.0 ** 2) + 0.5 * rng.standard_normal(n)
    return df


def spec_for(label, **kw):
    from doseshrink.priors import PriorSpec

    if label.split("_")[0] in ("hs", "rhs"):
        kw = {**ETAS, **kw}
    return PriorSpec.from_label(label, **kw)


@pytest.fixture(scope="session")
def small_data():
    return simulate_small()


@pytest.fixture(scope="session")
def example_data():
    df = example_frame()
    return build_dataset(df.dose.to_numpy(), df.response.to_numpy(),
                         {c: df[c].to_numpy() for c in ("c1", "c2", "c3", "c4")},
                         {c: df[c].tolist() for c in ("f1", "f2", "f3", "f4", "f5", "f6")})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def conjugate_case(n=200, k=2, seed=3):
    """Two-arm trial whose E0 part is linear in x and whose dose part is one free shift.

    With a single active level the curve only adds a free constant to the
    active arm, so under flat priors (alpha_e0, beta, shift) | sigma is the
    least-squares Gaussian and sigma has a one-dimensional posterior.
    Returns (data, spec, exact posterior mean of alpha_e0, exact sd).
    """
    from scipy import integrate

    from doseshrink.priors import PriorSpec

    rng = np.random.default_rng(seed)
    dose = np.repeat([0.0, 100.0], n // 2)
    x = rng.standard_normal((n, k))
    y = 1.2 + x @ np.linspace(0.3, -0.2, k) + 0.2 * (dose > 0) + 0.25 * rng.standard_normal(n)
    data = build_dataset(dose, y, {f"x{j + 1}": x[:, j] for j in range(k)})
    support = np.zeros((3, data.p), dtype=bool)
    support[0] = True
    spec = PriorSpec("oracle_mask", support=tuple(map(tuple, support)), sigma_e0=1e4, sigma_emax=1e4)
    design = np.column_stack([np.ones(n), data.covariates, (dose > 0).astype(float)])
    v = np.linalg.inv(design.T @ design)
    coef = v @ design.T @ y
    rss = float(np.sum((y - design @ coef) ** 2))
    q = design.shape[1]
    a, b = spec.sigma_a, spec.sigma_b

    def log_post(ls):   # density of log sigma, Jacobian included
        return -a * ls - b * np.exp(-ls) - (n - q) * ls - 0.5 * rss * np.exp(-2 * ls)

    ls_hat = 0.5 * np.log(rss / n)
    c = log_post(ls_hat)

    def w(ls, power):
        return np.exp(2 * power * ls) * np.exp(log_post(ls) - c)

    lo, hi = ls_hat - 2.0, ls_hat + 2.0
    z = integrate.quad(w, lo, hi, args=(0,), epsabs=0, epsrel=1e-12)[0]
    e_s2 = integrate.quad(w, lo, hi, args=(1,), epsabs=0, epsrel=1e-12)[0] / z
    return data, spec, float(coef[0]), float(np.sqrt(e_s2 * v[0, 0]))
