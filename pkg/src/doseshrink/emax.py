"""Sigmoid Emax mean function, covariate maps, likelihood and ML pre-fit."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .data import DataError, TrialDataset


class NonFiniteError(ArithmeticError):
    """A parameter map overflowed; the sampler treats this as a rejection."""


@dataclass(frozen=True)
class DoseResponseParams:
    """Per-patient curve parameters. Fields may be scalars or equal-length arrays."""

    e0: float | np.ndarray
    emax: float | np.ndarray
    ed50: float | np.ndarray
    h: float
    sigma: float = 1.0

    def __post_init__(self):
        if np.any(~(np.asarray(self.ed50) > 0)):
            raise ValueError("ed50 must be positive")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


@dataclass(frozen=True)
class CoefficientSet:
    alpha_e0: float
    alpha_emax: float
    alpha_log_ed50: float
    beta: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray
    h: float
    sigma: float

    def __post_init__(self):
        for name in ("beta", "gamma", "delta"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        if not (self.beta.shape == self.gamma.shape == self.delta.shape):
            raise ValueError("beta, gamma and delta must have equal length")

    @property
    def p(self) -> int:
        return self.beta.shape[0]

    def stacked(self) -> np.ndarray:
        """(3, p) array of beta, gamma, delta rows."""
        return np.vstack([self.beta, self.gamma, self.delta])


def hill_fraction(d, ed50, h):
    """d^h / (d^h + ED50^h), exactly 0 at d = 0.

    Computed as a logistic in ``h*(log d - log ED50)`` so nothing of the form
    0^h or inf/inf is evaluated.
    """
    d = np.asarray(d, dtype=float)
    ed50 = np.asarray(ed50, dtype=float)
    d_b, ed_b, h_b = np.broadcast_arrays(d, ed50, np.asarray(h, dtype=float))
    pos = d_b > 0
    out = np.zeros(d_b.shape)
    with np.errstate(over="ignore", divide="ignore"):
        t = h_b[pos] * (np.log(ed_b[pos]) - np.log(d_b[pos]))
        out[pos] = 1.0 / (1.0 + np.exp(t))
    return out if out.ndim else float(out)


def emax_mean(params: DoseResponseParams, d):
    """E0 + Emax * d^h / (d^h + ED50^h); broadcasts over patients and doses."""
    if np.any(np.asarray(d) < 0):
        raise ValueError("dose must be non-negative")
    return params.e0 + params.emax * hill_fraction(d, params.ed50, params.h)


def patient_params(coeffs: CoefficientSet, x) -> DoseResponseParams:
    """Apply the linear covariate maps to one row (or an (n, p) matrix) ``x``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != coeffs.p:
        raise ValueError(f"covariate row has length {x.shape[-1]}, expected {coeffs.p}")
    e0 = coeffs.alpha_e0 + x @ coeffs.beta
    emax = coeffs.alpha_emax + x @ coeffs.gamma
    with np.errstate(over="ignore"):
        ed50 = np.exp(coeffs.alpha_log_ed50 + x @ coeffs.delta)
    if not np.all(np.isfinite(ed50)) or np.any(ed50 <= 0):
        raise NonFiniteError("ED50 overflowed or underflowed")
    if x.ndim == 1:
        e0, emax, ed50 = float(e0), float(emax), float(ed50)
    return DoseResponseParams(e0, emax, ed50, coeffs.h, coeffs.sigma)


def log_likelihood(coeffs: CoefficientSet, data: TrialDataset) -> float:
    """Gaussian log-likelihood of the responses; -inf when not finite."""
    try:
        pp = patient_params(coeffs, data.covariates)
    except NonFiniteError:
        return -math.inf
    mu = emax_mean(pp, data.dose)
    r = data.response - mu
    s = coeffs.sigma
    val = -0.5 * data.n * math.log(2 * math.pi * s * s) - 0.5 * float(r @ r) / (s * s)
    return val if math.isfinite(val) else -math.inf


# ---------------------------------------------------------------------------
# maximum-likelihood pre-fit without covariates


@dataclass(frozen=True)
class PrefitResult:
    e0: float
    emax: float
    ed50: float
    h: float
    sigma: float
    rss: float
    converged: bool
    n_starts: int

    def to_dict(self) -> dict:
        return dict(vars(self))


H_LO, H_HI = 0.5, 10.0


def _linear_fit(frac, y):
    """Least-squares (E0, Emax) for fixed Hill fractions; returns coef, rss."""
    a = np.column_stack([np.ones_like(frac), frac])
    coef, *_ = np.linalg.lstsq(a, y, rcond=None)
    r = y - a @ coef
    return coef, float(r @ r)


def prefit(dose, response, n_starts: int = 12, seed: int = 0) -> PrefitResult:
    """Maximum-likelihood sigmoid Emax fit ignoring covariates.

    E0 and Emax enter linearly, so they are profiled out; the remaining
    (log ED50, h) problem is solved by multistart L-BFGS-B inside the box
    ED50 in [d_min/100, 100 d_max], h in [0.5, 10].  The best start is
    then polished jointly in all four curve parameters.  The ML residual sd
    is sqrt(RSS / n).
    """
    d = np.asarray(dose, dtype=float)
    y = np.asarray(response, dtype=float)
    if d.shape != y.shape or d.ndim != 1:
        raise DataError("dose and response must be 1-d arrays of equal length")
    if d.size < 5:
        raise DataError("insufficient data for pre-fit")
    active = d[d > 0]
    if active.size == 0:
        raise DataError("no active dose")
    lo, hi = math.log(active.min() / 100.0), math.log(active.max() * 100.0)

    def profile(v):
        frac = hill_fraction(d, math.exp(v[0]), v[1])
        return _linear_fit(frac, y)[1]

    rng = np.random.default_rng(seed)
    levels = np.unique(active)
    starts = [(math.log(float(np.median(active))), 1.0)]
    starts += [(math.log(lev), 1.0) for lev in levels]
    while len(starts) < n_starts:
        starts.append((rng.uniform(lo, hi), rng.uniform(H_LO, 4.0)))
    best, n_ok = None, 0
    for s in starts[:max(n_starts, 1)]:
        try:
            res = optimize.minimize(profile, np.array(s), method="L-BFGS-B",
                                    bounds=[(lo, hi), (H_LO, H_HI)],
                                    options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 500})
        except (ValueError, FloatingPointError):
            continue
        if not np.isfinite(res.fun):
            continue
        n_ok += 1
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise RuntimeError("pre-fit failed from every start")
    led50, h = best.x
    (e0, emax), rss = _linear_fit(hill_fraction(d, math.exp(led50), h), y)

    # joint polish; keeps the result only if it improves the fit inside the box
    def resid(v):
        return y - (v[0] + v[1] * hill_fraction(d, math.exp(v[2]), v[3]))

    try:
        pol = optimize.least_squares(resid, np.array([e0, emax, led50, h]),
                                     bounds=([-np.inf, -np.inf, lo, H_LO], [np.inf, np.inf, hi, H_HI]),
                                     xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
        prss = float(pol.fun @ pol.fun)
        if prss <= rss:
            e0, emax, led50, h = pol.x
            rss = prss
    except ValueError:
        pass
    sigma = math.sqrt(max(rss, 0.0) / d.size)
    return PrefitResult(float(e0), float(emax), float(math.exp(led50)), float(h),
                        sigma, rss, bool(best.success), n_ok)
