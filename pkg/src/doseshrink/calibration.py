"""Global-scale calibration of horseshoe priors against a spike-and-slab benchmark.

For each coefficient block the horseshoe scale eta minimizes

    g(eta) = sum over q in (q_small, q_large) of
             [P_hs(|theta| < q | eta) - P_sas(|theta| < q)]^2.

Both probabilities are Monte Carlo averages of normal CDFs given the latent
scales (Rao-Blackwellized), and the horseshoe draws are reused for every eta
(common random numbers), so g is a smooth deterministic function of eta.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .priors import BLOCKS, inv_gamma, reg_scale

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
MIN_MC = 100_000


@dataclass(frozen=True)
class CalibrationSpec:
    """Inputs of the calibration for the three coefficient blocks.

    ``thresholds`` maps block name to ``(q_small, q_large)``.
    """

    phi: float
    thresholds: dict
    n_mc: int = 1_000_000
    eta_grid: tuple = (1e-5, 10.0)
    seed: int = 0
    slab_a: float = 0.5
    slab_b: float = 0.5
    rhs_slab_a: float = 2.0
    rhs_slab_b: float = 2.0

    def __post_init__(self):
        if not 0 <= self.phi <= 1:
            raise ValueError("phi must lie in [0, 1]")
        for b, (qs, ql) in self.thresholds.items():
            if not 0 < qs < ql:
                raise ValueError(f"block {b}: need 0 < q_small < q_large")
        if self.n_mc < MIN_MC:
            raise ValueError(f"n_mc must be at least {MIN_MC}")
        lo, hi = self.eta_grid
        if not 0 < lo < hi:
            raise ValueError("eta_grid must be an increasing positive interval")


def guesstimate_thresholds(e0_star: float, emax_star: float) -> dict:
    """Per-block (q_small, q_large) from guesstimates of E0 and Emax.

    10% and 100% of the guesstimate for beta and gamma; for delta (log ED50
    scale) fixed 10% and 100% changes, log 1.1 and log 2.
    """
    if e0_star == 0 or emax_star == 0:
        raise ValueError("guesstimates must be nonzero")
    e0, em = abs(float(e0_star)), abs(float(emax_star))
    return {"beta": (0.1 * e0, e0), "gamma": (0.1 * em, em), "delta": (math.log(1.1), math.log(2.0))}


def _abs_below(q, scale):
    """P(|N(0, scale^2)| < q), elementwise."""
    with np.errstate(divide="ignore"):
        return 2.0 * ndtr(q / scale) - 1.0


def tail_probs_spike_slab(phi, q, n_mc, rng, c=None, slab_a=0.5, slab_b=0.5) -> float:
    """P(|theta| < q) under the spike-and-slab prior.

    theta is 0 with probability 1 - phi and N(0, c^2) otherwise, with
    c ~ InvGamma(slab_a, slab_b) unless ``c`` is fixed.
    """
    if not q > 0:
        raise ValueError("q must be positive")
    if phi == 0:
        return 1.0
    if c is None:
        cs = inv_gamma(rng, slab_a, slab_b, n_mc)
        slab = float(np.mean(_abs_below(q, cs)))
    else:
        slab = float(_abs_below(q, float(c)))
    return (1.0 - phi) + phi * slab


class HorseshoeProbe:
    """P(|theta| < q | eta) with common random numbers across eta."""

    def __init__(self, family, n_mc, rng, slab_a=2.0, slab_b=2.0):
        if family not in ("horseshoe", "reg_horseshoe"):
            raise ValueError(f"calibration family must be a horseshoe, got {family!r}")
        self.family = family
        # tau = eta * tau0 with tau0 ~ C+(0, 1)
        self.tau0 = np.tan(0.5 * math.pi * rng.random(n_mc))
        self.lam = np.tan(0.5 * math.pi * rng.random(n_mc))
        self.c = inv_gamma(rng, slab_a, slab_b, n_mc) if family == "reg_horseshoe" else None
        self.base = self.tau0 * self.lam

    def scales(self, eta):
        if self.family == "horseshoe":
            return eta * self.base
        return reg_scale(eta * self.tau0, self.lam, self.c)

    def prob(self, q, eta) -> float:
        return float(np.mean(_abs_below(q, self.scales(eta))))

    def probs(self, qs, eta):
        s = self.scales(eta)
        return [float(np.mean(_abs_below(q, s))) for q in qs]


def golden_section(f, lo, hi, tol=1e-4, max_iter=200):
    """Minimize a unimodal ``f`` on [lo, hi]; returns (x, f(x), probes)."""
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    probes = [(c, fc), (d, fd)]
    for _ in range(max_iter):
        if b - a < tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
            probes.append((c, fc))
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
            probes.append((d, fd))
    x, fx = (c, fc) if fc <= fd else (d, fd)
    return x, fx, probes


@dataclass
class BlockCalibration:
    block: str
    eta: float
    objective: float
    q_small: float
    q_large: float
    p_sas: tuple
    p_hs: tuple
    at_boundary: bool = False
    probes: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"block": self.block, "eta": self.eta, "objective": self.objective,
                "q_small": self.q_small, "q_large": self.q_large,
                "p_spike_slab": list(self.p_sas), "p_horseshoe": list(self.p_hs),
                "at_boundary": self.at_boundary}


def calibrate_block(phi, q_small, q_large, family="horseshoe", n_mc=1_000_000, seed=0,
                    eta_grid=(1e-5, 10.0), block="beta", stream=0,
                    slab=(0.5, 0.5), rhs_slab=(2.0, 2.0)) -> BlockCalibration:
    """Calibrated eta for one block; golden-section search on log eta."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3, int(stream)]))
    qs = (q_small, q_large)
    p_sas = tuple(tail_probs_spike_slab(phi, q, n_mc, rng, slab_a=slab[0], slab_b=slab[1]) for q in qs)
    probe = HorseshoeProbe(family, n_mc, rng, *rhs_slab)

    def g(log_eta):
        ph = probe.probs(qs, math.exp(log_eta))
        return (ph[0] - p_sas[0]) ** 2 + (ph[1] - p_sas[1]) ** 2

    lo, hi = math.log(eta_grid[0]), math.log(eta_grid[1])
    x, fx, probes = golden_section(g, lo, hi, tol=1e-5)
    eta = math.exp(x)
    edge = 1e-3 * (hi - lo)
    at_boundary = x - lo < edge or hi - x < edge
    if at_boundary:
        warnings.warn(f"calibrated eta for {block} is at the search boundary ({eta:.3g})", stacklevel=2)
    return BlockCalibration(block, eta, fx, q_small, q_large, p_sas, tuple(probe.probs(qs, eta)),
                            at_boundary, [(math.exp(a), v) for a, v in probes])


def calibrate_eta(spec: CalibrationSpec, family: str = "horseshoe") -> dict:
    """Calibrated eta per block in ``spec.thresholds``; returns block -> BlockCalibration."""
    out = {}
    for i, b in enumerate(BLOCKS):
        if b not in spec.thresholds:
            continue
        qs, ql = spec.thresholds[b]
        out[b] = calibrate_block(spec.phi, qs, ql, family, spec.n_mc, spec.seed, spec.eta_grid,
                                 block=b, stream=i, slab=(spec.slab_a, spec.slab_b),
                                 rhs_slab=(spec.rhs_slab_a, spec.rhs_slab_b))
    return out


def calibration_report(spec: CalibrationSpec, results: dict, family: str) -> dict:
    return {
        "family": family,
        "phi": spec.phi,
        "n_mc": spec.n_mc,
        "seed": spec.seed,
        "eta_grid": list(spec.eta_grid),
        "blocks": {b: r.to_dict() for b, r in results.items()},
        "eta": {f"eta_{b}": r.eta for b, r in results.items()},
    }
