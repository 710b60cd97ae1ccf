"""Unconstrained parameter layout and the joint log posterior.

The sampler works on one flat vector::

    [alpha_e0, alpha_emax, logit nu, logit xi, log sigma,
     z_beta (p), z_gamma (p), z_delta (p),
     u_prog (k), u_pred (k), log tau (3), log c (3)]

Coefficients are non-centered, ``b = mask * z * s`` with ``s`` the family's
effective scale.  ``u_prog`` holds log lambda_star for dependent horseshoes.
Coordinates a family does not use are kept fixed by the sampler.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from . import _pykernels as pk
from .backend import get_backend
from .data import TrialDataset
from .emax import CoefficientSet
from .priors import BLOCKS, PriorSpec, ShrinkageState

FAMILY_CODE = {"flat": pk.FLAT, "null": pk.FLAT, "oracle_mask": pk.FLAT,
               "horseshoe": pk.HORSESHOE, "reg_horseshoe": pk.REG_HORSESHOE,
               "spike_slab": pk.SPIKE_SLAB}
H_SPAN = 9.5
H_MIN = 0.5


class Layout:
    """Offsets into the unconstrained vector for ``p`` columns and ``k`` groups."""

    def __init__(self, p: int, k: int):
        self.p, self.k = p, k
        self.z = slice(5, 5 + 3 * p)
        self.u1 = slice(5 + 3 * p, 5 + 3 * p + k)
        self.u2 = slice(self.u1.stop, self.u1.stop + k)
        self.tau = slice(self.u2.stop, self.u2.stop + 3)
        self.c = slice(self.tau.stop, self.tau.stop + 3)
        self.dim = self.c.stop

    def z_block(self, b: int) -> slice:
        return slice(5 + b * self.p, 5 + (b + 1) * self.p)

    def names(self) -> list[str]:
        out = ["alpha_e0", "alpha_emax", "logit_nu", "logit_xi", "log_sigma"]
        for b in BLOCKS:
            out += [f"z_{b}[{j}]" for j in range(self.p)]
        out += [f"u_prog[{g}]" for g in range(self.k)]
        out += [f"u_pred[{g}]" for g in range(self.k)]
        out += [f"log_tau_{b}" for b in BLOCKS] + [f"log_c_{b}" for b in BLOCKS]
        return out

    def used(self, spec: PriorSpec) -> np.ndarray:
        """0/1 vector of coordinates that the family actually samples."""
        m = np.zeros(self.dim)
        m[:5] = 1.0
        m[self.z] = spec.structural_mask(self.p).ravel()
        if spec.family in ("horseshoe", "reg_horseshoe"):
            m[self.u1] = m[self.u2] = m[self.tau] = 1.0
        if spec.family in ("reg_horseshoe", "spike_slab"):
            m[self.c] = 1.0
        return m


def hyper_vector(spec: PriorSpec, d_max: float) -> np.ndarray:
    hyp = np.zeros(pk.N_HYPER)
    hyp[pk.H_SIG_E0] = spec.sigma_e0
    hyp[pk.H_SIG_EMAX] = spec.sigma_emax
    hyp[pk.H_NU_A], hyp[pk.H_NU_B] = spec.nu_a, spec.nu_b
    hyp[pk.H_XI_A], hyp[pk.H_XI_B] = spec.xi_a, spec.xi_b
    hyp[pk.H_SIG_A], hyp[pk.H_SIG_B] = spec.sigma_a, spec.sigma_b
    hyp[pk.H_LOG_DMAX] = math.log(spec.d_max if spec.d_max is not None else d_max)
    etas = [e if e is not None else 1.0 for e in spec.etas]
    hyp[pk.H_ETA:pk.H_ETA + 3] = etas
    hyp[pk.H_SLAB_A] = spec.slab_a if spec.slab_a is not None else 1.0
    hyp[pk.H_SLAB_B] = spec.slab_b if spec.slab_b is not None else 1.0
    return hyp


def make_kernel(data: TrialDataset, spec: PriorSpec, masks=None, backend: str | None = None):
    """Posterior kernel object for ``data`` under ``spec``.

    ``masks`` overrides the (3, p) coefficient mask (spike-and-slab indicators).
    """
    spec = spec.resolved(data.k, data.d_max)
    mod = get_backend(backend)
    if masks is None:
        masks = spec.structural_mask(data.p)
    return mod.PosteriorKernel(data.covariates, data.dose, data.response, data.group_index,
                               data.k, FAMILY_CODE[spec.family], spec.dependent,
                               np.asarray(masks, dtype=float), hyper_vector(spec, data.d_max))


@dataclass
class ModelParameters:
    """One MCMC state on the constrained scale."""

    coeffs: CoefficientSet
    shrink: ShrinkageState | None
    nu: float
    xi: float


def indicator_masks(lambda_prog, lambda_pred, group_index) -> np.ndarray:
    gi = np.asarray(group_index)
    prog = np.asarray(lambda_prog, dtype=float)[gi]
    pred = np.asarray(lambda_pred, dtype=float)[gi]
    return np.vstack([prog, pred, pred])


def to_parameters(theta, data: TrialDataset, spec: PriorSpec, masks=None) -> ModelParameters:
    """Map an unconstrained vector to :class:`ModelParameters`."""
    spec = spec.resolved(data.k, data.d_max)
    kern = make_kernel(data, spec, masks, backend="python")
    theta = np.asarray(theta, dtype=float)
    lay = Layout(data.p, data.k)
    coef = kern.coefficients(theta)
    nu, xi = float(expit(theta[2])), float(expit(theta[3]))
    cs = CoefficientSet(theta[0], theta[1], math.log(nu) + math.log(spec.d_max), coef[0], coef[1],
                        coef[2], H_MIN + H_SPAN * xi, math.exp(theta[4]))
    fam = spec.family
    if fam in ("flat", "null", "oracle_mask"):
        shrink = None
    elif fam == "spike_slab":
        m = kern.masks
        prog = np.zeros(data.k)
        pred = np.zeros(data.k)
        for g in range(data.k):
            cols = data.group_index == g
            prog[g] = float(m[0, cols].max()) if cols.any() else 0.0
            pred[g] = float(m[1, cols].max()) if cols.any() else 0.0
        shrink = ShrinkageState(prog, pred, np.ones(3), np.exp(theta[lay.c]))
    else:
        u1, u2 = np.exp(theta[lay.u1]), np.exp(theta[lay.u2])
        star = u1 if spec.dependent else None
        prog = np.maximum(u1, u2) if spec.dependent else u1
        shrink = ShrinkageState(prog, u2, np.exp(theta[lay.tau]), np.exp(theta[lay.c]), star)
    return ModelParameters(cs, shrink, nu, xi)


def from_parameters(state: ModelParameters, data: TrialDataset, spec: PriorSpec) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`to_parameters`; returns (theta, masks)."""
    spec = spec.resolved(data.k, data.d_max)
    lay = Layout(data.p, data.k)
    theta = np.zeros(lay.dim)
    cs = state.coeffs
    theta[0], theta[1] = cs.alpha_e0, cs.alpha_emax
    theta[2], theta[3] = logit(state.nu), logit(state.xi)
    theta[4] = math.log(cs.sigma)
    b = cs.stacked()
    fam = spec.family
    masks = spec.structural_mask(data.p)
    if fam in ("flat", "null", "oracle_mask"):
        theta[lay.z] = (b * masks).ravel()
        return theta, masks
    sh = state.shrink
    theta[lay.c] = np.log(sh.c)
    if fam == "spike_slab":
        masks = indicator_masks(sh.lambda_prog, sh.lambda_pred, data.group_index)
        s = np.broadcast_to(sh.c[:, None], b.shape)
    else:
        u1 = sh.lambda_star if spec.dependent else sh.lambda_prog
        theta[lay.u1] = np.log(u1)
        theta[lay.u2] = np.log(sh.lambda_pred)
        theta[lay.tau] = np.log(sh.tau)
        from .priors import effective_scales

        s = effective_scales(sh, spec, data.group_index)
    theta[lay.z] = np.where(masks > 0, b / s, 0.0).ravel()
    return theta, masks


def log_posterior_and_grad(state, data: TrialDataset, prior: PriorSpec, masks=None, backend=None):
    """Joint log density (up to a constant) and gradient on unconstrained coordinates.

    ``state`` is either a :class:`ModelParameters` or an unconstrained vector.
    Spike-and-slab indicators enter through ``masks`` and are held fixed.
    Returns ``(-inf, grad)`` when the density is not finite.
    """
    if isinstance(state, ModelParameters):
        theta, masks = from_parameters(state, data, prior)
    else:
        theta = np.asarray(state, dtype=float)
    kern = make_kernel(data, prior, masks, backend=backend)
    return kern.logp_grad(theta)
