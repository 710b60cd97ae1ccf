"""Indicator moves for the spike-and-slab prior.

Each move flips one group indicator (prognostic: the beta columns of the
group; predictive: its gamma and delta columns together).  The add move
draws the new coefficients from a Gaussian built by linearizing the mean
function around the state with the block set to zero, so the proposal is
the exact conditional when the mean is linear in the block.  The drop move
is the reverse of the add move, which keeps the scheme reversible.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import expit
from scipy.linalg import cho_solve

from .model import H_MIN, H_SPAN, Layout, from_parameters
from .priors import PriorSpec


class _Block:
    """Linear-Gaussian approximation for one indicator block."""

    __slots__ = ("mean", "chol", "prior_var", "ll0", "logdet_v")

    def __init__(self, mean, chol, prior_var, ll0, logdet_v):
        self.mean, self.chol, self.prior_var, self.ll0, self.logdet_v = mean, chol, prior_var, ll0, logdet_v

    def logq(self, b):
        """log N(b | mean, V) with V^{-1} = chol chol^T."""
        u = self.chol.T @ (b - self.mean)
        return -0.5 * b.size * math.log(2 * math.pi) - 0.5 * self.logdet_v - 0.5 * float(u @ u)

    def log_slab(self, b):
        return float(np.sum(-0.5 * np.log(2 * math.pi * self.prior_var) - 0.5 * b * b / self.prior_var))

    def log_evidence_ratio(self):
        """log of integral L(b) N(b|0,C) db / L(0) under the linearization."""
        u = self.chol.T @ self.mean
        return 0.5 * float(u @ u) + 0.5 * self.logdet_v - 0.5 * float(np.sum(np.log(self.prior_var)))


def _mean_parts(x, logd, active, theta, coef, log_dmax):
    a0, am, tnu, txi, ls = theta[:5]
    a_ed = -np.logaddexp(0.0, -tnu) + log_dmax
    h = H_MIN + H_SPAN * expit(txi)
    e0 = a0 + x @ coef[0]
    em = am + x @ coef[1]
    l = a_ed + x @ coef[2]
    f = np.where(active, expit(h * (logd - l)), 0.0)
    return e0 + em * f, em, f, h


class IndicatorSampler:
    """Birth/death moves over the 2k spike-and-slab indicators of one chain."""

    def __init__(self, data, spec: PriorSpec):
        self.spec = spec.resolved(data.k, data.d_max)
        self.x = np.asarray(data.covariates)
        self.y = np.asarray(data.response)
        self.dose = np.asarray(data.dose)
        self.active = self.dose > 0
        self.logd = np.where(self.active, np.log(np.where(self.active, self.dose, 1.0)), 0.0)
        self.log_dmax = math.log(self.spec.d_max)
        self.k, self.p = data.k, data.p
        self.groups = data.groups()
        self.gi = np.asarray(data.group_index)
        self.lay = Layout(self.p, self.k)

    # -- indicator bookkeeping -------------------------------------------------
    def indicators(self, masks):
        prog = np.zeros(self.k)
        pred = np.zeros(self.k)
        for g, cols in enumerate(self.groups):
            if cols.size:
                prog[g] = masks[0, cols[0]]
                pred[g] = masks[1, cols[0]]
        return prog, pred

    def log_prior_odds(self, which, g, prog, pred):
        """log p(lambda = 1, rest) - log p(lambda = 0, rest) for one flip."""
        phi = self.spec.phi
        if not self.spec.dependent:
            return math.log(phi) - math.log1p(-phi)
        inc = self.spec.phi_inc
        if which == 0:
            pstar = inc if pred[g] > 0 else phi
            return math.log(pstar) - math.log1p(-pstar)
        # predictive flip also changes the conditional of the prognostic indicator
        on = prog[g] > 0

        def bern(q):
            return math.log(q) if on else math.log1p(-q)

        return (math.log(phi) + bern(inc)) - (math.log1p(-phi) + bern(phi))

    # -- linearized block ------------------------------------------------------
    def block(self, theta, coef, which, cols):
        """Approximation at the state with the block's coefficients zeroed."""
        c = np.exp(theta[self.lay.c])
        base = coef.copy()
        rows = (0,) if which == 0 else (1, 2)
        for r in rows:
            base[r, cols] = 0.0
        mu0, em0, f0, h = _mean_parts(self.x, self.logd, self.active, theta, base, self.log_dmax)
        sigma2 = math.exp(2.0 * theta[4])
        r0 = self.y - mu0
        xc = self.x[:, cols]
        if which == 0:
            jac = xc
            prior_var = np.full(cols.size, c[0] ** 2)
        else:
            jac = np.hstack([xc * f0[:, None], xc * (-em0 * h * f0 * (1.0 - f0))[:, None]])
            prior_var = np.concatenate([np.full(cols.size, c[1] ** 2), np.full(cols.size, c[2] ** 2)])
        prec = jac.T @ jac / sigma2 + np.diag(1.0 / prior_var)
        chol = np.linalg.cholesky(prec)
        mean = cho_solve((chol, True), jac.T @ r0 / sigma2)
        logdet_v = -2.0 * float(np.sum(np.log(np.diag(chol))))
        n = self.y.size
        ll0 = -n * theta[4] - 0.5 * float(r0 @ r0) / sigma2 - 0.5 * n * math.log(2 * math.pi)
        return _Block(mean, chol, prior_var, ll0, logdet_v), rows

    def loglik(self, theta, coef):
        mu, *_ = _mean_parts(self.x, self.logd, self.active, theta, coef, self.log_dmax)
        r = self.y - mu
        n = self.y.size
        val = -n * theta[4] - 0.5 * float(r @ r) * math.exp(-2.0 * theta[4]) - 0.5 * n * math.log(2 * math.pi)
        return val if math.isfinite(val) else -math.inf

    # -- one sweep -------------------------------------------------------------
    def sweep(self, kernel, theta, masks, rng):
        """Visit all 2k indicators in random order; returns (theta, masks, n_flips).

        ``theta`` and ``masks`` are updated copies; ``kernel`` masks are synced.
        """
        theta = theta.copy()
        masks = masks.copy()
        prog, pred = self.indicators(masks)
        order = rng.permutation(2 * self.k)
        u = rng.random(2 * self.k)
        z_noise = rng.standard_normal((2 * self.k, 2 * max((c.size for c in self.groups), default=1)))
        c = np.exp(theta[self.lay.c])
        flips = 0
        for step, move in enumerate(order):
            which, g = divmod(int(move), self.k)
            cols = self.groups[g]
            if cols.size == 0:
                continue
            z = theta[self.lay.z].reshape(3, self.p)
            coef = masks * z * c[:, None]
            blk, rows = self.block(theta, coef, which, cols)
            odds = self.log_prior_odds(which, g, prog, pred)
            on = (prog if which == 0 else pred)[g] > 0
            if not on:
                eps = z_noise[step, :blk.mean.size]
                b = blk.mean + np.linalg.solve(blk.chol.T, eps)
                new = coef.copy()
                for i, r in enumerate(rows):
                    new[r, cols] = b[i * cols.size:(i + 1) * cols.size]
                log_a = odds + self.loglik(theta, new) + blk.log_slab(b) - blk.ll0 - blk.logq(b)
            else:
                b = np.concatenate([coef[r, cols] for r in rows])
                log_a = -(odds + self.loglik(theta, coef) + blk.log_slab(b) - blk.ll0 - blk.logq(b))
            if u[step] == 0.0 or math.log(u[step]) < log_a:
                flips += 1
                for i, r in enumerate(rows):
                    sl = slice(self.lay.z.start + r * self.p, self.lay.z.start + (r + 1) * self.p)
                    zr = theta[sl]  # view
                    if on:
                        zr[cols] = 0.0
                        masks[r, cols] = 0.0
                    else:
                        zr[cols] = b[i * cols.size:(i + 1) * cols.size] / c[r]
                        masks[r, cols] = 1.0
                if which == 0:
                    prog[g] = 0.0 if on else 1.0
                else:
                    pred[g] = 0.0 if on else 1.0
        kernel.set_masks(masks)
        return theta, masks, flips

    def conditional(self, theta, masks, which, g):
        """Laplace-integrated P(lambda = 1 | rest) for one group indicator."""
        c = np.exp(theta[self.lay.c])
        z = theta[self.lay.z].reshape(3, self.p)
        coef = masks * z * c[:, None]
        prog, pred = self.indicators(masks)
        blk, _ = self.block(theta, coef, which, self.groups[g])
        log_odds = self.log_prior_odds(which, g, prog, pred) + blk.log_evidence_ratio()
        return float(expit(log_odds))


def indicator_conditional(j, state, data, spec, which="pred"):
    """P(lambda_j = 1 | rest) for group ``j`` given a :class:`ModelParameters` state.

    ``which`` is ``"prog"`` or ``"pred"``.  The coefficient block is integrated
    out under the linearized likelihood, so with a flat likelihood this is the
    prior conditional (phi, or phi_inc when the dependent prior applies).
    """
    spec = spec.resolved(data.k, data.d_max)
    theta, masks = from_parameters(state, data, spec)
    sampler = IndicatorSampler(data, spec)
    return sampler.conditional(theta, masks, 0 if which == "prog" else 1, j)
