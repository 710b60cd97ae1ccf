"""Pure numpy implementation of the sampler hot path.

Mirrors ``_kernels.pyx`` line for line; used when the compiled extension is
not available (or ``DOSESHRINK_PURE_PYTHON=1``).
"""
import math

import numpy as np
from scipy.special import expit

FLAT, HORSESHOE, REG_HORSESHOE, SPIKE_SLAB = 0, 1, 2, 3
MAX_DELTA_H = 1000.0

# hyperparameter vector slots
H_SIG_E0, H_SIG_EMAX, H_NU_A, H_NU_B, H_XI_A, H_XI_B, H_SIG_A, H_SIG_B, H_LOG_DMAX = range(9)
H_ETA = 9  # three global scales
H_SLAB_A, H_SLAB_B = 12, 13
N_HYPER = 14


def _log1pexp(x):
    return np.logaddexp(0.0, x)



def _exp(v):
    """exp that overflows to inf instead of raising."""
    return float(np.exp(v))

class PosteriorKernel:
    """Joint log density and gradient on the unconstrained coordinates.

    Parameters
    ----------
    x : (n, p) covariate matrix
    dose, y : (n,) arrays
    group_index : (p,) group of each covariate column
    k : number of groups
    family : FLAT, HORSESHOE, REG_HORSESHOE or SPIKE_SLAB
    dependent : couple prognostic to predictive local scales via max()
    masks : (3, p) 0/1 array of coefficients present in the model
    hyper : length-14 hyperparameter vector
    """

    def __init__(self, x, dose, y, group_index, k, family, dependent, masks, hyper):
        self.x = np.ascontiguousarray(x, dtype=float)
        self.dose = np.ascontiguousarray(dose, dtype=float)
        self.y = np.ascontiguousarray(y, dtype=float)
        self.n, self.p = self.x.shape
        self.k = int(k)
        self.gi = np.ascontiguousarray(group_index, dtype=np.int64)
        self.family = int(family)
        self.dependent = bool(dependent)
        self.hyper = np.ascontiguousarray(hyper, dtype=float)
        self.active = self.dose > 0
        self.logd = np.where(self.active, np.log(np.where(self.active, self.dose, 1.0)), 0.0)
        self.set_masks(masks)
        p, k = self.p, self.k
        self.o_z = 5
        self.o_u1 = 5 + 3 * p
        self.o_u2 = self.o_u1 + k
        self.o_tau = self.o_u2 + k
        self.o_c = self.o_tau + 3
        self.dim = self.o_c + 3

    def set_masks(self, masks):
        m = np.ascontiguousarray(masks, dtype=float).reshape(3, self.p)
        self.masks = m

    def _group_sum(self, v):
        return np.bincount(self.gi, weights=v, minlength=self.k)

    def _scales(self, theta):
        """Effective prior sds (3, p) and pieces needed for the gradient."""
        p, k, gi = self.p, self.k, self.gi
        fam = self.family
        if fam == FLAT:
            return np.ones((3, p)), None
        if fam == SPIKE_SLAB:
            logc = theta[self.o_c:self.o_c + 3]
            return np.repeat(np.exp(logc)[:, None], p, axis=1), None
        u1 = theta[self.o_u1:self.o_u1 + k]
        u2 = theta[self.o_u2:self.o_u2 + k]
        if self.dependent:
            star_wins = u1 >= u2
            lprog = np.where(star_wins, u1, u2)
        else:
            star_wins = np.ones(k, dtype=bool)
            lprog = u1
        logtau = theta[self.o_tau:self.o_tau + 3]
        loglam = np.vstack([lprog[gi], u2[gi], u2[gi]])
        a = logtau[:, None] + loglam
        if fam == REG_HORSESHOE:
            logc = theta[self.o_c:self.o_c + 3]
            t = 2.0 * (a - logc[:, None])
            logs = a - 0.5 * _log1pexp(t)
            w = expit(t)
        else:
            logs = a
            w = np.zeros_like(a)
        return np.exp(logs), (star_wins, w)

    def coefficients(self, theta):
        s, _ = self._scales(theta)
        z = theta[self.o_z:self.o_z + 3 * self.p].reshape(3, self.p)
        return self.masks * z * s

    def _likelihood_parts(self, theta, coef):
        hyp = self.hyper
        a0, am, tnu, txi, ls = theta[:5]
        log_nu = -_log1pexp(-tnu)
        a_ed = log_nu + hyp[H_LOG_DMAX]
        xi = expit(txi)
        h = 0.5 + 9.5 * xi
        x = self.x
        e0 = a0 + x @ coef[0]
        em = am + x @ coef[1]
        l = a_ed + x @ coef[2]
        f = np.where(self.active, expit(h * (self.logd - l)), 0.0)
        mu = e0 + em * f
        r = self.y - mu
        return r, f, em, l, h, xi

    def loglik(self, theta):
        with np.errstate(over="ignore", invalid="ignore"):
            return self._loglik(np.asarray(theta, dtype=float))

    def _loglik(self, theta):
        coef = self.coefficients(theta)
        r = self._likelihood_parts(theta, coef)[0]
        ls = theta[4]
        val = -self.n * ls - 0.5 * _exp(-2.0 * ls) * float(r @ r) - 0.5 * self.n * math.log(2 * math.pi)
        return val if math.isfinite(val) else -math.inf

    def logp_grad(self, theta):
        with np.errstate(over="ignore", invalid="ignore"):
            return self._logp_grad(np.asarray(theta, dtype=float))

    def _logp_grad(self, theta):
        p, k, hyp, fam = self.p, self.k, self.hyper, self.family
        grad = np.zeros(self.dim)
        s, aux = self._scales(theta)
        z = theta[self.o_z:self.o_z + 3 * p].reshape(3, p)
        m = self.masks
        coef = m * z * s
        r, f, em, l, h, xi = self._likelihood_parts(theta, coef)
        a0, am, tnu, txi, ls = theta[:5]
        inv_s2 = _exp(-2.0 * ls)
        rss = float(r @ r)
        lp = -self.n * ls - 0.5 * inv_s2 * rss
        ge0 = r * inv_s2
        gem = ge0 * f
        fp = f * (1.0 - f)
        gl = -ge0 * em * h * fp
        gh = float(np.sum(ge0 * em * fp * (self.logd - l)))
        gcoef = np.vstack([self.x.T @ ge0, self.x.T @ gem, self.x.T @ gl])

        # intercepts, functional-uniform hyperparameters, residual sd
        nu = expit(tnu)
        lp += -0.5 * (a0 / hyp[H_SIG_E0]) ** 2 - 0.5 * (am / hyp[H_SIG_EMAX]) ** 2
        grad[0] = ge0.sum() - a0 / hyp[H_SIG_E0] ** 2
        grad[1] = gem.sum() - am / hyp[H_SIG_EMAX] ** 2
        lp += -hyp[H_NU_A] * _log1pexp(-tnu) - hyp[H_NU_B] * _log1pexp(tnu)
        grad[2] = gl.sum() * (1.0 - nu) + hyp[H_NU_A] * (1.0 - nu) - hyp[H_NU_B] * nu
        lp += -hyp[H_XI_A] * _log1pexp(-txi) - hyp[H_XI_B] * _log1pexp(txi)
        grad[3] = gh * 9.5 * xi * (1.0 - xi) + hyp[H_XI_A] * (1.0 - xi) - hyp[H_XI_B] * xi
        lp += -hyp[H_SIG_A] * ls - hyp[H_SIG_B] * _exp(-ls)
        grad[4] = -self.n + inv_s2 * rss - hyp[H_SIG_A] + hyp[H_SIG_B] * _exp(-ls)

        oz = self.o_z
        if fam == FLAT:
            grad[oz:oz + 3 * p] = (m * gcoef).ravel()
        else:
            lp += -0.5 * float(np.sum(m * z * z))
            grad[oz:oz + 3 * p] = (m * (gcoef * s - z)).ravel()
            dlogs = m * gcoef * coef
            if fam == SPIKE_SLAB:
                grad[self.o_c:self.o_c + 3] += dlogs.sum(axis=1)
            else:
                star_wins, w = aux
                dlam = dlogs * (1.0 - w)
                grad[self.o_tau:self.o_tau + 3] += dlam.sum(axis=1)
                if fam == REG_HORSESHOE:
                    grad[self.o_c:self.o_c + 3] += (dlogs * w).sum(axis=1)
                dprog = self._group_sum(dlam[0])
                dpred = self._group_sum(dlam[1] + dlam[2])
                grad[self.o_u1:self.o_u1 + k] += np.where(star_wins, dprog, 0.0)
                grad[self.o_u2:self.o_u2 + k] += dpred + np.where(star_wins, 0.0, dprog)
                # half-Cauchy(0, 1) local scales on the log scale
                for off in (self.o_u1, self.o_u2):
                    u = theta[off:off + k]
                    lp += float(np.sum(u - _log1pexp(2.0 * u)))
                    grad[off:off + k] += 1.0 - 2.0 * expit(2.0 * u)
                # half-Cauchy(0, eta) global scales
                v = theta[self.o_tau:self.o_tau + 3]
                t = 2.0 * (v - np.log(hyp[H_ETA:H_ETA + 3]))
                lp += float(np.sum(v - _log1pexp(t)))
                grad[self.o_tau:self.o_tau + 3] += 1.0 - 2.0 * expit(t)
            if fam in (REG_HORSESHOE, SPIKE_SLAB):
                wv = theta[self.o_c:self.o_c + 3]
                lp += float(np.sum(-hyp[H_SLAB_A] * wv - hyp[H_SLAB_B] * np.exp(-wv)))
                grad[self.o_c:self.o_c + 3] += -hyp[H_SLAB_A] + hyp[H_SLAB_B] * np.exp(-wv)

        if not (math.isfinite(lp) and np.all(np.isfinite(grad))):
            return -math.inf, grad
        return lp, grad


# ----------------------------------------------------------------------------
# NUTS (multinomial sampling, generalized no-U-turn criterion)


class _Frontier:
    __slots__ = ("z", "p", "g", "lp")

    def __init__(self, z, p, g, lp):
        self.z, self.p, self.g, self.lp = z, p, g, lp

    def copy(self):
        return _Frontier(self.z.copy(), self.p.copy(), self.g.copy(), self.lp)


def leapfrog(kernel, z, p, g, eps, inv_metric):
    p = p + 0.5 * eps * g
    z = z + eps * inv_metric * p
    lp, g = kernel.logp_grad(z)
    p = p + 0.5 * eps * g
    return z, p, g, lp


class _Tree:
    """Bookkeeping shared by one NUTS transition."""

    def __init__(self, kernel, eps, inv_metric, h0, u_sel):
        self.kernel = kernel
        self.eps = eps
        self.inv_metric = inv_metric
        self.h0 = h0
        self.u_sel = u_sel
        self.u_pos = 0
        self.n_leapfrog = 0
        self.sum_metro = 0.0
        self.divergent = False

    def uniform(self):
        u = self.u_sel[self.u_pos]
        self.u_pos += 1
        return u

    def build(self, depth, state, sign, out):
        """Extend ``state`` by 2**depth leapfrog steps.

        ``out`` receives p_sharp_beg, p_sharp_end, p_beg, p_end, rho, lsw and
        z_propose / lp_propose / g_propose.  Returns validity.
        """
        im = self.inv_metric
        if depth == 0:
            z, p, g, lp = leapfrog(self.kernel, state.z, state.p, state.g, sign * self.eps, im)
            state.z, state.p, state.g, state.lp = z, p, g, lp
            self.n_leapfrog += 1
            h = -lp + 0.5 * float(p @ (im * p))
            if not math.isfinite(h):
                h = math.inf
            if h - self.h0 > MAX_DELTA_H:
                self.divergent = True
            out["lsw"] = np.logaddexp(out["lsw"], self.h0 - h)
            self.sum_metro += 1.0 if self.h0 - h > 0 else math.exp(self.h0 - h)
            out["z"], out["g"], out["lp"] = z, g, lp
            ps = im * p
            out["ps_beg"], out["ps_end"] = ps, ps
            out["p_beg"], out["p_end"] = p, p
            out["rho"] = out["rho"] + p
            return not self.divergent

        init = {"lsw": -math.inf, "rho": np.zeros_like(state.z)}
        if not self.build(depth - 1, state, sign, init):
            return False
        final = {"lsw": -math.inf, "rho": np.zeros_like(state.z)}
        if not self.build(depth - 1, state, sign, final):
            return False

        lsw_sub = np.logaddexp(init["lsw"], final["lsw"])
        out["lsw"] = np.logaddexp(out["lsw"], lsw_sub)
        if final["lsw"] > lsw_sub:
            take_final = True
        else:
            take_final = self.uniform() < _exp(final["lsw"] - lsw_sub)
        src = final if take_final else init
        out["z"], out["g"], out["lp"] = src["z"], src["g"], src["lp"]

        rho_sub = init["rho"] + final["rho"]
        out["rho"] = out["rho"] + rho_sub
        out["ps_beg"], out["p_beg"] = init["ps_beg"], init["p_beg"]
        out["ps_end"], out["p_end"] = final["ps_end"], final["p_end"]
        persist = _criterion(init["ps_beg"], final["ps_end"], rho_sub)
        persist &= _criterion(init["ps_beg"], final["ps_beg"], init["rho"] + final["p_beg"])
        persist &= _criterion(init["ps_end"], final["ps_end"], final["rho"] + init["p_end"])
        return persist


def _criterion(ps_minus, ps_plus, rho):
    return float(ps_plus @ rho) > 0 and float(ps_minus @ rho) > 0


def _nuts_transition(kernel, z0, lp0, g0, eps, inv_metric, momentum, u_dir, u_sel, max_depth):
    """Unguarded body of :func:`nuts_transition`."""
    im = inv_metric
    p0 = momentum
    h0 = -lp0 + 0.5 * float(p0 @ (im * p0))
    fwd = _Frontier(z0.copy(), p0.copy(), g0.copy(), lp0)
    bck = fwd.copy()
    ps_fwd = im * p0
    ps_bck = ps_fwd.copy()
    p_fwd_bck = p0.copy()
    p_bck_fwd = p0.copy()
    ps_fwd_bck = ps_fwd.copy()
    ps_bck_fwd = ps_fwd.copy()
    rho = p0.copy()
    lsw = 0.0
    sample = (z0, lp0, g0)
    tree = _Tree(kernel, eps, im, h0, u_sel)
    depth = 0
    while depth < max_depth:
        out = {"lsw": -math.inf, "rho": np.zeros_like(z0)}
        if u_dir[depth] > 0.5:
            rho_bck = rho
            valid = tree.build(depth, fwd, 1.0, out)
            if not valid:
                break
            ps_fwd_bck, ps_fwd = out["ps_beg"], out["ps_end"]
            p_fwd_bck = out["p_beg"]
            rho_fwd = out["rho"]
        else:
            rho_fwd = rho
            valid = tree.build(depth, bck, -1.0, out)
            if not valid:
                break
            ps_bck_fwd, ps_bck = out["ps_beg"], out["ps_end"]
            p_bck_fwd = out["p_beg"]
            rho_bck = out["rho"]
        depth += 1
        if out["lsw"] > lsw:
            sample = (out["z"], out["lp"], out["g"])
        elif tree.uniform() < _exp(out["lsw"] - lsw):
            sample = (out["z"], out["lp"], out["g"])
        lsw = np.logaddexp(lsw, out["lsw"])
        rho = rho_bck + rho_fwd
        persist = _criterion(ps_bck, ps_fwd, rho)
        persist &= _criterion(ps_bck, ps_fwd_bck, rho_bck + p_fwd_bck)
        persist &= _criterion(ps_bck_fwd, ps_fwd, rho_fwd + p_bck_fwd)
        if not persist:
            break
    n_lf = max(tree.n_leapfrog, 1)
    z, lp, g = sample
    energy = -lp + 0.5 * float(p0 @ (im * p0))
    return (np.array(z, copy=True), float(lp), np.array(g, copy=True), tree.sum_metro / n_lf,
            depth, tree.n_leapfrog, tree.divergent, energy)


def nuts_transition(kernel, z0, lp0, g0, eps, inv_metric, momentum, u_dir, u_sel, max_depth):
    """One NUTS transition.

    ``momentum`` is the freshly drawn momentum (already scaled by the metric),
    ``u_dir`` has ``max_depth`` uniforms for the doubling directions and
    ``u_sel`` at least ``2**max_depth`` uniforms for the multinomial draws.

    Returns (z, lp, grad, accept_stat, depth, n_leapfrog, divergent, energy).
    """
    # diverging trajectories overflow; they are caught by the energy check
    with np.errstate(over="ignore", invalid="ignore"):
        return _nuts_transition(kernel, z0, lp0, g0, eps, inv_metric, momentum, u_dir, u_sel, max_depth)
