# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled log posterior, gradient and NUTS transition.

Same arithmetic as ``_pykernels``; the NUTS tree is built with preallocated
per-depth workspaces and the density is evaluated without the GIL.
"""
import numpy as np

from libc.math cimport exp, log, log1p, isfinite, INFINITY, M_PI

DEF N_VEC = 7  # z, g, ps_beg, ps_end, p_beg, p_end, rho
DEF V_Z = 0
DEF V_G = 1
DEF V_PSB = 2
DEF V_PSE = 3
DEF V_PB = 4
DEF V_PE = 5
DEF V_RHO = 6

FLAT, HORSESHOE, REG_HORSESHOE, SPIKE_SLAB = 0, 1, 2, 3
cdef int C_FLAT = 0, C_HS = 1, C_RHS = 2, C_SAS = 3
cdef double MAX_DELTA_H = 1000.0


cdef inline double softplus(double x) noexcept nogil:
    if x > 0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


cdef inline double sigmoid(double x) noexcept nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef inline double logaddexp(double a, double b) noexcept nogil:
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    if a > b:
        return a + log1p(exp(b - a))
    return b + log1p(exp(a - b))


cdef class PosteriorKernel:
    """Joint log density and gradient; see ``_pykernels.PosteriorKernel``."""

    cdef public int n, p, k, family, dim, o_z, o_u1, o_u2, o_tau, o_c
    cdef public bint dependent
    cdef public object x_arr, hyper, masks
    cdef const double[:, ::1] x
    cdef const double[::1] dose, y, logd, hyp
    cdef const long long[::1] gi
    cdef double[:, ::1] mk, s, w, coef, gcoef
    cdef double[::1] lamprog, dprog, dpred
    cdef int[::1] star

    def __init__(self, x, dose, y, group_index, k, family, dependent, masks, hyper):
        self.x_arr = np.ascontiguousarray(x, dtype=np.float64)
        self.x = self.x_arr
        self.n = self.x_arr.shape[0]
        self.p = self.x_arr.shape[1]
        self.k = int(k)
        self.dose = np.ascontiguousarray(dose, dtype=np.float64)
        self.y = np.ascontiguousarray(y, dtype=np.float64)
        d = np.asarray(self.dose)
        self.logd = np.where(d > 0, np.log(np.where(d > 0, d, 1.0)), 0.0)
        self.gi = np.ascontiguousarray(group_index, dtype=np.int64)
        self.family = int(family)
        self.dependent = bool(dependent)
        self.hyper = np.ascontiguousarray(hyper, dtype=np.float64)
        self.hyp = self.hyper
        self.set_masks(masks)
        p, kk = self.p, self.k
        self.o_z = 5
        self.o_u1 = 5 + 3 * p
        self.o_u2 = self.o_u1 + kk
        self.o_tau = self.o_u2 + kk
        self.o_c = self.o_tau + 3
        self.dim = self.o_c + 3
        self.s = np.zeros((3, p))
        self.w = np.zeros((3, p))
        self.coef = np.zeros((3, p))
        self.gcoef = np.zeros((3, p))
        self.lamprog = np.zeros(kk)
        self.dprog = np.zeros(kk)
        self.dpred = np.zeros(kk)
        self.star = np.zeros(kk, dtype=np.intc)

    def set_masks(self, masks):
        self.masks = np.ascontiguousarray(np.asarray(masks, dtype=np.float64).reshape(3, self.p))
        self.mk = self.masks

    cdef void _scales(self, const double* th) noexcept nogil:
        cdef int b, j, g, p = self.p, k = self.k
        cdef double u1, u2, a, t
        if self.family == C_FLAT:
            for b in range(3):
                for j in range(p):
                    self.s[b, j] = 1.0
                    self.w[b, j] = 0.0
            return
        if self.family == C_SAS:
            for b in range(3):
                a = exp(th[self.o_c + b])
                for j in range(p):
                    self.s[b, j] = a
                    self.w[b, j] = 0.0
            return
        for g in range(k):
            u1 = th[self.o_u1 + g]
            u2 = th[self.o_u2 + g]
            if self.dependent:
                self.star[g] = 1 if u1 >= u2 else 0
                self.lamprog[g] = u1 if u1 >= u2 else u2
            else:
                self.star[g] = 1
                self.lamprog[g] = u1
        for b in range(3):
            for j in range(p):
                g = <int>self.gi[j]
                if b == 0:
                    a = th[self.o_tau] + self.lamprog[g]
                else:
                    a = th[self.o_tau + b] + th[self.o_u2 + g]
                if self.family == C_RHS:
                    t = 2.0 * (a - th[self.o_c + b])
                    self.s[b, j] = exp(a - 0.5 * softplus(t))
                    self.w[b, j] = sigmoid(t)
                else:
                    self.s[b, j] = exp(a)
                    self.w[b, j] = 0.0

    cdef double _loglik(self, const double* th) noexcept nogil:
        cdef int i, j, b, n = self.n, p = self.p
        cdef double e0, em, l, f, r, rss = 0.0, xij
        cdef double log_nu = -softplus(-th[2])
        cdef double a_ed = log_nu + self.hyp[8]
        cdef double h = 0.5 + 9.5 * sigmoid(th[3])
        self._scales(th)
        for b in range(3):
            for j in range(p):
                self.coef[b, j] = self.mk[b, j] * th[self.o_z + b * p + j] * self.s[b, j]
        for i in range(n):
            e0 = th[0]
            em = th[1]
            l = a_ed
            for j in range(p):
                xij = self.x[i, j]
                e0 += xij * self.coef[0, j]
                em += xij * self.coef[1, j]
                l += xij * self.coef[2, j]
            if self.dose[i] > 0:
                f = sigmoid(h * (self.logd[i] - l))
            else:
                f = 0.0
            r = self.y[i] - (e0 + em * f)
            rss += r * r
        return -n * th[4] - 0.5 * exp(-2.0 * th[4]) * rss - 0.5 * n * log(2.0 * M_PI)

    cdef double _logp_grad(self, const double* th, double* grad) noexcept nogil:
        cdef int i, j, b, g, n = self.n, p = self.p, k = self.k, fam = self.family
        cdef double e0, em, l, f, r, fp, xij, ge0, gem, gl
        cdef double a0 = th[0], am = th[1], tnu = th[2], txi = th[3], ls = th[4]
        cdef double log_nu = -softplus(-tnu)
        cdef double a_ed = log_nu + self.hyp[8]
        cdef double xi = sigmoid(txi)
        cdef double nu = sigmoid(tnu)
        cdef double h = 0.5 + 9.5 * xi
        cdef double inv_s2 = exp(-2.0 * ls)
        cdef double rss = 0.0, gh = 0.0, s_ge0 = 0.0, s_gem = 0.0, s_gl = 0.0
        cdef double lp, z, dl, wv, u, v, t
        for i in range(self.dim):
            grad[i] = 0.0
        self._scales(th)
        for b in range(3):
            for j in range(p):
                self.coef[b, j] = self.mk[b, j] * th[self.o_z + b * p + j] * self.s[b, j]
                self.gcoef[b, j] = 0.0
        cdef const double* xr
        cdef double* c0 = &self.coef[0, 0]
        cdef double* c1 = &self.coef[1, 0]
        cdef double* c2 = &self.coef[2, 0]
        cdef double* g0 = &self.gcoef[0, 0]
        cdef double* g1 = &self.gcoef[1, 0]
        cdef double* g2 = &self.gcoef[2, 0]
        for i in range(n):
            xr = &self.x[i, 0]
            e0 = a0
            em = am
            l = a_ed
            for j in range(p):
                e0 += xr[j] * c0[j]
                em += xr[j] * c1[j]
                l += xr[j] * c2[j]
            if self.dose[i] > 0:
                f = sigmoid(h * (self.logd[i] - l))
            else:
                f = 0.0
            r = self.y[i] - (e0 + em * f)
            rss += r * r
            ge0 = r * inv_s2
            gem = ge0 * f
            fp = f * (1.0 - f)
            gl = -ge0 * em * h * fp
            gh += ge0 * em * fp * (self.logd[i] - l)
            s_ge0 += ge0
            s_gem += gem
            s_gl += gl
            for j in range(p):
                g0[j] += xr[j] * ge0
                g1[j] += xr[j] * gem
                g2[j] += xr[j] * gl
        lp = -n * ls - 0.5 * inv_s2 * rss

        lp += -0.5 * (a0 / self.hyp[0]) ** 2 - 0.5 * (am / self.hyp[1]) ** 2
        grad[0] = s_ge0 - a0 / (self.hyp[0] * self.hyp[0])
        grad[1] = s_gem - am / (self.hyp[1] * self.hyp[1])
        lp += -self.hyp[2] * softplus(-tnu) - self.hyp[3] * softplus(tnu)
        grad[2] = s_gl * (1.0 - nu) + self.hyp[2] * (1.0 - nu) - self.hyp[3] * nu
        lp += -self.hyp[4] * softplus(-txi) - self.hyp[5] * softplus(txi)
        grad[3] = gh * 9.5 * xi * (1.0 - xi) + self.hyp[4] * (1.0 - xi) - self.hyp[5] * xi
        lp += -self.hyp[6] * ls - self.hyp[7] * exp(-ls)
        grad[4] = -n + inv_s2 * rss - self.hyp[6] + self.hyp[7] * exp(-ls)

        if fam == C_FLAT:
            for b in range(3):
                for j in range(p):
                    grad[self.o_z + b * p + j] = self.mk[b, j] * self.gcoef[b, j]
        else:
            for g in range(k):
                self.dprog[g] = 0.0
                self.dpred[g] = 0.0
            for b in range(3):
                for j in range(p):
                    if self.mk[b, j] == 0.0:
                        continue
                    z = th[self.o_z + b * p + j]
                    lp += -0.5 * self.mk[b, j] * z * z
                    grad[self.o_z + b * p + j] = self.mk[b, j] * (self.gcoef[b, j] * self.s[b, j] - z)
                    dl = self.mk[b, j] * self.gcoef[b, j] * self.coef[b, j]
                    if fam == C_SAS:
                        grad[self.o_c + b] += dl
                    else:
                        wv = self.w[b, j]
                        grad[self.o_tau + b] += dl * (1.0 - wv)
                        if fam == C_RHS:
                            grad[self.o_c + b] += dl * wv
                        g = <int>self.gi[j]
                        if b == 0:
                            self.dprog[g] += dl * (1.0 - wv)
                        else:
                            self.dpred[g] += dl * (1.0 - wv)
            if fam != C_SAS:
                for g in range(k):
                    if self.star[g]:
                        grad[self.o_u1 + g] += self.dprog[g]
                        grad[self.o_u2 + g] += self.dpred[g]
                    else:
                        grad[self.o_u2 + g] += self.dpred[g] + self.dprog[g]
                    u = th[self.o_u1 + g]
                    lp += u - softplus(2.0 * u)
                    grad[self.o_u1 + g] += 1.0 - 2.0 * sigmoid(2.0 * u)
                    u = th[self.o_u2 + g]
                    lp += u - softplus(2.0 * u)
                    grad[self.o_u2 + g] += 1.0 - 2.0 * sigmoid(2.0 * u)
                for b in range(3):
                    v = th[self.o_tau + b]
                    t = 2.0 * (v - log(self.hyp[9 + b]))
                    lp += v - softplus(t)
                    grad[self.o_tau + b] += 1.0 - 2.0 * sigmoid(t)
            if fam == C_RHS or fam == C_SAS:
                for b in range(3):
                    v = th[self.o_c + b]
                    lp += -self.hyp[12] * v - self.hyp[13] * exp(-v)
                    grad[self.o_c + b] += -self.hyp[12] + self.hyp[13] * exp(-v)

        if not isfinite(lp):
            return -INFINITY
        for i in range(self.dim):
            if not isfinite(grad[i]):
                return -INFINITY
        return lp

    def logp_grad(self, theta):
        cdef double[::1] th = np.ascontiguousarray(theta, dtype=np.float64)
        out = np.zeros(self.dim)
        cdef double[::1] g = out
        cdef double lp
        with nogil:
            lp = self._logp_grad(&th[0], &g[0])
        return lp, out

    def loglik(self, theta):
        cdef double[::1] th = np.ascontiguousarray(theta, dtype=np.float64)
        cdef double v = self._loglik(&th[0])
        return v if isfinite(v) else -INFINITY

    def coefficients(self, theta):
        cdef double[::1] th = np.ascontiguousarray(theta, dtype=np.float64)
        self._scales(&th[0])
        z = np.asarray(theta, dtype=np.float64)[self.o_z:self.o_z + 3 * self.p].reshape(3, self.p)
        return self.masks * z * np.asarray(self.s)


# ---------------------------------------------------------------------------
# NUTS


cdef struct Frontier:
    double* z
    double* p
    double* g
    double lp


cdef class _Tree:
    cdef PosteriorKernel kern
    cdef int dim, u_pos, n_leapfrog
    cdef double eps, h0, sum_metro
    cdef bint divergent
    cdef double[::1] im, u_sel
    cdef double[:, :, :, ::1] ws   # (level, slot, vec, dim)
    cdef double[:, :, ::1] wsc     # (level, slot, {lp, lsw})

    cdef inline double uniform(self) noexcept nogil:
        cdef double u = self.u_sel[self.u_pos]
        self.u_pos += 1
        return u

    cdef void leapfrog(self, Frontier* st, double step) noexcept nogil:
        cdef int i
        for i in range(self.dim):
            st.p[i] += 0.5 * step * st.g[i]
        for i in range(self.dim):
            st.z[i] += step * self.im[i] * st.p[i]
        st.lp = self.kern._logp_grad(st.z, st.g)
        for i in range(self.dim):
            st.p[i] += 0.5 * step * st.g[i]

    cdef bint build(self, int depth, Frontier* st, double sign, int lev, int slot) noexcept nogil:
        cdef int i, D = self.dim
        cdef double h, kin, lsw_sub
        cdef bint take_final, persist
        cdef double* o
        if depth == 0:
            self.leapfrog(st, sign * self.eps)
            self.n_leapfrog += 1
            kin = 0.0
            for i in range(D):
                kin += st.p[i] * self.im[i] * st.p[i]
            h = -st.lp + 0.5 * kin
            if not isfinite(h):
                h = INFINITY
            if h - self.h0 > MAX_DELTA_H:
                self.divergent = True
            self.wsc[lev, slot, 1] = self.h0 - h if h < INFINITY else -INFINITY
            if self.h0 - h > 0:
                self.sum_metro += 1.0
            else:
                self.sum_metro += exp(self.h0 - h)
            self.wsc[lev, slot, 0] = st.lp
            for i in range(D):
                self.ws[lev, slot, V_Z, i] = st.z[i]
                self.ws[lev, slot, V_G, i] = st.g[i]
                self.ws[lev, slot, V_PSB, i] = self.im[i] * st.p[i]
                self.ws[lev, slot, V_PSE, i] = self.im[i] * st.p[i]
                self.ws[lev, slot, V_PB, i] = st.p[i]
                self.ws[lev, slot, V_PE, i] = st.p[i]
                self.ws[lev, slot, V_RHO, i] = st.p[i]
            return not self.divergent

        cdef int cl = depth - 1
        if not self.build(depth - 1, st, sign, cl, 0):
            return False
        if not self.build(depth - 1, st, sign, cl, 1):
            return False
        lsw_sub = logaddexp(self.wsc[cl, 0, 1], self.wsc[cl, 1, 1])
        self.wsc[lev, slot, 1] = lsw_sub
        if self.wsc[cl, 1, 1] > lsw_sub:
            take_final = True
        else:
            take_final = self.uniform() < exp(self.wsc[cl, 1, 1] - lsw_sub)
        cdef int src = 1 if take_final else 0
        self.wsc[lev, slot, 0] = self.wsc[cl, src, 0]
        for i in range(D):
            self.ws[lev, slot, V_Z, i] = self.ws[cl, src, V_Z, i]
            self.ws[lev, slot, V_G, i] = self.ws[cl, src, V_G, i]
            self.ws[lev, slot, V_RHO, i] = self.ws[cl, 0, V_RHO, i] + self.ws[cl, 1, V_RHO, i]
            self.ws[lev, slot, V_PSB, i] = self.ws[cl, 0, V_PSB, i]
            self.ws[lev, slot, V_PB, i] = self.ws[cl, 0, V_PB, i]
            self.ws[lev, slot, V_PSE, i] = self.ws[cl, 1, V_PSE, i]
            self.ws[lev, slot, V_PE, i] = self.ws[cl, 1, V_PE, i]
        # generalized no-U-turn checks: whole subtree plus the two merged halves
        cdef double a1 = 0.0, a2 = 0.0, b1 = 0.0, b2 = 0.0, c1 = 0.0, c2 = 0.0, r
        for i in range(D):
            r = self.ws[lev, slot, V_RHO, i]
            a1 += self.ws[cl, 1, V_PSE, i] * r
            a2 += self.ws[cl, 0, V_PSB, i] * r
            r = self.ws[cl, 0, V_RHO, i] + self.ws[cl, 1, V_PB, i]
            b1 += self.ws[cl, 1, V_PSB, i] * r
            b2 += self.ws[cl, 0, V_PSB, i] * r
            r = self.ws[cl, 1, V_RHO, i] + self.ws[cl, 0, V_PE, i]
            c1 += self.ws[cl, 1, V_PSE, i] * r
            c2 += self.ws[cl, 0, V_PSE, i] * r
        persist = (a1 > 0 and a2 > 0) and (b1 > 0 and b2 > 0) and (c1 > 0 and c2 > 0)
        return persist


cdef inline bint _crit(double* ps_minus, double* ps_plus, double* rho, int D) noexcept nogil:
    cdef double a = 0.0, b = 0.0
    cdef int i
    for i in range(D):
        a += ps_plus[i] * rho[i]
        b += ps_minus[i] * rho[i]
    return a > 0 and b > 0


def nuts_transition(PosteriorKernel kernel, z0, double lp0, g0, double eps, inv_metric,
                    momentum, u_dir, u_sel, int max_depth):
    """One NUTS transition; see ``_pykernels.nuts_transition``."""
    cdef int D = kernel.dim, i, depth = 0
    cdef _Tree tree = _Tree.__new__(_Tree)
    tree.kern = kernel
    tree.dim = D
    tree.eps = eps
    tree.im = np.ascontiguousarray(inv_metric, dtype=np.float64)
    tree.u_sel = np.ascontiguousarray(u_sel, dtype=np.float64)
    tree.u_pos = 0
    tree.n_leapfrog = 0
    tree.sum_metro = 0.0
    tree.divergent = False
    tree.ws = np.zeros((max_depth + 1, 2, N_VEC, D))
    tree.wsc = np.zeros((max_depth + 1, 2, 2))
    cdef double[::1] udir = np.ascontiguousarray(u_dir, dtype=np.float64)

    # frontiers and top-level bookkeeping: rows of one scratch matrix
    buf = np.zeros((18, D))
    cdef double[:, ::1] B = buf
    p0_arr = np.ascontiguousarray(momentum, dtype=np.float64)
    cdef double[::1] p0 = p0_arr
    cdef double[::1] z0v = np.ascontiguousarray(z0, dtype=np.float64)
    cdef double[::1] g0v = np.ascontiguousarray(g0, dtype=np.float64)
    # rows: 0-2 fwd z,p,g; 3-5 bck z,p,g; 6 ps_fwd; 7 ps_bck; 8 p_fwd_bck; 9 p_bck_fwd;
    # 10 ps_fwd_bck; 11 ps_bck_fwd; 12 rho; 13 rho_fwd; 14 rho_bck; 15 sample z; 16-17 scratch
    sample_g_arr = np.array(g0v, copy=True)
    cdef double[::1] sample_g = sample_g_arr
    cdef double kin = 0.0, h0, lsw = 0.0, sample_lp = lp0, olsw, tmp
    cdef int top = max_depth
    cdef bint valid, persist, forward
    cdef Frontier fwd, bck
    for i in range(D):
        kin += p0[i] * tree.im[i] * p0[i]
        B[0, i] = z0v[i]; B[1, i] = p0[i]; B[2, i] = g0v[i]
        B[3, i] = z0v[i]; B[4, i] = p0[i]; B[5, i] = g0v[i]
        B[6, i] = tree.im[i] * p0[i]; B[7, i] = B[6, i]
        B[8, i] = p0[i]; B[9, i] = p0[i]
        B[10, i] = B[6, i]; B[11, i] = B[6, i]
        B[12, i] = p0[i]
        B[15, i] = z0v[i]
    h0 = -lp0 + 0.5 * kin
    tree.h0 = h0
    fwd.z = &B[0, 0]; fwd.p = &B[1, 0]; fwd.g = &B[2, 0]; fwd.lp = lp0
    bck.z = &B[3, 0]; bck.p = &B[4, 0]; bck.g = &B[5, 0]; bck.lp = lp0

    with nogil:
        while depth < max_depth:
            forward = udir[depth] > 0.5
            if forward:
                for i in range(D):
                    B[14, i] = B[12, i]
                valid = tree.build(depth, &fwd, 1.0, top, 0)
                for i in range(D):
                    B[10, i] = tree.ws[top, 0, V_PSB, i]
                    B[6, i] = tree.ws[top, 0, V_PSE, i]
                    B[8, i] = tree.ws[top, 0, V_PB, i]
                    B[13, i] = tree.ws[top, 0, V_RHO, i]
            else:
                for i in range(D):
                    B[13, i] = B[12, i]
                valid = tree.build(depth, &bck, -1.0, top, 0)
                for i in range(D):
                    B[11, i] = tree.ws[top, 0, V_PSB, i]
                    B[7, i] = tree.ws[top, 0, V_PSE, i]
                    B[9, i] = tree.ws[top, 0, V_PB, i]
                    B[14, i] = tree.ws[top, 0, V_RHO, i]
            if not valid:
                break
            depth += 1
            olsw = tree.wsc[top, 0, 1]
            if olsw > lsw or tree.uniform() < exp(olsw - lsw):
                sample_lp = tree.wsc[top, 0, 0]
                for i in range(D):
                    B[15, i] = tree.ws[top, 0, V_Z, i]
                    sample_g[i] = tree.ws[top, 0, V_G, i]
            lsw = logaddexp(lsw, olsw)
            for i in range(D):
                B[12, i] = B[14, i] + B[13, i]
            persist = _crit(&B[7, 0], &B[6, 0], &B[12, 0], D)
            for i in range(D):
                B[16, i] = B[14, i] + B[8, i]
                B[17, i] = B[13, i] + B[9, i]
            persist = persist and _crit(&B[7, 0], &B[10, 0], &B[16, 0], D)
            persist = persist and _crit(&B[11, 0], &B[6, 0], &B[17, 0], D)
            if not persist:
                break
    cdef int n_lf = tree.n_leapfrog if tree.n_leapfrog > 0 else 1
    energy = -sample_lp + 0.5 * kin
    return (np.array(buf[15], copy=True), float(sample_lp), sample_g_arr, tree.sum_metro / n_lf,
            depth, tree.n_leapfrog, bool(tree.divergent), energy)
