# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled branching-tree sampler.

Mirrors ``_pycore`` operation for operation so that both backends produce the
same floating-point results for the same stream keys.
"""

from libc.math cimport log, sqrt, cos, sin, exp, floor, fabs, pow, isfinite
from libc.stdlib cimport malloc, realloc, free
from libc.stdint cimport uint64_t

import numpy as np

cdef extern from *:
    """
    #include <stdint.h>
    static inline void bb_philox4x64_10(const uint64_t *ctr, const uint64_t *key, uint64_t *out) {
        uint64_t c0 = ctr[0], c1 = ctr[1], c2 = ctr[2], c3 = ctr[3];
        uint64_t k0 = key[0], k1 = key[1];
        __uint128_t p0, p1;
        int r;
        for (r = 0; r < 10; r++) {
            if (r > 0) { k0 += 0x9E3779B97F4A7C15ULL; k1 += 0xBB67AE8584CAA73BULL; }
            p0 = (__uint128_t)0xD2E7470EE14C6C93ULL * (__uint128_t)c0;
            p1 = (__uint128_t)0xCA5A826395121157ULL * (__uint128_t)c2;
            c0 = ((uint64_t)(p1 >> 64)) ^ c1 ^ k0;
            c1 = (uint64_t)p1;
            c2 = ((uint64_t)(p0 >> 64)) ^ c3 ^ k1;
            c3 = (uint64_t)p0;
        }
        out[0] = c0; out[1] = c1; out[2] = c2; out[3] = c3;
    }
    """
    void bb_philox4x64_10(const uint64_t *ctr, const uint64_t *key, uint64_t *out) nogil

DEF MAXD = 3
DEF TWO_PI = 6.283185307179586
DEF INV_2_53 = 1.0 / 9007199254740992.0

BACKEND = "compiled"

ctypedef struct Rng:
    uint64_t key[2]
    uint64_t ctr[4]
    uint64_t buf[4]
    int pos
    int has_normal
    double normal


cdef inline void rng_init(Rng *g, uint64_t k0, uint64_t k1, uint64_t index) noexcept nogil:
    g.key[0] = k0
    g.key[1] = k1
    g.ctr[0] = 0
    g.ctr[1] = index
    g.ctr[2] = 0
    g.ctr[3] = 0
    g.pos = 4
    g.has_normal = 0
    g.normal = 0.0


cdef inline uint64_t rng_u64(Rng *g) noexcept nogil:
    cdef uint64_t out
    if g.pos < 4:
        out = g.buf[g.pos]
        g.pos += 1
        return out
    g.ctr[0] += 1
    if g.ctr[0] == 0:
        g.ctr[1] += 1
        if g.ctr[1] == 0:
            g.ctr[2] += 1
            if g.ctr[2] == 0:
                g.ctr[3] += 1
    bb_philox4x64_10(g.ctr, g.key, g.buf)
    g.pos = 1
    return g.buf[0]


cdef inline double rng_double(Rng *g) noexcept nogil:
    return (rng_u64(g) >> 11) * INV_2_53


cdef inline double rng_normal(Rng *g) noexcept nogil:
    cdef double u1, u2, rad, th
    if g.has_normal:
        g.has_normal = 0
        return g.normal
    u1 = 1.0 - rng_double(g)
    u2 = rng_double(g)
    rad = sqrt(-2.0 * log(u1))
    th = TWO_PI * u2
    g.normal = rad * sin(th)
    g.has_normal = 1
    return rad * cos(th)


def philox_words(uint64_t k0, uint64_t k1, uint64_t index, int n):
    """First ``n`` 64-bit words of a stream (used to cross-check numpy)."""
    cdef Rng g
    cdef int i
    out = np.empty(n, dtype=np.uint64)
    cdef uint64_t[::1] o = out
    rng_init(&g, k0, k1, index)
    for i in range(n):
        o[i] = rng_u64(&g)
    return out


def stream_doubles_normals(uint64_t k0, uint64_t k1, uint64_t index, int n):
    cdef Rng g
    cdef int i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    rng_init(&g, k0, k1, index)
    for i in range(n):
        if i % 3 == 0:
            o[i] = rng_double(&g)
        else:
            o[i] = rng_normal(&g)
    return out


ctypedef struct KData:
    int d
    double dt
    int sde_kind
    const double *sde_par
    int life_kind
    double rate
    int nL
    int qp1
    const int *L
    const double *p
    const double *pcum
    int zero_index
    int nb
    const double *basis
    int naxes
    const int *kn_ncell
    const double *kn_edges
    const int *kn_eoff
    const double *kn_hw
    const int *kn_hoff
    const int *kn_stride
    const double *coef
    int src_kind
    const double *src_par
    const double *g_lo
    const double *g_step
    const int *g_n
    const int *g_stride
    int nn
    int interp_kind
    const double *term
    int nT
    double pt0
    double pdt
    const double *pu
    const double *pz
    int mark_cv
    int v_cv
    long max_particles


# --------------------------------------------------------------------------
# coefficient families

cdef int sde_eval(const KData *k, const double *x, double *mu, double *sig,
                  double *dmu, double *dsig, int deriv) noexcept nogil:
    cdef int d = k.d, i, j, l
    cdef double acc, c, a, b, s0, s1, lo, hi
    cdef const double *par = k.sde_par
    if k.sde_kind == 0:
        for i in range(d):
            acc = 0.0
            for l in range(d):
                acc += par[i * d + l] * x[l]
            mu[i] = acc + par[d * d + i]
        for i in range(d * d):
            sig[i] = par[d * d + d + i]
        if deriv:
            for i in range(d * d):
                dmu[i] = par[i]
            for i in range(d * d * d):
                dsig[i] = 0.0
    elif k.sde_kind == 1:
        a = par[0]
        b = par[1]
        s0 = par[2]
        s1 = par[3]
        lo = par[4]
        hi = par[5]
        mu[0] = a * (x[0] + b)
        c = x[0]
        if c < lo:
            c = lo
        elif c > hi:
            c = hi
        sig[0] = s0 * (1.0 + s1 * c)
        if deriv:
            dmu[0] = a
            if x[0] > lo and x[0] < hi:
                dsig[0] = s0 * s1
            else:
                dsig[0] = 0.0
    else:
        return 2
    for i in range(d):
        if not isfinite(mu[i]):
            return 2
    for i in range(d * d):
        if not isfinite(sig[i]):
            return 2
    return 0


cdef int mat_inverse(int d, const double *a, double *out) noexcept nogil:
    cdef double det
    if d == 1:
        if a[0] == 0.0:
            return 3
        out[0] = 1.0 / a[0]
        return 0
    if d == 2:
        det = a[0] * a[3] - a[1] * a[2]
        if det == 0.0:
            return 3
        out[0] = a[3] / det
        out[1] = -a[1] / det
        out[2] = -a[2] / det
        out[3] = a[0] / det
        return 0
    det = (a[0] * (a[4] * a[8] - a[5] * a[7])
           - a[1] * (a[3] * a[8] - a[5] * a[6])
           + a[2] * (a[3] * a[7] - a[4] * a[6]))
    if det == 0.0:
        return 3
    out[0] = (a[4] * a[8] - a[5] * a[7]) / det
    out[1] = (a[2] * a[7] - a[1] * a[8]) / det
    out[2] = (a[1] * a[5] - a[2] * a[4]) / det
    out[3] = (a[5] * a[6] - a[3] * a[8]) / det
    out[4] = (a[0] * a[8] - a[2] * a[6]) / det
    out[5] = (a[2] * a[3] - a[0] * a[5]) / det
    out[6] = (a[3] * a[7] - a[4] * a[6]) / det
    out[7] = (a[1] * a[6] - a[0] * a[7]) / det
    out[8] = (a[0] * a[4] - a[1] * a[3]) / det
    return 0


cdef double source_eval(const KData *k, double t, const double *x) noexcept nogil:
    cdef const double *par
    cdef double xx, c, s, m, cx, sx
    if k.src_kind == 1:
        par = k.src_par
        xx = x[0]
        c = xx
        if c < par[5]:
            c = par[5]
        elif c > par[6]:
            c = par[6]
        s = par[3] * (1.0 + par[4] * c)
        m = par[1] * (xx + par[2])
        cx = cos(xx)
        sx = sin(xx)
        return (0.5 * exp((t - par[0]) / 2.0) * (cx * s * s / 2.0 - 0.5 * (1.0 + cx) + m * sx)
                - 2.0 / (4.0 + fabs(sx * (1.0 + cx)) * exp(t - par[0])))
    return 0.0


# --------------------------------------------------------------------------
# lifetimes

cdef inline double life_sample(const KData *k, Rng *g) noexcept nogil:
    cdef double u
    if k.life_kind == 0:
        u = 1.0 - rng_double(g)
        return -log(u) / k.rate
    u = rng_double(g)
    return u * u * u


cdef inline double life_survival(const KData *k, double t) noexcept nogil:
    if k.life_kind == 0:
        return exp(-k.rate * t)
    if t >= 1.0:
        return 0.0
    return 1.0 - pow(t, 1.0 / 3.0)


cdef inline double life_density(const KData *k, double t) noexcept nogil:
    if k.life_kind == 0:
        return k.rate * exp(-k.rate * t)
    return pow(t, -2.0 / 3.0) / 3.0


# --------------------------------------------------------------------------
# grid interpolation (tensor clamped quadratic / multilinear)

cdef int stencil(const KData *k, const double *x, int *idx, double *w) noexcept nogil:
    cdef int d = k.d, a, n, i, c, cnt, m, j, jj
    cdef int ax_i[MAXD][3]
    cdef double ax_w[MAXD][3]
    cdef int ax_c[MAXD]
    cdef double xc, hi, s, pos
    for a in range(d):
        n = k.g_n[a]
        xc = x[a]
        hi = k.g_lo[a] + (n - 1) * k.g_step[a]
        if xc < k.g_lo[a]:
            xc = k.g_lo[a]
        elif xc > hi:
            xc = hi
        pos = (xc - k.g_lo[a]) / k.g_step[a]
        # snap round-off so node queries return stored values exactly
        if fabs(pos - floor(pos + 0.5)) < 1e-9:
            pos = floor(pos + 0.5)
        if n == 1:
            ax_c[a] = 1
            ax_i[a][0] = 0
            ax_w[a][0] = 1.0
        elif n == 2 or k.interp_kind == 1:
            i = <int>floor(pos)
            if i < 0:
                i = 0
            if i > n - 2:
                i = n - 2
            s = pos - i
            ax_c[a] = 2
            ax_i[a][0] = i
            ax_i[a][1] = i + 1
            ax_w[a][0] = 1.0 - s
            ax_w[a][1] = s
        else:
            i = <int>floor(pos + 0.5)
            if i < 1:
                i = 1
            if i > n - 2:
                i = n - 2
            s = pos - i
            ax_c[a] = 3
            ax_i[a][0] = i - 1
            ax_i[a][1] = i
            ax_i[a][2] = i + 1
            ax_w[a][0] = 0.5 * s * (s - 1.0)
            ax_w[a][1] = 1.0 - s * s
            ax_w[a][2] = 0.5 * s * (s + 1.0)
    cnt = 1
    for a in range(d):
        cnt *= ax_c[a]
    for m in range(cnt):
        jj = m
        c = 0
        s = 1.0
        for a in range(d - 1, -1, -1):
            j = jj % ax_c[a]
            jj = jj // ax_c[a]
            c += ax_i[a][j] * k.g_stride[a]
            s *= ax_w[a][j]
        idx[m] = c
        w[m] = s
    return cnt


cdef inline double stencil_apply(const double *vals, int stride, int off, int cnt,
                                 const int *idx, const double *w) noexcept nogil:
    cdef double acc = 0.0, lo, hi, v
    cdef int m
    v = vals[idx[0] * stride + off]
    lo = v
    hi = v
    for m in range(cnt):
        v = vals[idx[m] * stride + off]
        acc += w[m] * v
        if v < lo:
            lo = v
        if v > hi:
            hi = v
    if acc < lo:
        acc = lo
    elif acc > hi:
        acc = hi
    return acc


cdef double terminal_eval(const KData *k, const double *x) noexcept nogil:
    cdef int idx[27]
    cdef double w[27]
    cdef int cnt = stencil(k, x, idx, w)
    return stencil_apply(k.term, 1, 0, cnt, idx, w)


# --------------------------------------------------------------------------
# localisation kernels

cdef int axis_weights(const KData *k, int a, double v, int *ci, double *cw) noexcept nogil:
    cdef int n = k.kn_ncell[a], j
    cdef const double *e = k.kn_edges + k.kn_eoff[a]
    cdef const double *hw = k.kn_hw + k.kn_hoff[a]
    cdef double s, w
    if v < e[0]:
        v = e[0]
    elif v > e[n]:
        v = e[n]
    j = 0
    while j < n - 1 and v >= e[j + 1]:
        j += 1
    ci[0] = j
    cw[0] = 1.0
    if j >= 1:
        w = hw[j - 1]
        if v < e[j] + w:
            s = (v - (e[j] - w)) / (2.0 * w)
            cw[0] = s
            ci[1] = j - 1
            cw[1] = 1.0 - s
            return 2
    if j < n - 1:
        w = hw[j]
        if v > e[j + 1] - w:
            s = ((e[j + 1] + w) - v) / (2.0 * w)
            cw[0] = s
            ci[1] = j + 1
            cw[1] = 1.0 - s
            return 2
    return 1


cdef double driver_poly_coef(const KData *k, int xi, const double *prior) noexcept nogil:
    """Sum_j c_{j,xi} phi_j(prior) for the tensor kernels."""
    cdef int na = k.naxes, a, m, cnt, jj, j, cell
    cdef int ai[MAXD + 1][2]
    cdef double aw[MAXD + 1][2]
    cdef int ac[MAXD + 1]
    cdef double acc = 0.0, w
    cnt = 1
    for a in range(na):
        ac[a] = axis_weights(k, a, prior[a], ai[a], aw[a])
        cnt *= ac[a]
    for m in range(cnt):
        jj = m
        cell = 0
        w = 1.0
        for a in range(na - 1, -1, -1):
            j = jj % ac[a]
            jj = jj // ac[a]
            cell += ai[a][j] * k.kn_stride[a]
            w *= aw[a][j]
        acc += w * k.coef[cell * k.nL + xi]
    return acc


# --------------------------------------------------------------------------
# one sample

cdef int grow(const KData *k, Rng *g, const double *x0, double t_abs, double r,
              int compute_v, double *u_out, double *v_out, long *tree_size,
              double **st_t, double **st_x, int **st_m, long *cap) noexcept nogil:
    cdef int d = k.d, i, j, l, q, status, nsteps, step, n_child, mark, cnt, xi
    cdef long top = 0, created = 1, newcap
    cdef double x[MAXD]
    cdef double xn[MAXD]
    cdef double xb[MAXD]
    cdef double mu[MAXD]
    cdef double sig[MAXD * MAXD]
    cdef double dmu[MAXD * MAXD]
    cdef double dsig[MAXD * MAXD * MAXD]
    cdef double gx[MAXD * MAXD]
    cdef double gn[MAXD * MAXD]
    cdef double sinv[MAXD * MAXD]
    cdef double wint[MAXD]
    cdef double dw[MAXD]
    cdef double root_w[MAXD]
    cdef double prior[MAXD + 1]
    cdef int idx[27]
    cdef double wts[27]
    cdef double prod = 1.0, birth, delta, remaining, end, tau, h, sq, acc, fac, val
    cdef double td, num, bw, u, cv = 0.0, root_tau = 0.0
    cdef int survive, need_w, root_surv = 0, is_root, ti
    cdef double nfull_d, rem

    st_t[0][0] = 0.0
    for i in range(d):
        st_x[0][i] = x0[i]
    st_m[0][0] = 0
    top = 1
    is_root = 1
    for i in range(d):
        root_w[i] = 0.0

    while top > 0:
        top -= 1
        birth = st_t[0][top]
        mark = st_m[0][top]
        for i in range(d):
            x[i] = st_x[0][top * d + i]
            xb[i] = x[i]

        delta = life_sample(k, g)
        remaining = r - birth
        survive = delta >= remaining
        if survive:
            end = r
        else:
            end = birth + delta
        tau = end - birth
        need_w = mark != 0 or (is_root and compute_v)

        if need_w:
            for i in range(d * d):
                gx[i] = 0.0
            for i in range(d):
                gx[i * d + i] = 1.0
                wint[i] = 0.0

        nfull_d = floor(tau / k.dt)
        rem = tau - nfull_d * k.dt
        nsteps = <int>nfull_d
        if rem > 1e-12 * k.dt:
            nsteps += 1
        if nsteps < 1:
            nsteps = 1
        for step in range(nsteps):
            if step < nsteps - 1:
                h = k.dt
            else:
                h = tau - (nsteps - 1) * k.dt
            sq = sqrt(h)
            for i in range(d):
                dw[i] = sq * rng_normal(g)
            status = sde_eval(k, x, mu, sig, dmu, dsig, need_w)
            if status:
                return status
            if need_w:
                status = mat_inverse(d, sig, sinv)
                if status:
                    return status
                # weight increment uses the pre-step state
                for j in range(d):
                    acc = 0.0
                    for i in range(d):
                        val = 0.0
                        for l in range(d):
                            val += sinv[i * d + l] * gx[l * d + j]
                        acc += val * dw[i]
                    wint[j] += acc
                for i in range(d):
                    for j in range(d):
                        acc = 0.0
                        for l in range(d):
                            acc += dmu[i * d + l] * gx[l * d + j]
                        val = 0.0
                        for q in range(d):
                            fac = 0.0
                            for l in range(d):
                                fac += dsig[q * d * d + i * d + l] * gx[l * d + j]
                            val += fac * dw[q]
                        gn[i * d + j] = gx[i * d + j] + acc * h + val
            for i in range(d):
                acc = 0.0
                for l in range(d):
                    acc += sig[i * d + l] * dw[l]
                xn[i] = x[i] + mu[i] * h + acc
            for i in range(d):
                x[i] = xn[i]
                if not isfinite(x[i]):
                    return 2
            if need_w:
                for i in range(d * d):
                    gx[i] = gn[i]

        if survive:
            val = terminal_eval(k, x)
            if mark != 0 and k.mark_cv:
                val = val - terminal_eval(k, xb)
            fac = val / life_survival(k, remaining)
        else:
            u = rng_double(g)
            xi = 0
            while xi < k.nL - 1 and not (u < k.pcum[xi]):
                xi += 1
            td = t_abs + end
            ti = <int>floor((td - k.pt0) / k.pdt + 0.5)
            if ti < 0:
                ti = 0
            if ti > k.nT - 1:
                ti = k.nT - 1
            cnt = stencil(k, x, idx, wts)
            prior[0] = stencil_apply(k.pu + ti * k.nn, 1, 0, cnt, idx, wts)
            for i in range(d):
                prior[1 + i] = stencil_apply(k.pz + ti * k.nn * d, d, i, cnt, idx, wts)
            num = driver_poly_coef(k, xi, prior)
            if xi == k.zero_index:
                num = num + source_eval(k, td, x)
            fac = num / (k.p[xi] * life_density(k, delta))
            n_child = 0
            for q in range(k.qp1):
                n_child += k.L[xi * k.qp1 + q]
            created += n_child
            if created > k.max_particles:
                tree_size[0] = created
                return 1
            if top + n_child > cap[0]:
                newcap = 2 * cap[0] + n_child
                st_t[0] = <double *>realloc(st_t[0], newcap * sizeof(double))
                st_x[0] = <double *>realloc(st_x[0], newcap * d * sizeof(double))
                st_m[0] = <int *>realloc(st_m[0], newcap * sizeof(int))
                cap[0] = newcap
            for q in range(k.qp1):
                for l in range(k.L[xi * k.qp1 + q]):
                    st_t[0][top] = end
                    for i in range(d):
                        st_x[0][top * d + i] = x[i]
                    st_m[0][top] = q
                    top += 1

        if mark != 0:
            if tau > 0.0:
                bw = 0.0
                for i in range(d):
                    bw += k.basis[(mark - 1) * d + i] * wint[i]
                fac = fac * (bw / tau)
            else:
                fac = 0.0
        if is_root:
            if compute_v:
                root_tau = tau
                for i in range(d):
                    root_w[i] = wint[i]
                root_surv = survive
                if survive and k.v_cv:
                    cv = terminal_eval(k, xb) / life_survival(k, remaining)
            is_root = 0
        prod = prod * fac
        if prod == 0.0:
            break

    tree_size[0] = created
    u_out[0] = prod
    if compute_v:
        if not root_surv:
            cv = 0.0
        for i in range(d):
            if root_tau > 0.0:
                v_out[i] = (prod - cv) * (root_w[i] / root_tau)
            else:
                v_out[i] = 0.0
    return 0


cdef class Kernel:
    """Holds packed interval data; ``run`` fills sample arrays without the GIL."""

    cdef KData k
    cdef object _keep

    def __init__(self, inp):
        if inp.sde_kind < 0 or inp.src_kind < 0 or inp.basis_fn is not None:
            raise TypeError("compiled core needs registered coefficient families")
        if inp.d > MAXD:
            raise ValueError("compiled core supports d <= 3")
        keep = {}

        def darr(name):
            a = np.array(getattr(inp, name), dtype=np.float64, order="C").ravel()
            if a.size == 0:
                a = np.zeros(1)
            keep[name] = a
            return a

        def iarr(name):
            a = np.array(getattr(inp, name), dtype=np.intc, order="C").ravel()
            if a.size == 0:
                a = np.zeros(1, dtype=np.intc)
            keep[name] = a
            return a

        cdef double[::1] mv
        cdef int[::1] iv
        self.k.d = inp.d
        self.k.dt = inp.dt
        self.k.sde_kind = inp.sde_kind
        mv = darr("sde_par"); self.k.sde_par = &mv[0]
        self.k.life_kind = inp.life_kind
        self.k.rate = inp.rate
        self.k.nL = inp.nL
        self.k.qp1 = inp.qp1
        iv = iarr("L"); self.k.L = &iv[0]
        mv = darr("p"); self.k.p = &mv[0]
        mv = darr("pcum"); self.k.pcum = &mv[0]
        self.k.zero_index = inp.zero_index
        self.k.nb = inp.nb
        mv = darr("basis"); self.k.basis = &mv[0]
        self.k.naxes = inp.naxes
        iv = iarr("kn_ncell"); self.k.kn_ncell = &iv[0]
        mv = darr("kn_edges"); self.k.kn_edges = &mv[0]
        iv = iarr("kn_eoff"); self.k.kn_eoff = &iv[0]
        mv = darr("kn_hw"); self.k.kn_hw = &mv[0]
        iv = iarr("kn_hoff"); self.k.kn_hoff = &iv[0]
        iv = iarr("kn_stride"); self.k.kn_stride = &iv[0]
        mv = darr("coef"); self.k.coef = &mv[0]
        self.k.src_kind = inp.src_kind
        mv = darr("src_par"); self.k.src_par = &mv[0]
        mv = darr("grid_lo"); self.k.g_lo = &mv[0]
        mv = darr("grid_step"); self.k.g_step = &mv[0]
        iv = iarr("grid_n"); self.k.g_n = &iv[0]
        iv = iarr("grid_stride"); self.k.g_stride = &iv[0]
        self.k.nn = inp.nn
        self.k.interp_kind = inp.interp_kind
        mv = darr("term"); self.k.term = &mv[0]
        self.k.nT = inp.nT
        self.k.pt0 = inp.pt0
        self.k.pdt = inp.pdt
        mv = darr("pu"); self.k.pu = &mv[0]
        mv = darr("pz"); self.k.pz = &mv[0]
        self.k.mark_cv = inp.mark_cv
        self.k.v_cv = inp.v_cv
        self.k.max_particles = inp.max_particles
        self._keep = keep

    def run(self, x0, double t_abs, double r, uint64_t key0, uint64_t key1,
            long start, long count, bint compute_v):
        """Draw samples ``start .. start+count-1``; returns (u, v, status, max_tree)."""
        cdef int d = self.k.d
        x0a = np.ascontiguousarray(x0, dtype=np.float64).reshape(d)
        u = np.zeros(count, dtype=np.float64)
        v = np.zeros((count, d), dtype=np.float64)
        cdef double[::1] xm = x0a
        cdef double[::1] um = u
        cdef double[:, ::1] vm = v
        cdef double vbuf[MAXD]
        cdef long n, largest = 0, size = 0
        cdef int status = 0, i
        cdef Rng g
        cdef long cap = 64
        cdef double *st_t = <double *>malloc(cap * sizeof(double))
        cdef double *st_x = <double *>malloc(cap * d * sizeof(double))
        cdef int *st_m = <int *>malloc(cap * sizeof(int))
        cdef int cv = compute_v
        if st_t == NULL or st_x == NULL or st_m == NULL:
            raise MemoryError()
        try:
            with nogil:
                for n in range(count):
                    rng_init(&g, key0, key1, <uint64_t>(start + n))
                    status = grow(&self.k, &g, &xm[0], t_abs, r, cv, &um[n], vbuf,
                                  &size, &st_t, &st_x, &st_m, &cap)
                    if size > largest:
                        largest = size
                    if status:
                        break
                    if cv:
                        for i in range(d):
                            vm[n, i] = vbuf[i]
        finally:
            free(st_t)
            free(st_x)
            free(st_m)
        return u, v, status, largest


def interpolate_points(inp, const double[:, ::1] pts, const double[::1] vals, int interp_kind):
    """Interpolate a scalar grid at many points (compiled stencil)."""
    cdef KData k
    lo = np.array(inp.grid_lo, dtype=np.float64)
    st = np.array(inp.grid_step, dtype=np.float64)
    gn = np.array(inp.grid_n, dtype=np.intc)
    gs = np.array(inp.grid_stride, dtype=np.intc)
    cdef double[::1] lom = lo
    cdef double[::1] stm = st
    cdef int[::1] gnm = gn
    cdef int[::1] gsm = gs
    k.d = pts.shape[1]
    k.g_lo = &lom[0]
    k.g_step = &stm[0]
    k.g_n = &gnm[0]
    k.g_stride = &gsm[0]
    k.interp_kind = interp_kind
    out = np.empty(pts.shape[0])
    cdef double[::1] o = out
    cdef int idx[27]
    cdef double w[27]
    cdef int cnt
    cdef Py_ssize_t n
    for n in range(pts.shape[0]):
        cnt = stencil(&k, &pts[n, 0], idx, w)
        o[n] = stencil_apply(&vals[0], 1, 0, cnt, idx, w)
    return out
