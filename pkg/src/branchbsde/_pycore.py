"""Pure-Python branching-tree sampler.

Operation-for-operation mirror of the compiled core (same draw order, same
floating-point expression order) so both backends agree bit for bit on the
registered coefficient families. It additionally accepts Python callables for
the SDE, source term and gradient basis, and can record the full particle tree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._kernel import (
    DOMAIN,
    EXPLODED,
    OK,
    SINGULAR,
    KernelInputs,
)
from .rng import Stream

BACKEND = "python"

_isfinite = math.isfinite


@dataclass
class Particle:
    """One node of a recorded branching tree."""

    label: tuple[int, ...]
    birth: float
    death: float
    mark: int
    survived: bool
    times: np.ndarray
    x: np.ndarray
    grad_x: np.ndarray
    dw: np.ndarray
    offspring: tuple[int, ...] | None = None
    factor: float = 1.0
    children: list = field(default_factory=list)


class _Flat:
    """Kernel inputs unpacked into Python lists for fast scalar access."""

    def __init__(self, k: KernelInputs):
        self.k = k
        self.d = int(k.d)
        self.dt = float(k.dt)
        self.sde_kind = int(k.sde_kind)
        self.sde_par = [float(v) for v in np.ravel(k.sde_par)]
        self.life_kind = int(k.life_kind)
        self.rate = float(k.rate)
        self.nL = int(k.nL)
        self.qp1 = int(k.qp1)
        self.L = [[int(v) for v in row] for row in np.asarray(k.L).reshape(self.nL, self.qp1)]
        self.p = [float(v) for v in k.p]
        self.pcum = [float(v) for v in k.pcum]
        self.zero_index = int(k.zero_index)
        self.basis = [[float(v) for v in row] for row in np.asarray(k.basis).reshape(-1, self.d)]
        self.naxes = int(k.naxes)
        self.kn_ncell = [int(v) for v in k.kn_ncell]
        edges = [float(v) for v in k.kn_edges]
        hw = [float(v) for v in k.kn_hw]
        eoff = [int(v) for v in k.kn_eoff]
        hoff = [int(v) for v in k.kn_hoff]
        self.kn_edges = [edges[eoff[a] : eoff[a] + self.kn_ncell[a] + 1] for a in range(self.naxes)]
        self.kn_hw = [hw[hoff[a] : hoff[a] + self.kn_ncell[a] - 1] for a in range(self.naxes)]
        self.kn_stride = [int(v) for v in k.kn_stride]
        self.coef = [[float(v) for v in row] for row in np.asarray(k.coef).reshape(-1, self.nL)]
        self.src_kind = int(k.src_kind)
        self.src_par = [float(v) for v in np.ravel(k.src_par)]
        self.g_lo = [float(v) for v in k.grid_lo]
        self.g_step = [float(v) for v in k.grid_step]
        self.g_n = [int(v) for v in k.grid_n]
        self.g_stride = [int(v) for v in k.grid_stride]
        self.interp_kind = int(k.interp_kind)
        self.term = np.asarray(k.term, dtype=float).ravel().tolist()
        self.nT = int(k.nT)
        self.pt0 = float(k.pt0)
        self.pdt = float(k.pdt)
        pu = np.asarray(k.pu, dtype=float).reshape(self.nT, -1)
        pz = np.asarray(k.pz, dtype=float).reshape(self.nT, -1, self.d)
        self.pu = [row.tolist() for row in pu]
        self.pz = [[pz[t, :, i].tolist() for i in range(self.d)] for t in range(self.nT)]
        self.mark_cv = int(k.mark_cv)
        self.v_cv = int(k.v_cv)
        self.max_particles = int(k.max_particles)
        self.sde_obj = k.sde_obj
        self.src_fn = k.src_fn
        self.basis_fn = k.basis_fn


# ---------------------------------------------------------------- coefficients


def _sde_eval(f: _Flat, x, deriv):
    d = f.d
    par = f.sde_par
    if f.sde_kind == 0:
        mu = []
        for i in range(d):
            acc = 0.0
            for l in range(d):
                acc += par[i * d + l] * x[l]
            mu.append(acc + par[d * d + i])
        sig = par[d * d + d : d * d + d + d * d]
        if deriv:
            dmu = par[: d * d]
            dsig = [0.0] * (d * d * d)
        else:
            dmu = dsig = None
    elif f.sde_kind == 1:
        a, b, s0, s1, lo, hi = par[:6]
        mu = [a * (x[0] + b)]
        c = x[0]
        if c < lo:
            c = lo
        elif c > hi:
            c = hi
        sig = [s0 * (1.0 + s1 * c)]
        if deriv:
            dmu = [a]
            dsig = [s0 * s1] if (x[0] > lo and x[0] < hi) else [0.0]
        else:
            dmu = dsig = None
    else:
        obj = f.sde_obj
        xa = np.asarray(x, dtype=float)
        mu = np.asarray(obj.mu(xa), dtype=float).reshape(d).tolist()
        sig = np.asarray(obj.sigma(xa), dtype=float).reshape(d * d).tolist()
        if deriv:
            dmu = np.asarray(obj.d_mu(xa), dtype=float).reshape(d * d).tolist()
            dsig = np.asarray(obj.d_sigma(xa), dtype=float).reshape(d * d * d).tolist()
        else:
            dmu = dsig = None
    for v in mu:
        if not _isfinite(v):
            return DOMAIN, None, None, None, None
    for v in sig:
        if not _isfinite(v):
            return DOMAIN, None, None, None, None
    return OK, mu, sig, dmu, dsig


def _mat_inverse(d, a):
    if d == 1:
        if a[0] == 0.0:
            return None
        return [1.0 / a[0]]
    if d == 2:
        det = a[0] * a[3] - a[1] * a[2]
        if det == 0.0:
            return None
        return [a[3] / det, -a[1] / det, -a[2] / det, a[0] / det]
    if d == 3:
        det = (
            a[0] * (a[4] * a[8] - a[5] * a[7])
            - a[1] * (a[3] * a[8] - a[5] * a[6])
            + a[2] * (a[3] * a[7] - a[4] * a[6])
        )
        if det == 0.0:
            return None
        return [
            (a[4] * a[8] - a[5] * a[7]) / det,
            (a[2] * a[7] - a[1] * a[8]) / det,
            (a[1] * a[5] - a[2] * a[4]) / det,
            (a[5] * a[6] - a[3] * a[8]) / det,
            (a[0] * a[8] - a[2] * a[6]) / det,
            (a[2] * a[3] - a[0] * a[5]) / det,
            (a[3] * a[7] - a[4] * a[6]) / det,
            (a[1] * a[6] - a[0] * a[7]) / det,
            (a[0] * a[4] - a[1] * a[3]) / det,
        ]
    m = np.asarray(a, dtype=float).reshape(d, d)
    try:
        return np.linalg.inv(m).ravel().tolist()
    except np.linalg.LinAlgError:
        return None


def _source_eval(f: _Flat, t, x):
    if f.src_kind == 1:
        par = f.src_par
        xx = x[0]
        c = xx
        if c < par[5]:
            c = par[5]
        elif c > par[6]:
            c = par[6]
        s = par[3] * (1.0 + par[4] * c)
        m = par[1] * (xx + par[2])
        cx = math.cos(xx)
        sx = math.sin(xx)
        return 0.5 * math.exp((t - par[0]) / 2.0) * (
            cx * s * s / 2.0 - 0.5 * (1.0 + cx) + m * sx
        ) - 2.0 / (4.0 + math.fabs(sx * (1.0 + cx)) * math.exp(t - par[0]))
    if f.src_kind < 0:
        return float(f.src_fn(t, np.asarray(x, dtype=float)))
    return 0.0


# ---------------------------------------------------------------- lifetimes


def _life_sample(f: _Flat, g: Stream):
    if f.life_kind == 0:
        u = 1.0 - g.next_double()
        return -math.log(u) / f.rate
    u = g.next_double()
    return u * u * u


def _life_survival(f: _Flat, t):
    if f.life_kind == 0:
        return math.exp(-f.rate * t)
    if t >= 1.0:
        return 0.0
    return 1.0 - math.pow(t, 1.0 / 3.0)


def _life_density(f: _Flat, t):
    if f.life_kind == 0:
        return f.rate * math.exp(-f.rate * t)
    return math.pow(t, -2.0 / 3.0) / 3.0


# ---------------------------------------------------------------- interpolation


def stencil(d, g_lo, g_step, g_n, g_stride, interp_kind, x):
    ax_i = []
    ax_w = []
    for a in range(d):
        n = g_n[a]
        xc = x[a]
        hi = g_lo[a] + (n - 1) * g_step[a]
        if xc < g_lo[a]:
            xc = g_lo[a]
        elif xc > hi:
            xc = hi
        pos = (xc - g_lo[a]) / g_step[a]
        # snap round-off so node queries return stored values exactly
        if abs(pos - math.floor(pos + 0.5)) < 1e-9:
            pos = math.floor(pos + 0.5)
        if n == 1:
            ax_i.append((0,))
            ax_w.append((1.0,))
        elif n == 2 or interp_kind == 1:
            i = math.floor(pos)
            if i < 0:
                i = 0
            if i > n - 2:
                i = n - 2
            s = pos - i
            ax_i.append((i, i + 1))
            ax_w.append((1.0 - s, s))
        else:
            i = math.floor(pos + 0.5)
            if i < 1:
                i = 1
            if i > n - 2:
                i = n - 2
            s = pos - i
            ax_i.append((i - 1, i, i + 1))
            ax_w.append((0.5 * s * (s - 1.0), 1.0 - s * s, 0.5 * s * (s + 1.0)))
    cnt = 1
    for a in range(d):
        cnt *= len(ax_i[a])
    idx = []
    wts = []
    for m in range(cnt):
        jj = m
        c = 0
        s = 1.0
        for a in range(d - 1, -1, -1):
            na = len(ax_i[a])
            j = jj % na
            jj //= na
            c += ax_i[a][j] * g_stride[a]
            s *= ax_w[a][j]
        idx.append(c)
        wts.append(s)
    return idx, wts


def stencil_apply(vals, idx, wts):
    acc = 0.0
    v = vals[idx[0]]
    lo = v
    hi = v
    for m in range(len(idx)):
        v = vals[idx[m]]
        acc += wts[m] * v
        if v < lo:
            lo = v
        if v > hi:
            hi = v
    if acc < lo:
        acc = lo
    elif acc > hi:
        acc = hi
    return acc


def _stencil(f: _Flat, x):
    return stencil(f.d, f.g_lo, f.g_step, f.g_n, f.g_stride, f.interp_kind, x)


def _terminal_eval(f: _Flat, x):
    idx, wts = _stencil(f, x)
    return stencil_apply(f.term, idx, wts)


# ---------------------------------------------------------------- kernels


def axis_weights(n, e, hw, v):
    """Cells and weights of one trapezoid partition-of-unity axis at ``v``."""
    if v < e[0]:
        v = e[0]
    elif v > e[n]:
        v = e[n]
    j = 0
    while j < n - 1 and v >= e[j + 1]:
        j += 1
    if j >= 1:
        w = hw[j - 1]
        if v < e[j] + w:
            s = (v - (e[j] - w)) / (2.0 * w)
            return [j, j - 1], [s, 1.0 - s]
    if j < n - 1:
        w = hw[j]
        if v > e[j + 1] - w:
            s = ((e[j + 1] + w) - v) / (2.0 * w)
            return [j, j + 1], [s, 1.0 - s]
    return [j], [1.0]


def _driver_poly_coef(f: _Flat, xi, prior):
    na = f.naxes
    ai = []
    aw = []
    cnt = 1
    for a in range(na):
        ci, cw = axis_weights(f.kn_ncell[a], f.kn_edges[a], f.kn_hw[a], prior[a])
        ai.append(ci)
        aw.append(cw)
        cnt *= len(ci)
    acc = 0.0
    for m in range(cnt):
        jj = m
        cell = 0
        w = 1.0
        for a in range(na - 1, -1, -1):
            nc = len(ai[a])
            j = jj % nc
            jj //= nc
            cell += ai[a][j] * f.kn_stride[a]
            w *= aw[a][j]
        acc += w * f.coef[cell][xi]
    return acc


# ---------------------------------------------------------------- one sample


def grow(f: _Flat, g: Stream, x0, t_abs, r, compute_v, record=False):
    """Grow one tree; returns ``(status, u, v, size, particles)``."""
    d = f.d
    dt = f.dt
    stack = [(0.0, list(x0), 0, (1,))]
    created = 1
    prod = 1.0
    cv = 0.0
    root_tau = 0.0
    root_w = [0.0] * d
    root_surv = False
    is_root = True
    particles = [] if record else None

    while stack:
        birth, x, mark, label = stack.pop()
        xb = list(x)
        delta = _life_sample(f, g)
        remaining = r - birth
        survive = delta >= remaining
        end = r if survive else birth + delta
        tau = end - birth
        need_w = mark != 0 or (is_root and compute_v)

        if need_w:
            gx = [0.0] * (d * d)
            for i in range(d):
                gx[i * d + i] = 1.0
            wint = [0.0] * d
        else:
            gx = wint = None

        nfull_d = math.floor(tau / dt)
        rem = tau - nfull_d * dt
        nsteps = int(nfull_d)
        if rem > 1e-12 * dt:
            nsteps += 1
        if nsteps < 1:
            nsteps = 1
        if record:
            rec_t = [birth]
            rec_x = [list(x)]
            rec_g = [list(gx) if need_w else None]
            rec_dw = []
            tcur = birth
        for step in range(nsteps):
            h = dt if step < nsteps - 1 else tau - (nsteps - 1) * dt
            sq = math.sqrt(h)
            dw = [sq * g.next_normal() for _ in range(d)]
            status, mu, sig, dmu, dsig = _sde_eval(f, x, need_w)
            if status:
                return status, 0.0, None, created, particles
            if need_w:
                sinv = _mat_inverse(d, sig)
                if sinv is None:
                    return SINGULAR, 0.0, None, created, particles
                for j in range(d):
                    acc = 0.0
                    for i in range(d):
                        val = 0.0
                        for l in range(d):
                            val += sinv[i * d + l] * gx[l * d + j]
                        acc += val * dw[i]
                    wint[j] += acc
                gn = [0.0] * (d * d)
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
            xn = [0.0] * d
            for i in range(d):
                acc = 0.0
                for l in range(d):
                    acc += sig[i * d + l] * dw[l]
                xn[i] = x[i] + mu[i] * h + acc
            for i in range(d):
                if not _isfinite(xn[i]):
                    return DOMAIN, 0.0, None, created, particles
            x = xn
            if need_w:
                gx = gn
            if record:
                tcur = tcur + h
                rec_t.append(tcur)
                rec_x.append(list(x))
                rec_g.append(list(gx) if need_w else None)
                rec_dw.append(dw)

        xi_rec = None
        if survive:
            val = _terminal_eval(f, x)
            if mark != 0 and f.mark_cv:
                val = val - _terminal_eval(f, xb)
            fac = val / _life_survival(f, remaining)
        else:
            u = g.next_double()
            xi = 0
            while xi < f.nL - 1 and not (u < f.pcum[xi]):
                xi += 1
            td = t_abs + end
            ti = math.floor((td - f.pt0) / f.pdt + 0.5)
            if ti < 0:
                ti = 0
            if ti > f.nT - 1:
                ti = f.nT - 1
            idx, wts = _stencil(f, x)
            prior = [stencil_apply(f.pu[ti], idx, wts)]
            for i in range(d):
                prior.append(stencil_apply(f.pz[ti][i], idx, wts))
            num = _driver_poly_coef(f, xi, prior)
            if xi == f.zero_index:
                num = num + _source_eval(f, td, x)
            fac = num / (f.p[xi] * _life_density(f, delta))
            row = f.L[xi]
            n_child = 0
            for q in range(f.qp1):
                n_child += row[q]
            created += n_child
            if created > f.max_particles:
                return EXPLODED, 0.0, None, created, particles
            # children pushed in mark order; LIFO pops the last first
            c = 0
            for q in range(f.qp1):
                for _ in range(row[q]):
                    c += 1
                    stack.append((end, list(x), q, label + (c,)))
            xi_rec = tuple(row)

        if mark != 0:
            if tau > 0.0:
                if f.basis_fn is not None:
                    b = np.asarray(f.basis_fn(np.asarray(xb, dtype=float)), dtype=float)
                    brow = b.reshape(-1, d)[mark - 1].tolist()
                else:
                    brow = f.basis[mark - 1]
                bw = 0.0
                for i in range(d):
                    bw += brow[i] * wint[i]
                fac = fac * (bw / tau)
            else:
                fac = 0.0
        if is_root:
            if compute_v:
                root_tau = tau
                root_w = list(wint)
                root_surv = survive
                if survive and f.v_cv:
                    cv = _terminal_eval(f, xb) / _life_survival(f, remaining)
            is_root = False
        if record:
            particles.append(
                Particle(
                    label=label,
                    birth=birth,
                    death=end,
                    mark=mark,
                    survived=survive,
                    times=np.array(rec_t),
                    x=np.array(rec_x).reshape(-1, d),
                    grad_x=(
                        np.array(rec_g).reshape(-1, d, d) if need_w else np.empty((0, d, d))
                    ),
                    dw=np.array(rec_dw).reshape(-1, d),
                    offspring=xi_rec,
                    factor=fac,
                )
            )
        prod = prod * fac
        if prod == 0.0:
            break

    v = None
    if compute_v:
        if not root_surv:
            cv = 0.0
        v = [
            (prod - cv) * (root_w[i] / root_tau) if root_tau > 0.0 else 0.0
            for i in range(d)
        ]
    return OK, prod, v, created, particles


class Kernel:
    """Pure-Python counterpart of the compiled ``Kernel``."""

    def __init__(self, inp: KernelInputs):
        self.f = _Flat(inp)

    def run(self, x0, t_abs, r, key0, key1, start, count, compute_v):
        d = self.f.d
        x0l = [float(v) for v in np.asarray(x0, dtype=float).reshape(d)]
        u = np.zeros(count)
        v = np.zeros((count, d))
        largest = 0
        status = OK
        for n in range(count):
            g = Stream((key0, key1), start + n)
            status, un, vn, size, _ = grow(self.f, g, x0l, float(t_abs), float(r), bool(compute_v))
            largest = max(largest, size)
            if status:
                break
            u[n] = un
            if compute_v:
                v[n] = vn
        return u, v, status, largest

    def record(self, x0, t_abs, r, key0, key1, index, compute_v=True):
        d = self.f.d
        x0l = [float(v) for v in np.asarray(x0, dtype=float).reshape(d)]
        g = Stream((key0, key1), index)
        return grow(self.f, g, x0l, float(t_abs), float(r), bool(compute_v), record=True)


def philox_words(k0, k1, index, n):
    g = Stream((k0, k1), index)
    return np.array([g.next_u64() for _ in range(n)], dtype=np.uint64)


def stream_doubles_normals(k0, k1, index, n):
    g = Stream((k0, k1), index)
    return np.array([g.next_double() if i % 3 == 0 else g.next_normal() for i in range(n)])


def interpolate_points(inp, pts, vals, interp_kind):
    pts = np.asarray(pts, dtype=float)
    d = pts.shape[1]
    lo = [float(v) for v in inp.grid_lo]
    st = [float(v) for v in inp.grid_step]
    gn = [int(v) for v in inp.grid_n]
    gs = [int(v) for v in inp.grid_stride]
    vl = np.asarray(vals, dtype=float).tolist()
    out = np.empty(pts.shape[0])
    for n in range(pts.shape[0]):
        idx, wts = stencil(d, lo, st, gn, gs, interp_kind, pts[n].tolist())
        out[n] = stencil_apply(vl, idx, wts)
    return out
