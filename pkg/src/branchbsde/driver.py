"""Local-polynomial drivers.

A driver is a sum over localisation cells ``j`` and multi-indices ``l`` of
``c[j, l] * y**l[0] * prod_q (b_q . z)**l[q]``, weighted by kernels
``phi_j(y', z')`` of the prior. The kernels used here are tensor products of
one-dimensional trapezoid partitions of unity, so ``sum_j phi_j == 1``.

Gradient arguments ``z`` are spatial gradients ``Du`` of the solution.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ._kernel import SRC_CALLABLE, SRC_NONE, SRC_PAPER
from .errors import FitError

BILINEAR_INDEX = np.array([[0, 0], [1, 0], [0, 1], [1, 1]])


@dataclass
class TensorKernels:
    """Trapezoid partition of unity on ``1 + d`` prior axes.

    ``edges[a]`` are the cell boundaries of axis ``a``; interior breakpoints
    are blended linearly over a half-width ``blend * min(adjacent widths) / 2``.
    Prior values outside the outer edges are clamped.
    """

    edges: list
    blend: float = 0.2

    def __post_init__(self):
        self.edges = [np.asarray(e, dtype=float).reshape(-1) for e in self.edges]
        if not 0.0 < self.blend <= 1.0:
            raise ValueError("blend must lie in (0, 1]")
        for e in self.edges:
            if len(e) < 2 or np.any(np.diff(e) <= 0):
                raise ValueError("kernel edges must be strictly increasing")
        self.halfwidths = []
        for e in self.edges:
            wd = np.diff(e)
            self.halfwidths.append(self.blend * np.minimum(wd[:-1], wd[1:]) / 2.0)

    @property
    def naxes(self) -> int:
        return len(self.edges)

    @property
    def ncell(self) -> tuple[int, ...]:
        return tuple(len(e) - 1 for e in self.edges)

    @property
    def count(self) -> int:
        return int(np.prod(self.ncell))

    @property
    def lipschitz(self) -> float:
        """Bound on ``|D phi_j|`` (euclidean)."""
        slopes = [1.0 / (2.0 * hw.min()) for hw in self.halfwidths if len(hw)]
        return float(math.sqrt(sum(s * s for s in slopes))) if slopes else 0.0

    def strides(self) -> np.ndarray:
        nc = self.ncell
        st = np.ones(len(nc), dtype=np.intc)
        for a in range(len(nc) - 2, -1, -1):
            st[a] = st[a + 1] * nc[a + 1]
        return st

    def axis_weights(self, a: int, v: np.ndarray) -> np.ndarray:
        """Per-cell weights along axis ``a``; shape ``v.shape + (ncell_a,)``."""
        e = self.edges[a]
        hw = self.halfwidths[a]
        v = np.clip(np.asarray(v, dtype=float), e[0], e[-1])
        n = len(e) - 1
        # cumulative "left of breakpoint k" ramps; weight_j = ramp_{j} - ramp_{j+1}
        ramps = [np.ones_like(v)]
        for k in range(1, n):
            s = (v - (e[k] - hw[k - 1])) / (2.0 * hw[k - 1])
            ramps.append(np.clip(s, 0.0, 1.0))
        ramps.append(np.zeros_like(v))
        ramps = np.stack(ramps, axis=-1)
        return ramps[..., :-1] - ramps[..., 1:]

    def weights(self, prior: np.ndarray) -> np.ndarray:
        """``phi_j(prior)`` for points of shape ``(..., naxes)``; shape ``(..., count)``."""
        prior = np.asarray(prior, dtype=float)
        out = None
        for a in range(self.naxes):
            w = self.axis_weights(a, prior[..., a])
            out = w if out is None else (out[..., :, None] * w[..., None, :]).reshape(
                w.shape[:-1] + (-1,)
            )
        return out


@dataclass
class Source:
    """Additive ``f0(t, x)`` carried by the degree-zero coefficient.

    ``kind`` selects a compiled family (``SRC_PAPER`` with its parameter
    vector) or a Python callable (``SRC_CALLABLE``).
    """

    kind: int = SRC_NONE
    params: np.ndarray = field(default_factory=lambda: np.zeros(0))
    fn: Callable | None = None
    sup: float = 0.0

    def __call__(self, t, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == SRC_NONE:
            return np.zeros(x.shape[:-1])
        if self.kind == SRC_PAPER:
            return paper_source(self.params, t, x[..., 0])
        return np.asarray(self.fn(t, x), dtype=float)


def paper_source(par, t, x):
    """Source term making ``(1 + cos x)/2 * exp((t - T)/2)`` an exact solution."""
    T, a, b, s0, s1, lo, hi = par[:7]
    s = s0 * (1.0 + s1 * np.clip(x, lo, hi))
    m = a * (x + b)
    cx = np.cos(x)
    sx = np.sin(x)
    return 0.5 * np.exp((t - T) / 2.0) * (cx * s * s / 2.0 - 0.5 * (1.0 + cx) + m * sx) - 2.0 / (
        4.0 + np.abs(sx * (1.0 + cx)) * np.exp(t - T)
    )


@dataclass
class LocalPolynomialDriver:
    index_set: np.ndarray  # (nL, q + 1)
    coeffs: np.ndarray  # (cells, nL)
    basis: np.ndarray  # (q, d)
    kernels: TensorKernels
    d: int = 1
    source: Source = field(default_factory=Source)
    fit_box: np.ndarray | None = None  # [[y_lo, y_hi], [z_lo, z_hi], ...]
    basis_fn: Callable | None = None

    def __post_init__(self):
        self.index_set = np.atleast_2d(np.asarray(self.index_set, dtype=int))
        self.coeffs = np.atleast_2d(np.asarray(self.coeffs, dtype=float))
        self.basis = np.asarray(self.basis, dtype=float).reshape(-1, self.d)
        if self.index_set.shape[1] != self.q_count + 1:
            raise ValueError("index set width must be q + 1")
        if self.coeffs.shape != (self.kernels.count, len(self.index_set)):
            raise ValueError("coefficient table must be (cells, |L|)")
        if self.kernels.naxes != 1 + self.d:
            raise ValueError("kernels must act on (y', z') with 1 + d axes")
        if np.any(np.linalg.norm(self.basis, axis=1) > 1.0 + 1e-12):
            raise ValueError("gradient directions must have norm <= 1")
        if self.fit_box is not None:
            self.fit_box = np.asarray(self.fit_box, dtype=float).reshape(-1, 2)

    @property
    def j_count(self) -> int:
        return self.kernels.count

    @property
    def q_count(self) -> int:
        return self.basis.shape[0]

    @property
    def card_L(self) -> int:
        return len(self.index_set)

    @property
    def c_sup(self) -> float:
        return float(np.abs(self.coeffs).max()) if self.coeffs.size else 0.0

    @property
    def kernel_lip(self) -> float:
        return self.kernels.lipschitz

    def zero_index(self) -> int:
        hits = np.flatnonzero(self.index_set.sum(axis=1) == 0)
        return int(hits[0]) if len(hits) else -1

    def coef_norms(self) -> np.ndarray:
        """``max_j |c[j, l]|`` per index, the source bound folded into l = 0."""
        norms = np.abs(self.coeffs).max(axis=0).astype(float)
        z = self.zero_index()
        if z >= 0 and self.source.kind != SRC_NONE:
            norms[z] += self.source.sup
        return norms

    def default_probs(self) -> np.ndarray:
        norms = self.coef_norms()
        total = norms.sum()
        if total == 0.0:
            return np.full(self.card_L, 1.0 / self.card_L)
        return norms / total

    def monomials(self, x, y, z) -> np.ndarray:
        """``y**l0 * prod_q (b_q . z)**lq`` for every index; shape ``(..., nL)``."""
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float).reshape(y.shape + (self.d,))
        if self.basis_fn is not None:
            b = np.asarray(self.basis_fn(np.asarray(x, dtype=float)), dtype=float)
            bz = np.einsum("...qd,...d->...q", b.reshape(y.shape + (self.q_count, self.d)), z)
        else:
            bz = z @ self.basis.T
        cols = []
        for row in self.index_set:
            term = y ** row[0]
            for q in range(self.q_count):
                term = term * bz[..., q] ** row[q + 1]
            cols.append(term)
        return np.stack(cols, axis=-1)

    def to_dict(self) -> dict:
        if self.source.kind == SRC_CALLABLE or self.basis_fn is not None:
            raise ValueError("drivers with Python callables cannot be serialised")
        return {
            "d": self.d,
            "index_set": self.index_set.tolist(),
            "basis": self.basis.tolist(),
            "kernel_edges": [e.tolist() for e in self.kernels.edges],
            "kernel_blend": self.kernels.blend,
            "coeffs": self.coeffs.tolist(),
            "fit_box": None if self.fit_box is None else self.fit_box.tolist(),
            "source": {
                "kind": int(self.source.kind),
                "params": np.asarray(self.source.params).tolist(),
                "sup": self.source.sup,
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LocalPolynomialDriver":
        src = data.get("source") or {}
        return cls(
            index_set=data["index_set"],
            coeffs=data["coeffs"],
            basis=data["basis"],
            kernels=TensorKernels(data["kernel_edges"], data.get("kernel_blend", 0.2)),
            d=int(data["d"]),
            source=Source(
                int(src.get("kind", SRC_NONE)),
                np.asarray(src.get("params", []), dtype=float),
                None,
                float(src.get("sup", 0.0)),
            ),
            fit_box=data.get("fit_box"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "LocalPolynomialDriver":
        return cls.from_dict(json.loads(Path(path).read_text()))


def eval_f_circ(drv: LocalPolynomialDriver, x, y, z, y_prior, z_prior, t=None) -> np.ndarray:
    """Evaluate the driver at ``(x, y, z)`` with kernels at the prior.

    When ``t`` is given the additive source ``f0(t, x)`` is included.
    Inputs broadcast over leading axes; ``z`` and ``z_prior`` carry a trailing
    axis of length ``d``.
    """
    y = np.asarray(y, dtype=float)
    yp = np.asarray(y_prior, dtype=float)
    d = drv.d
    z = np.asarray(z, dtype=float).reshape(y.shape + (d,))
    zp = np.asarray(z_prior, dtype=float).reshape(yp.shape + (d,))
    phi = drv.kernels.weights(np.concatenate([yp[..., None], zp], axis=-1))
    mono = drv.monomials(x, y, z)
    out = np.einsum("...j,jl,...l->...", phi, drv.coeffs, mono)
    if t is not None and drv.source.kind != SRC_NONE:
        xa = np.asarray(x, dtype=float).reshape(y.shape + (d,))
        out = out + drv.source(t, xa)
    return out


def project_fit_box(drv: LocalPolynomialDriver, y, z):
    if drv.fit_box is None:
        return np.asarray(y, dtype=float), np.asarray(z, dtype=float)
    box = drv.fit_box
    y = np.clip(np.asarray(y, dtype=float), box[0, 0], box[0, 1])
    z = np.asarray(z, dtype=float)
    if len(box) > 1:
        z = np.clip(z, box[1:, 0], box[1:, 1])
    return y, z


def eval_f_bar(drv: LocalPolynomialDriver, x, y, z, t=None) -> np.ndarray:
    """``f_circ(x, y, z, y, z)`` after projecting ``(y, z)`` onto the fit box."""
    y, z = project_fit_box(drv, y, z)
    return eval_f_circ(drv, x, y, z, y, z, t)


def fit_from_driver(fhat, box, n_y: int, n_z: int, blend: float = 0.2) -> LocalPolynomialDriver:
    """Tensor bilinear spline fit of ``fhat(y, z)`` (scalar ``z``, d = 1).

    One cell per mesh rectangle; on each the polynomial in ``1, y, z, yz``
    interpolates ``fhat`` at the four corners.
    """
    if n_y < 1 or n_z < 1:
        raise FitError("mesh counts must be at least 1")
    box = np.asarray(box, dtype=float).reshape(2, 2)
    if not (box[0, 1] > box[0, 0] and box[1, 1] > box[1, 0]):
        raise FitError("fit box is degenerate")
    ye = np.linspace(box[0, 0], box[0, 1], n_y + 1)
    ze = np.linspace(box[1, 0], box[1, 1], n_z + 1)
    Y, Z = np.meshgrid(ye, ze, indexing="ij")
    try:
        with np.errstate(all="ignore"):
            F = np.asarray(np.vectorize(fhat, otypes=[float])(Y, Z), dtype=float)
    except (ArithmeticError, ValueError) as exc:
        raise FitError(f"fhat failed at a spline node: {exc}") from exc
    if not np.all(np.isfinite(F)):
        raise FitError("fhat is not finite at every spline node")
    f00, f10 = F[:-1, :-1], F[1:, :-1]
    f01, f11 = F[:-1, 1:], F[1:, 1:]
    y0 = ye[:-1][:, None]
    z0 = ze[:-1][None, :]
    hy = np.diff(ye)[:, None]
    hz = np.diff(ze)[None, :]
    a1 = (f10 - f00) / hy
    b1 = (f01 - f00) / hz
    dd = (f11 - f10 - f01 + f00) / (hy * hz)
    c_const = f00 - a1 * y0 - b1 * z0 + dd * y0 * z0
    c_y = a1 - dd * z0
    c_z = b1 - dd * y0
    c_yz = np.broadcast_to(dd, c_const.shape)
    coeffs = np.stack([c_const, c_y, c_z, c_yz], axis=-1).reshape(n_y * n_z, 4)
    return LocalPolynomialDriver(
        index_set=BILINEAR_INDEX,
        coeffs=coeffs,
        basis=[[1.0]],
        kernels=TensorKernels([ye, ze], blend),
        d=1,
        fit_box=box,
    )


def sup_f_circ(drv: LocalPolynomialDriver, M_cap: float) -> float:
    """Upper bound of ``|f_circ|`` when ``|y|, |y'| <= M_cap`` and ``|Du|, |Du'| <= M_cap``.

    Uses ``sum_j phi_j = 1`` and ``|b_q| <= 1``: the bound is the worst cell's
    ``sum_l |c[j, l]| M_cap**|l|``, plus the source bound on the zero index.
    """
    if not M_cap > 0:
        raise ValueError("M_cap must be positive")
    powers = M_cap ** drv.index_set.sum(axis=1).astype(float)
    per_cell = np.abs(drv.coeffs) @ powers
    out = float(per_cell.max()) if per_cell.size else 0.0
    if drv.source.kind != SRC_NONE:
        out += drv.source.sup
    return out


def lipschitz_bound(drv: LocalPolynomialDriver) -> float:
    """Lipschitz constant of ``eval_f_bar`` on the fit box (euclidean in (y, z)).

    Per axis: twice the largest partial-derivative magnitude of any cell
    polynomial over its blend-enlarged cell; the factor two absorbs the kernel
    blending term. Valid for the bilinear spline fits.
    """
    if drv.fit_box is None:
        raise ValueError("Lipschitz bound needs a fit box")
    ke = drv.kernels
    ye, ze = ke.edges[0], ke.edges[1]
    nz = len(ze) - 1
    gy = gz = 0.0
    for j in range(ke.count):
        iy, iz = divmod(j, nz)
        c0, cy, cz, cyz = drv.coeffs[j]
        ylo = ye[iy] - (ke.halfwidths[0][iy - 1] if iy > 0 else 0.0)
        yhi = ye[iy + 1] + (ke.halfwidths[0][iy] if iy < len(ye) - 2 else 0.0)
        zlo = ze[iz] - (ke.halfwidths[1][iz - 1] if iz > 0 else 0.0)
        zhi = ze[iz + 1] + (ke.halfwidths[1][iz] if iz < nz - 1 else 0.0)
        gy = max(gy, abs(cy + cyz * zlo), abs(cy + cyz * zhi))
        gz = max(gz, abs(cz + cyz * ylo), abs(cz + cyz * yhi))
    return float(2.0 * math.hypot(gy, gz))


def _single_cell(d: int) -> TensorKernels:
    return TensorKernels([[-1.0, 1.0]] * (1 + d))


def zero_driver(d: int = 1) -> LocalPolynomialDriver:
    return LocalPolynomialDriver(np.zeros((1, 2), int), [[0.0]], np.eye(1, d), _single_cell(d), d)


def constant_driver(c0: float, d: int = 1) -> LocalPolynomialDriver:
    return LocalPolynomialDriver(np.zeros((1, 2), int), [[c0]], np.eye(1, d), _single_cell(d), d)


def linear_driver(c: float, d: int = 1) -> LocalPolynomialDriver:
    """``f = c * y`` in one global cell."""
    return LocalPolynomialDriver([[1, 0]], [[c]], np.eye(1, d), _single_cell(d), d)


def polynomial_driver(index_set, coeffs, basis, d: int = 1) -> LocalPolynomialDriver:
    """One global cell (kernel identically 1) with the given polynomial."""
    basis = np.asarray(basis, dtype=float).reshape(-1, d)
    return LocalPolynomialDriver(
        index_set, np.atleast_2d(np.asarray(coeffs, dtype=float)), basis, _single_cell(d), d
    )
