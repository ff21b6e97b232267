"""Forward diffusion, tangent process and Malliavin weights.

Coefficient callables take points of shape ``(..., d)`` and return
``mu: (..., d)``, ``sigma: (..., d, d)``, ``d_mu: (..., d, d)`` and
``d_sigma: (..., d, d, d)`` where ``d_sigma[..., i, k, l]`` is the derivative
of ``sigma[..., k, i]`` (column ``i``) with respect to ``x_l``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ._kernel import SDE_AFFINE, SDE_CALLABLE, SDE_CLAMP1D
from .errors import CoefficientDomainError, EllipticityError
from .rng import Stream

ArrayFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class SdeCoefficients:
    mu: ArrayFn
    sigma: ArrayFn
    d_mu: ArrayFn
    d_sigma: ArrayFn
    d: int
    a0: float
    kind: int = SDE_CALLABLE
    params: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bounds: dict = field(default_factory=dict)

    @classmethod
    def affine(cls, A, b, S) -> "SdeCoefficients":
        """Linear drift ``A x + b`` and constant diffusion ``S``."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        d = A.shape[0]
        b = np.asarray(b, dtype=float).reshape(d)
        S = np.asarray(S, dtype=float).reshape(d, d)
        a0 = float(np.linalg.svd(S, compute_uv=False).min())

        def mu(x):
            x = np.asarray(x, dtype=float)
            return x @ A.T + b

        def sigma(x):
            x = np.asarray(x, dtype=float)
            return np.broadcast_to(S, x.shape[:-1] + (d, d)).copy()

        def d_mu(x):
            x = np.asarray(x, dtype=float)
            return np.broadcast_to(A, x.shape[:-1] + (d, d)).copy()

        def d_sigma(x):
            x = np.asarray(x, dtype=float)
            return np.zeros(x.shape[:-1] + (d, d, d))

        par = np.concatenate([A.ravel(), b, S.ravel()])
        out = cls(mu, sigma, d_mu, d_sigma, d, a0, SDE_AFFINE, par)
        out.bounds = {
            "sigma": float(np.linalg.norm(S, 2)),
            "d_mu": float(np.linalg.norm(A, 2)),
            "d_sigma": 0.0,
        }
        return out

    @classmethod
    def clamped_vol_1d(cls, a, b, s0, s1, lo=0.0, hi=1.0) -> "SdeCoefficients":
        """``mu(x) = a (x + b)``, ``sigma(x) = s0 (1 + s1 clip(x, lo, hi))``."""
        a, b, s0, s1, lo, hi = map(float, (a, b, s0, s1, lo, hi))

        def mu(x):
            x = np.asarray(x, dtype=float)
            return a * (x + b)

        def sigma(x):
            x = np.asarray(x, dtype=float)
            return (s0 * (1.0 + s1 * np.clip(x, lo, hi)))[..., None]

        def d_mu(x):
            x = np.asarray(x, dtype=float)
            return np.full(x.shape[:-1] + (1, 1), a)

        def d_sigma(x):
            x = np.asarray(x, dtype=float)
            inside = (x > lo) & (x < hi)
            return np.where(inside, s0 * s1, 0.0)[..., None, None]

        svals = (s0 * (1.0 + s1 * lo), s0 * (1.0 + s1 * hi))
        a0 = min(abs(v) for v in svals)
        par = np.array([a, b, s0, s1, lo, hi])
        out = cls(mu, sigma, d_mu, d_sigma, 1, a0, SDE_CLAMP1D, par)
        out.bounds = {
            "sigma": max(abs(v) for v in svals),
            "d_mu": abs(a),
            "d_sigma": abs(s0 * s1),
        }
        return out

    def sup_norms(self, box, n: int = 2001, seed: int = 0) -> dict:
        """Sup-norms of mu, sigma, D mu, D sigma sampled over ``box``.

        Grid corners plus uniform random points; the recorded analytic bounds
        (when known) take precedence for the derivative-type entries.
        """
        lo, hi = _box_arrays(box, self.d)
        rng = np.random.default_rng(seed)
        pts = lo + (hi - lo) * rng.random((n, self.d))
        corners = np.array(np.meshgrid(*[[l, h] for l, h in zip(lo, hi)], indexing="ij"))
        pts = np.vstack([pts, corners.reshape(self.d, -1).T])
        mu = self.mu(pts)
        sig = self.sigma(pts)
        out = {
            "mu": float(np.max(np.linalg.norm(mu, axis=-1))),
            "sigma": float(np.max(np.linalg.norm(sig, 2, axis=(-2, -1)))),
            "d_mu": float(np.max(np.linalg.norm(self.d_mu(pts), 2, axis=(-2, -1)))),
            "d_sigma": float(
                np.max(np.linalg.norm(self.d_sigma(pts), 2, axis=(-2, -1)).max(axis=-1))
            ),
        }
        for key in ("sigma", "d_mu", "d_sigma"):
            if key in self.bounds:
                out[key] = max(out[key], self.bounds[key])
        return out

    def check_ellipticity(self, points) -> None:
        """Raise if ``sigma sigma^T < a0^2 I`` at any of ``points``."""
        pts = np.asarray(points, dtype=float).reshape(-1, self.d)
        sig = self.sigma(pts)
        smin = np.linalg.svd(sig, compute_uv=False).min(axis=-1)
        bad = smin < self.a0 * (1.0 - 1e-12)
        if np.any(bad):
            i = int(np.argmax(bad))
            raise EllipticityError(
                f"smallest singular value {smin[i]:.3g} below floor {self.a0:.3g} at {pts[i]}"
            )


def paper_coefficients() -> SdeCoefficients:
    """``mu(x) = -0.5 (x + 0.2)``, ``sigma(x) = 0.1 (1 + 0.5 clip(x, 0, 1))``."""
    return SdeCoefficients.clamped_vol_1d(-0.5, 0.2, 0.1, 0.5, 0.0, 1.0)


def _box_arrays(box, d):
    arr = np.asarray(box, dtype=float)
    if arr.ndim == 1:
        arr = np.tile(arr, (d, 1))
    return arr[:, 0], arr[:, 1]


def step_count(tau: float, dt: float) -> int:
    """Number of Euler steps on ``[0, tau]``; the last one may be shorter."""
    nfull = math.floor(tau / dt)
    n = int(nfull)
    if tau - nfull * dt > 1e-12 * dt:
        n += 1
    return max(n, 1)


@dataclass
class PathSample:
    times: np.ndarray
    x: np.ndarray
    grad_x: np.ndarray
    dw: np.ndarray
    sigma: np.ndarray
    a0: float
    seed: tuple = ()


def simulate_path(
    coef: SdeCoefficients, x0, t0: float, t1: float, dt: float, rng: Stream
) -> PathSample:
    """Euler-Maruyama for X and its tangent process, sharing increments."""
    if not t1 > t0:
        raise ValueError("simulate_path needs t0 < t1")
    if not dt > 0:
        raise ValueError("dt must be positive")
    d = coef.d
    tau = t1 - t0
    n = step_count(tau, dt)
    times = np.empty(n + 1)
    xs = np.empty((n + 1, d))
    gs = np.empty((n + 1, d, d))
    sg = np.empty((n + 1, d, d))
    dws = np.empty((n, d))
    times[0] = t0
    xs[0] = np.asarray(x0, dtype=float).reshape(d)
    gs[0] = np.eye(d)
    for k in range(n):
        h = dt if k < n - 1 else tau - (n - 1) * dt
        dw = math.sqrt(h) * np.array([rng.next_normal() for _ in range(d)])
        x = xs[k]
        mu = np.asarray(coef.mu(x), dtype=float).reshape(d)
        sig = np.asarray(coef.sigma(x), dtype=float).reshape(d, d)
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sig))):
            raise CoefficientDomainError(f"non-finite coefficients at x={x}")
        dmu = np.asarray(coef.d_mu(x), dtype=float).reshape(d, d)
        dsig = np.asarray(coef.d_sigma(x), dtype=float).reshape(d, d, d)
        sg[k] = sig
        xs[k + 1] = x + mu * h + sig @ dw
        gs[k + 1] = gs[k] + dmu @ gs[k] * h + np.einsum("ikl,lj,i->kj", dsig, gs[k], dw)
        dws[k] = dw
        times[k + 1] = t0 + (k + 1) * dt if k < n - 1 else t1
        if not np.all(np.isfinite(xs[k + 1])):
            raise CoefficientDomainError(f"path left the coefficient domain at step {k}")
    sg[n] = np.asarray(coef.sigma(xs[n]), dtype=float).reshape(d, d)
    return PathSample(times, xs, gs, dws, sg, coef.a0, (rng.key, rng.index))


def _index_of(times: np.ndarray, t: float) -> int:
    i = int(np.argmin(np.abs(times - t)))
    if not math.isclose(times[i], t, rel_tol=1e-12, abs_tol=1e-12):
        raise ValueError(f"time {t} is not on the path grid")
    return i


def malliavin_weight(path: PathSample, t: float, s: float) -> np.ndarray:
    """``(1/(s-t)) sum_k [sigma^{-1} grad X_k]^T dW_k``, times ``grad X_t^{-1}``."""
    if not s > t:
        raise ValueError("malliavin_weight needs t < s")
    i0 = _index_of(path.times, t)
    i1 = _index_of(path.times, s)
    d = path.x.shape[1]
    acc = np.zeros(d)
    for k in range(i0, i1):
        sig = path.sigma[k]
        smin = np.linalg.svd(sig, compute_uv=False).min()
        if smin == 0.0 or smin < path.a0 * (1.0 - 1e-12):
            raise EllipticityError(f"sigma below the ellipticity floor at step {k}")
        m = np.linalg.solve(sig, path.grad_x[k])
        acc += m.T @ path.dw[k]
    w = acc / (s - t)
    if i0 > 0:
        w = w @ np.linalg.inv(path.grad_x[i0])
    return w


def simulate_endpoints(
    coef: SdeCoefficients,
    x0,
    horizon: float,
    dt: float,
    n_paths: int,
    rng: np.random.Generator,
    with_weight: bool = False,
):
    """Vectorised Euler endpoints ``X_horizon`` for a batch of starting points.

    ``x0`` has shape ``(m, d)``; returns ``(m, n_paths, d)`` endpoints and, if
    requested, the Malliavin weight anchored at the start.
    """
    d = coef.d
    x0 = np.asarray(x0, dtype=float).reshape(-1, d)
    x = np.repeat(x0[:, None, :], n_paths, axis=1)
    n = step_count(horizon, dt)
    g = np.broadcast_to(np.eye(d), x.shape[:-1] + (d, d)).copy() if with_weight else None
    w = np.zeros(x.shape) if with_weight else None
    for k in range(n):
        h = dt if k < n - 1 else horizon - (n - 1) * dt
        dw = math.sqrt(h) * rng.standard_normal(x.shape)
        mu = coef.mu(x)
        sig = coef.sigma(x)
        if with_weight:
            m = np.linalg.solve(sig, g)
            w += np.einsum("...ij,...i->...j", m, dw)
            g = g + coef.d_mu(x) @ g * h + np.einsum("...ikl,...lj,...i->...kj", coef.d_sigma(x), g, dw)
        x = x + mu * h + np.einsum("...kl,...l->...k", sig, dw)
    if with_weight:
        return x, w / horizon
    return x
