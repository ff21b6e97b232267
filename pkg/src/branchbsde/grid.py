"""Grid functions, the face-lift operator and finite-difference gradients."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ._kernel import INTERP_LINEAR, INTERP_QUADRATIC

INTERP_TAGS = {"modified-quadratic": INTERP_QUADRATIC, "linear": INTERP_LINEAR}


@dataclass
class GridFunction:
    """Values on a uniform tensor grid.

    ``values`` has shape ``shape`` for scalar functions or ``shape + (k,)``
    for vector-valued ones.
    """

    lo: np.ndarray
    step: np.ndarray
    shape: tuple[int, ...]
    values: np.ndarray
    interp: str = "modified-quadratic"

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float).reshape(-1)
        self.step = np.asarray(self.step, dtype=float).reshape(-1)
        self.shape = tuple(int(n) for n in self.shape)
        self.values = np.asarray(self.values, dtype=float)
        if self.interp not in INTERP_TAGS:
            raise ValueError(f"unknown interpolation rule {self.interp!r}")
        if self.values.shape[: self.d] != self.shape:
            raise ValueError("values do not match the grid shape")

    @classmethod
    def from_box(cls, box, dx, fill=0.0, interp="modified-quadratic") -> "GridFunction":
        """Uniform grid over ``box`` (``[(lo, hi), ...]``) with spacing ``dx``."""
        box = np.atleast_2d(np.asarray(box, dtype=float))
        dx = np.broadcast_to(np.asarray(dx, dtype=float), (box.shape[0],))
        shape = tuple(int(round((h - l) / s)) + 1 for (l, h), s in zip(box, dx))
        vals = np.full(shape, float(fill)) if np.isscalar(fill) else np.asarray(fill)
        return cls(box[:, 0], dx, shape, vals, interp)

    @classmethod
    def sample(cls, fn, box, dx, interp="modified-quadratic") -> "GridFunction":
        g = cls.from_box(box, dx, interp=interp)
        vals = np.asarray(fn(g.nodes()), dtype=float)
        return g.with_values(vals.reshape(g.shape + vals.shape[1:]))

    @property
    def d(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def hi(self) -> np.ndarray:
        return self.lo + (np.asarray(self.shape) - 1) * self.step

    def axes(self) -> list[np.ndarray]:
        return [self.lo[a] + self.step[a] * np.arange(n) for a, n in enumerate(self.shape)]

    def nodes(self) -> np.ndarray:
        """Node coordinates, C order, shape ``(size, d)``."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def strides(self) -> np.ndarray:
        st = np.ones(self.d, dtype=np.intc)
        for a in range(self.d - 2, -1, -1):
            st[a] = st[a + 1] * self.shape[a + 1]
        return st

    def flat(self) -> np.ndarray:
        """Node values as ``(size,)`` or ``(size, k)``."""
        return self.values.reshape((self.size,) + self.values.shape[self.d :])

    def with_values(self, values) -> "GridFunction":
        return replace(self, values=np.asarray(values, dtype=float))

    def interpolate(self, x) -> np.ndarray:
        """Interpolate at points ``x`` of shape ``(n, d)`` (or one point)."""
        from .backend import core

        pts = np.ascontiguousarray(np.asarray(x, dtype=float).reshape(-1, self.d))
        kind = INTERP_TAGS[self.interp]
        flat = self.flat()
        if flat.ndim == 1:
            out = core.interpolate_points(self, pts, np.ascontiguousarray(flat), kind)
        else:
            out = np.stack(
                [
                    core.interpolate_points(self, pts, np.ascontiguousarray(flat[:, c]), kind)
                    for c in range(flat.shape[1])
                ],
                axis=-1,
            )
        if np.ndim(x) == 1 and self.d == len(np.ravel(x)):
            return out[0]
        return out

    # duck-typing for the compiled interpolator
    @property
    def grid_lo(self):
        return self.lo

    @property
    def grid_step(self):
        return self.step

    @property
    def grid_n(self):
        return np.asarray(self.shape, dtype=np.intc)

    @property
    def grid_stride(self):
        return self.strides()

    def to_csv(self, path, names=None) -> None:
        path = Path(path)
        flat = self.flat()
        cols = flat.reshape(self.size, -1)
        if names is None:
            names = ["value"] if flat.ndim == 1 else [f"value{c + 1}" for c in range(cols.shape[1])]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{a + 1}" for a in range(self.d)] + list(names))
            for node, row in zip(self.nodes(), cols):
                w.writerow([repr(float(v)) for v in node] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, interp="modified-quadratic") -> "GridFunction":
        with Path(path).open() as fh:
            rows = list(csv.reader(fh))
        header, data = rows[0], np.array(rows[1:], dtype=float)
        d = sum(1 for h in header if h.startswith("x"))
        coords = data[:, :d]
        axes = [np.unique(coords[:, a]) for a in range(d)]
        shape = tuple(len(ax) for ax in axes)
        step = [ax[1] - ax[0] if len(ax) > 1 else 1.0 for ax in axes]
        vals = data[:, d:]
        vals = vals.reshape(shape) if vals.shape[1] == 1 else vals.reshape(shape + (vals.shape[1],))
        return cls([ax[0] for ax in axes], step, shape, vals, interp)


# slopes within a few ulps of M count as M-Lipschitz, so lifted grids are fixed points
_ROUND = 8 * np.finfo(float).eps


def _sweep_axis(v: np.ndarray, axis: int, drop: float) -> bool:
    """One forward and one backward pass along ``axis``; True if anything changed."""
    w = np.moveaxis(v, axis, 0)
    changed = False
    n = w.shape[0]
    for k in range(1, n):
        cand = w[k - 1] - drop
        upd = cand - w[k] > _ROUND * (np.abs(w[k]) + drop)
        if upd.any():
            w[k] = np.where(upd, cand, w[k])
            changed = True
    for k in range(n - 2, -1, -1):
        cand = w[k + 1] - drop
        upd = cand - w[k] > _ROUND * (np.abs(w[k]) + drop)
        if upd.any():
            w[k] = np.where(upd, cand, w[k])
            changed = True
    return changed


def sup_convolution(values: np.ndarray, step, M: float) -> np.ndarray:
    """Discrete ``sup_{x'} (v(x') - M |x - x'|_1)`` over grid nodes."""
    v = np.array(values, dtype=float, copy=True)
    step = np.broadcast_to(np.asarray(step, dtype=float), (v.ndim,))
    while True:
        changed = False
        for a in range(v.ndim):
            if v.shape[a] > 1:
                changed |= _sweep_axis(v, a, M * step[a])
        if not changed:
            return v


def facelift(g: GridFunction, M: float) -> GridFunction:
    """Smallest M-Lipschitz (l1) majorant on the grid, clamped to ``[-M, M]``."""
    if not M > 0:
        raise ValueError("face-lift level M must be positive")
    if g.values.ndim != g.d:
        raise ValueError("face-lift applies to scalar grid functions")
    lifted = sup_convolution(g.values, g.step, M)
    return g.with_values(np.clip(lifted, -M, M))


def interpolate(g: GridFunction, x) -> np.ndarray:
    return g.interpolate(x)


def finite_difference_gradient(g: GridFunction) -> GridFunction:
    """Central differences inside, one-sided at the boundary; trailing axis is d."""
    if min(g.shape) < 3:
        raise ValueError("finite differences need at least 3 nodes per axis")
    comps = [np.gradient(g.values, g.step[a], axis=a, edge_order=1) for a in range(g.d)]
    return g.with_values(np.stack(comps, axis=-1))


def lipschitz_defect(g: GridFunction, M: float) -> float:
    """Largest excess of adjacent-node slopes over ``M`` (<= 0 when M-Lipschitz)."""
    worst = -math.inf
    for a in range(g.d):
        if g.shape[a] > 1:
            diff = np.abs(np.diff(g.values, axis=a)) - M * g.step[a]
            worst = max(worst, float(diff.max()))
    return worst
