"""Counter-based random streams.

Every Monte-Carlo sample owns an independent Philox4x64-10 stream, addressed by
a 128-bit key derived from the master seed and the sample's coordinates
(Picard iteration, interval, grid node) and by the sample index, which is
placed in the second counter word. Results therefore do not depend on how
samples are batched or scheduled across workers.

The pure-Python stream below draws from :class:`numpy.random.Philox`; the
compiled core carries its own Philox implementation and the test-suite checks
that both emit the same words.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_TWO_PI = 6.283185307179586
_INV_2_53 = 1.0 / 9007199254740992.0


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def stream_key(seed: int, *ids: int) -> tuple[int, int]:
    """Derive a Philox key from a master seed and integer coordinates."""
    state = int(seed) & _MASK64
    state, k0 = _splitmix64(state)
    for i in ids:
        state = (state ^ ((int(i) * 0xD6E8FEB86659FD93) & _MASK64)) & _MASK64
        state, k0 = _splitmix64(state ^ k0)
    state, k1 = _splitmix64(state ^ 0x5851F42D4C957F2D)
    return k0, k1


class Stream:
    """Sequential uniform/normal draws from one sample's Philox stream.

    ``next_double`` follows numpy's conversion ``(u64 >> 11) * 2**-53``;
    normals use the polar-free Box-Muller pair and cache the second value.
    """

    __slots__ = ("key", "index", "_bg", "_buf", "_pos", "_cached")

    _CHUNK = 64

    def __init__(self, key: tuple[int, int], index: int = 0):
        self.key = (int(key[0]) & _MASK64, int(key[1]) & _MASK64)
        self.index = int(index)
        self._bg = np.random.Philox(
            counter=np.array([0, self.index, 0, 0], dtype=np.uint64),
            key=np.array(self.key, dtype=np.uint64),
        )
        self._buf: list[int] = []
        self._pos = 0
        self._cached: float | None = None

    def next_u64(self) -> int:
        if self._pos >= len(self._buf):
            self._buf = self._bg.random_raw(self._CHUNK).tolist()
            self._pos = 0
        out = self._buf[self._pos]
        self._pos += 1
        return out

    def next_double(self) -> float:
        return (self.next_u64() >> 11) * _INV_2_53

    def next_normal(self) -> float:
        if self._cached is not None:
            out = self._cached
            self._cached = None
            return out
        u1 = 1.0 - self.next_double()
        u2 = self.next_double()
        rad = math.sqrt(-2.0 * math.log(u1))
        th = _TWO_PI * u2
        self._cached = rad * math.sin(th)
        return rad * math.cos(th)

    def normals(self, n: int) -> np.ndarray:
        return np.array([self.next_normal() for _ in range(n)])


def make_stream(seed: int, *ids: int, index: int = 0) -> Stream:
    return Stream(stream_key(seed, *ids), index)
