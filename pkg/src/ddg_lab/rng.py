"""Portable, seeded random streams.

Every random number in the lab comes from here.  The bit source is PCG64
(PCG XSL RR 128/64) as implemented by ``numpy.random.PCG64``; only its raw
64-bit output is consumed, which NumPy keeps stable across versions and
platforms.  Conversions on top of the raw stream are done here so they do
not depend on NumPy's distribution code:

* uniform doubles: ``(raw >> 11) * 2**-53``, giving values in ``[0, 1)``;
* normals: Box-Muller on consecutive uniform pairs ``(u1, u2)``, emitting
  ``r*cos(2*pi*u2)`` then ``r*sin(2*pi*u2)`` with ``r = sqrt(-2 ln(1 - u1))``.
  An odd request discards the trailing sine value.

Sub-seeds are derived with BLAKE2b over the little-endian encoding of the
master seed and a tuple of integer/string keys.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

_TWO_POW_M53 = 2.0 ** -53


def derive_seed(master: int, *keys: int | str) -> int:
    """Hash a master seed and a key path into an independent 64-bit seed."""
    h = hashlib.blake2b(digest_size=8, person=b"ddg-lab-seed")
    h.update(struct.pack("<Q", master & 0xFFFFFFFFFFFFFFFF))
    for key in keys:
        if isinstance(key, str):
            raw = key.encode("utf-8")
            h.update(b"s" + struct.pack("<I", len(raw)) + raw)
        else:
            h.update(b"i" + struct.pack("<q", int(key)))
    return struct.unpack("<Q", h.digest())[0]


class Rng:
    """A seeded stream of uniforms, normals and integers."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._bits = np.random.PCG64(self.seed)

    def raw(self, n: int) -> np.ndarray:
        return np.asarray(self._bits.random_raw(n), dtype=np.uint64)

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53
        if low == 0.0 and high == 1.0:
            return u
        return low + (high - low) * u

    def normal(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = r * np.cos(theta)
        z[:, 1] = r * np.sin(theta)
        z = z.reshape(-1)[:n]
        if mean == 0.0 and std == 1.0:
            return z
        return mean + std * z

    def integers(self, n: int, high: int) -> np.ndarray:
        """Integers in ``[0, high)`` by multiply-shift on the top 32 bits."""
        if high < 1:
            raise ValueError("high must be >= 1")
        top = self.raw(n) >> np.uint64(32)
        return ((top * np.uint64(high)) >> np.uint64(32)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)`` driven by this stream."""
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
