"""Negacyclic number-theoretic transforms over word-sized primes.

All coefficient arithmetic stays in int64: primes are kept below 2^31 so
every butterfly product fits in a signed 64-bit word. Transforms are
vectorized stage by stage with precomputed index/twiddle tables.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

_MR_BASES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin for n < 3.3e24."""
    if n < 2:
        return False
    for p in _MR_BASES:
        if n % p == 0:
            return n == p
    d, r = n - 1, 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for a in _MR_BASES:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def find_ntt_primes(n: int, below: int, count: int, exclude: tuple[int, ...] = ()) -> list[int]:
    """Largest ``count`` primes p < below with p = 1 (mod 2n)."""
    step = 2 * n
    q = (below - 2) // step * step + 1
    out: list[int] = []
    while len(out) < count and q > step:
        if q not in exclude and is_prime(q):
            out.append(q)
        q -= step
    if len(out) < count:
        raise ValueError(f"not enough NTT primes below {below} for ring degree {n}")
    return out


def _bitrev(x: int, bits: int) -> int:
    y = 0
    for _ in range(bits):
        y = (y << 1) | (x & 1)
        x >>= 1
    return y


def _find_psi(n: int, p: int) -> int:
    """A generator of order 2n mod p (a primitive 2n-th root of unity)."""
    assert (p - 1) % (2 * n) == 0
    r = (p - 1) // (2 * n)
    for x in range(2, p - 1):
        y = pow(x, r, p)
        if pow(y, n, p) == p - 1:
            return y
    raise ValueError(f"no 2n-th root of unity mod {p}")


class NttPlan:
    """Precomputed tables for one (ring degree, prime) pair."""

    def __init__(self, n: int, prime: int):
        if n < 2 or n & (n - 1):
            raise ValueError("ring degree must be a power of two >= 2")
        if prime >= 1 << 31:
            raise ValueError("prime too large for int64 butterflies")
        if (prime - 1) % (2 * n) != 0:
            raise ValueError("prime does not support a negacyclic NTT of this size")
        self.n = n
        self.p = prime
        logn = n.bit_length() - 1
        psi = _find_psi(n, prime)
        w = np.array(
            [pow(psi, _bitrev(i, logn), prime) for i in range(n)], dtype=np.int64
        )
        self.n_inv = pow(n, -1, prime)
        self._fwd_stages = []
        for s in range(logn):
            half = n >> (s + 1)
            nblocks = 1 << s
            starts = np.arange(nblocks) * 2 * half
            lo = (starts[:, None] + np.arange(half)[None, :]).ravel()
            z = np.repeat(w[nblocks : 2 * nblocks], half)
            self._fwd_stages.append((lo, lo + half, z))
        self._inv_stages = []
        for s in range(logn):
            half = 1 << s
            nblocks = n >> (s + 1)
            starts = np.arange(nblocks) * 2 * half
            lo = (starts[:, None] + np.arange(half)[None, :]).ravel()
            z = np.repeat(w[2 * nblocks - 1 - np.arange(nblocks)], half)
            self._inv_stages.append((lo, lo + half, z))

    def fwd(self, a: np.ndarray) -> np.ndarray:
        """Forward transform along the last axis; input reduced mod p."""
        a = np.asarray(a, dtype=np.int64) % self.p
        for lo, hi, z in self._fwd_stages:
            x = a[..., lo]
            y = a[..., hi] * z % self.p
            a[..., lo] = (x + y) % self.p
            a[..., hi] = (x - y) % self.p
        return a

    def inv(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.int64) % self.p
        for lo, hi, z in self._inv_stages:
            x = a[..., lo]
            y = a[..., hi]
            a[..., lo] = (x + y) % self.p
            a[..., hi] = (y - x) * z % self.p
        return a * self.n_inv % self.p


@lru_cache(maxsize=None)
def get_plan(n: int, prime: int) -> NttPlan:
    return NttPlan(n, prime)


def negacyclic_convolve(f: np.ndarray, g: np.ndarray, p: int) -> np.ndarray:
    """Reference O(n^2) product f*g mod (x^n + 1, p), exact big-int arithmetic."""
    n = len(f)
    full = np.convolve(np.asarray(f, dtype=object), np.asarray(g, dtype=object))
    full = np.concatenate([full, np.zeros(2 * n - len(full), dtype=object)])
    return ((full[:n] - full[n:]) % p).astype(np.int64)
