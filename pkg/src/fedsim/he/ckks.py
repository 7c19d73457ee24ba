"""Batched approximate homomorphic encryption over RLWE.

The construction follows the usual approximate-arithmetic recipe: real
vectors are embedded into negacyclic ring elements through the canonical
embedding (a twisted FFT), scaled by 2^scale_bits and rounded; ring elements
live in RNS form over a small prime chain and are encrypted as RLWE pairs
(c0, c1) = (b*u + e0 + m, a*u + e1) under the public key (b, a) = (-a*s + e, a).

The chain holds two ~31-bit base primes plus one ~28-bit rescaling prime,
giving exactly one multiplicative level: a plaintext scalar is encoded at a
scale equal to the rescaling prime, so dropping that prime after the single
multiplication returns the ciphertext to its original scale exactly.

Everything is deterministic given the caller-provided generators, and all
polynomial arithmetic happens in the NTT domain on int64 words.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..rng import substream
from .ntt import find_ntt_primes, get_plan

ERROR_STD = 3.2
_BASE_PRIME_BOUND = 1 << 31
_SPECIAL_PRIME_BOUND = 1 << 28


class DecryptionError(Exception):
    """Ciphertext and key material do not belong together."""


class DepthExceededError(Exception):
    """The single multiplicative level was already consumed."""


@dataclass(frozen=True)
class SchemeParams:
    """Ring dimension N packs N/2 real slots; ``batch_size`` is the number of
    slots actually packed per ciphertext (defaults to all of them)."""

    ring_dim: int = 8192
    scale_bits: int = 52
    depth: int = 1
    security_bits: int = 128
    batch_size: int | None = None

    def __post_init__(self):
        n = self.ring_dim
        if n < 16 or n & (n - 1):
            raise ValueError("ring_dim must be a power of two >= 16")
        if self.depth != 1:
            raise ValueError("only multiplicative depth 1 is supported")
        if not (20 <= self.scale_bits <= 56):
            raise ValueError("scale_bits out of the supported range [20, 56]")
        if self.batch_size is not None and not (1 <= self.batch_size <= n // 2):
            raise ValueError("batch_size must lie in [1, ring_dim/2]")

    @property
    def max_slots(self) -> int:
        return self.ring_dim // 2

    @property
    def slots(self) -> int:
        return self.batch_size if self.batch_size is not None else self.max_slots


def toy_params(batch_size: int | None = None) -> SchemeParams:
    """Small, fast, insecure preset for tests."""
    return SchemeParams(ring_dim=1024, security_bits=0, batch_size=batch_size)


class CkksContext:
    def __init__(self, params: SchemeParams):
        self.params = params
        n = params.ring_dim
        self.n = n
        base = find_ntt_primes(n, _BASE_PRIME_BOUND, 2)
        special = find_ntt_primes(n, _SPECIAL_PRIME_BOUND, 1, exclude=tuple(base))[0]
        self.base_primes = tuple(base)
        self.special_prime = special
        self.primes = tuple(base) + (special,)  # fresh level order
        self.plans = [get_plan(n, p) for p in self.primes]
        self.scale = float(2 ** params.scale_bits)
        k = np.arange(n)
        self._twist = np.exp(1j * np.pi * k / n)
        self._untwist = np.conj(self._twist)
        # per-coefficient magnitude that still decrypts at the base level
        self.coeff_budget = math.prod(self.base_primes) // 2

    @staticmethod
    @lru_cache(maxsize=None)
    def get(params: SchemeParams) -> "CkksContext":
        return CkksContext(params)

    def active_primes(self, level: int) -> tuple[int, ...]:
        return self.primes[: 2 + level]

    # -- canonical embedding ------------------------------------------------

    def encode(self, values: np.ndarray, scale: float) -> np.ndarray:
        """Real slot values -> integer coefficient vector (int64)."""
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1 or len(values) > self.n // 2:
            raise ValueError("can encode at most ring_dim/2 values")
        if not np.all(np.isfinite(values)):
            raise ValueError("values must be finite")
        limit = 2.0 ** (61 - self.params.scale_bits)
        if np.any(np.abs(values) > limit):
            raise ValueError(f"values exceed the encodable range (+-{limit:g})")
        z = np.zeros(self.n // 2, dtype=np.complex128)
        z[: len(values)] = values
        v = np.concatenate([z, np.conj(z[::-1])])
        u = np.fft.fft(v) / self.n
        m = np.real(u * self._untwist) * scale
        return np.round(m).astype(np.int64)

    def decode(self, coeffs: np.ndarray, scale: float) -> np.ndarray:
        """Float coefficient vector -> real slot values."""
        evals = np.fft.ifft(coeffs * self._twist) * self.n
        return np.real(evals[: self.n // 2]) / scale

    def from_rns_ntt(self, data: np.ndarray) -> np.ndarray:
        """Inverse-transform, CRT-lift to centered integers, return float64."""
        active = self.active_primes(data.shape[0] - 2)
        q = math.prod(active)
        acc = np.zeros(self.n, dtype=object)
        for i, p in enumerate(active):
            coeffs = self.plans[i].inv(data[i])
            qi = q // p
            ci = qi * pow(qi, -1, p) % q
            acc = (acc + coeffs.astype(object) * ci) % q
        centered = np.where(acc > q // 2, acc - q, acc)
        return centered.astype(np.float64)


@dataclass(frozen=True)
class PublicKey:
    data: np.ndarray  # (2, 3, n) int64, NTT domain, fresh level
    params: SchemeParams


@dataclass(frozen=True)
class SecretKey:
    data: np.ndarray  # (3, n) int64, NTT domain
    params: SchemeParams


@dataclass(frozen=True)
class KeyPair:
    public: PublicKey
    secret: SecretKey

    @property
    def params(self) -> SchemeParams:
        return self.public.params


@dataclass
class Ciphertext:
    data: np.ndarray  # (2, 2 + level, n) int64, NTT domain
    scale: float
    level: int  # rescaling primes still attached: 1 fresh, 0 after rescale
    mult_count: int
    params: SchemeParams

    def copy(self) -> "Ciphertext":
        return Ciphertext(self.data.copy(), self.scale, self.level, self.mult_count, self.params)


def _sample_ternary(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(-1, 2, n, dtype=np.int64)


def _sample_error(rng: np.random.Generator, n: int) -> np.ndarray:
    return np.round(rng.normal(0.0, ERROR_STD, n)).astype(np.int64)


def keygen(params: SchemeParams, seed: int) -> KeyPair:
    """Deterministic key generation: secret ternary, public pair (-a*s+e, a)."""
    ctx = CkksContext.get(params)
    rng = substream(seed, "keygen")
    n = ctx.n
    s_int = _sample_ternary(rng, n)
    e_int = _sample_error(rng, n)
    s = np.empty((3, n), dtype=np.int64)
    pk = np.empty((2, 3, n), dtype=np.int64)
    for i, plan in enumerate(ctx.plans):
        p = plan.p
        s[i] = plan.fwd(s_int % p)
        a = rng.integers(0, p, n, dtype=np.int64)
        e = plan.fwd(e_int % p)
        pk[0, i] = (e - a * s[i]) % p
        pk[1, i] = a
    return KeyPair(PublicKey(pk, params), SecretKey(s, params))


def encrypt(
    values: np.ndarray, pk: PublicKey, rng: np.random.Generator | None = None
) -> Ciphertext:
    """Encrypt up to ring_dim/2 real values into one fresh ciphertext."""
    ctx = CkksContext.get(pk.params)
    if rng is None:
        rng = np.random.default_rng()
    n = ctx.n
    m = ctx.encode(values, ctx.scale)
    u_int = _sample_ternary(rng, n)
    e0_int = _sample_error(rng, n)
    e1_int = _sample_error(rng, n)
    data = np.empty((2, 3, n), dtype=np.int64)
    for i, plan in enumerate(ctx.plans):
        p = plan.p
        u = plan.fwd(u_int % p)
        data[0, i] = (pk.data[0, i] * u % p + plan.fwd(e0_int % p) + plan.fwd(m % p)) % p
        data[1, i] = (pk.data[1, i] * u % p + plan.fwd(e1_int % p)) % p
    return Ciphertext(data, ctx.scale, level=1, mult_count=0, params=pk.params)


def decrypt(ct: Ciphertext, sk: SecretKey) -> np.ndarray:
    """Recover the real slot values (length ring_dim/2)."""
    if ct.params != sk.params:
        raise DecryptionError("ciphertext and key use different scheme parameters")
    ctx = CkksContext.get(ct.params)
    active = 2 + ct.level
    d = np.empty((active, ctx.n), dtype=np.int64)
    for i in range(active):
        p = ctx.plans[i].p
        d[i] = (ct.data[0, i] + ct.data[1, i] * sk.data[i]) % p
    coeffs = ctx.from_rns_ntt(d)
    return ctx.decode(coeffs, ct.scale)


def _check_compatible(a: Ciphertext, b: Ciphertext) -> None:
    if a.params != b.params:
        raise ValueError("ciphertexts use different scheme parameters")
    if a.level != b.level or a.mult_count != b.mult_count:
        raise ValueError("ciphertexts sit at different levels")
    if not math.isclose(a.scale, b.scale, rel_tol=1e-12):
        raise ValueError("ciphertexts carry different scales")


def add(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    _check_compatible(a, b)
    ctx = CkksContext.get(a.params)
    primes = np.array(ctx.active_primes(a.level), dtype=np.int64)[None, :, None]
    data = (a.data + b.data) % primes
    return Ciphertext(data, a.scale, a.level, a.mult_count, a.params)


def multiply_scalar(ct: Ciphertext, c: float) -> Ciphertext:
    """Multiply the packed values by a plaintext scalar.

    The scalar is encoded at a scale equal to the rescaling prime, which is
    consumed by the following ``rescale``; this is the scheme's single
    multiplicative level.
    """
    if ct.level < 1 or ct.mult_count >= ct.params.depth:
        raise DepthExceededError("multiplicative depth exhausted")
    if not np.isfinite(c) or abs(c) > 8.0:
        raise ValueError("scalar must be finite with |c| <= 8")
    ctx = CkksContext.get(ct.params)
    s_int = round(c * ctx.special_prime)
    data = np.empty_like(ct.data)
    for i, p in enumerate(ctx.active_primes(ct.level)):
        data[:, i] = ct.data[:, i] * (s_int % p) % p
    return Ciphertext(
        data, ct.scale * ctx.special_prime, ct.level, ct.mult_count + 1, ct.params
    )


def rescale(ct: Ciphertext) -> Ciphertext:
    """Drop the rescaling prime, dividing values (and noise) by it."""
    if ct.level < 1:
        raise DepthExceededError("no rescaling prime left")
    ctx = CkksContext.get(ct.params)
    sp = ctx.special_prime
    sp_plan = ctx.plans[2]
    last = sp_plan.inv(ct.data[:, 2])  # (2, n) coefficients mod special prime
    centered = np.where(last > sp // 2, last - sp, last)
    data = np.empty((2, 2, ctx.n), dtype=np.int64)
    for i, plan in enumerate(ctx.plans[:2]):
        p = plan.p
        delta = plan.fwd(centered % p)
        inv_sp = pow(sp, -1, p)
        data[:, i] = (ct.data[:, i] - delta) * inv_sp % p
    return Ciphertext(data, ct.scale / sp, ct.level - 1, 0, ct.params)
