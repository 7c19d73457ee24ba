"""Encrypted model exchange and weighted aggregation.

A model is chunked along its flat parameter order into ciphertexts of
``batch_size`` slots each (the final chunk zero-padded), giving
ceil(M / batch_size) chunks per bundle. The controller only ever sees
bundles and the public key: it weights each learner's bundle by a plaintext
scalar (one multiplication, the scheme's whole depth), adds, and rescales.
Learners decrypt with the secret key, train, and re-encrypt.

Bundles serialize to a length-prefixed binary layout (params header,
chunk count, per-chunk coefficient arrays) whose size depends only on the
scheme parameters and chunk count, never on the encrypted values.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .federation import CommLedger
from .he.ckks import (
    Ciphertext,
    CkksContext,
    DecryptionError,
    KeyPair,
    PublicKey,
    SchemeParams,
    SecretKey,
    add,
    decrypt,
    encrypt,
    multiply_scalar,
    rescale,
)
from .params import ModelSpec, ParameterVector, SgdConfig
from .rng import substream

_MAGIC = b"FHB1"
_VERSION = 1

ENCRYPTED_BITS_PER_PARAMETER = 64  # ciphertext values travel as 64-bit words
PLAINTEXT_BITS_PER_PARAMETER = 32


@dataclass
class CiphertextBundle:
    chunks: list[Ciphertext]
    plaintext_length: int
    layout: tuple
    params: SchemeParams

    @property
    def chunk_count(self) -> int:
        return len(self.chunks)

    @property
    def level(self) -> int:
        return self.chunks[0].level

    @property
    def size_bits(self) -> int:
        return bundle_byte_size(self.params, self.level, self.plaintext_length, self.layout) * 8

    def __post_init__(self):
        expected = -(-self.plaintext_length // self.params.slots)
        if len(self.chunks) != expected:
            raise ValueError(
                f"bundle must hold ceil(M/slots) = {expected} chunks, got {len(self.chunks)}"
            )


def chunk_count(num_params: int, params: SchemeParams) -> int:
    if num_params < 1:
        raise ValueError("model must have at least one parameter")
    return -(-num_params // params.slots)


def encrypt_model(
    model: ParameterVector,
    pk: PublicKey,
    rng: np.random.Generator | None = None,
) -> CiphertextBundle:
    """Encrypt a model into ceil(M / batch_size) ciphertext chunks."""
    if not np.all(np.isfinite(model.values)):
        raise ValueError("model values must be finite")
    params = pk.params
    slots = params.slots
    chunks = []
    for start in range(0, len(model), slots):
        chunks.append(encrypt(model.values[start : start + slots], pk, rng))
    return CiphertextBundle(chunks, len(model), model.layout, params)


def decrypt_model(bundle: CiphertextBundle, sk: SecretKey) -> ParameterVector:
    """Recover the first plaintext_length values; padding is discarded."""
    if bundle.params != sk.params:
        raise DecryptionError("bundle and key use different scheme parameters")
    slots = bundle.params.slots
    parts = [decrypt(ct, sk)[:slots] for ct in bundle.chunks]
    values = np.concatenate(parts)[: bundle.plaintext_length]
    return ParameterVector(values, bundle.layout)


def encrypted_weighted_aggregate(
    bundles: list[CiphertextBundle],
    weights: list[float],
    pk: PublicKey,
) -> CiphertextBundle:
    """Per chunk: sum_k weight_k * chunk_k with one plaintext multiplication
    per operand, then a single rescale of the sum. Weights must already be
    normalized; the controller never needs the secret key."""
    if len(bundles) != len(weights):
        raise ValueError("one weight per bundle required")
    if not bundles:
        raise ValueError("nothing to aggregate")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("weights must sum to 1")
    first = bundles[0]
    for b in bundles:
        if b.params != pk.params:
            raise ValueError("bundle parameters do not match the public key")
        if b.chunk_count != first.chunk_count or b.plaintext_length != first.plaintext_length:
            raise ValueError("bundles describe different models")
        if b.layout != first.layout:
            raise ValueError("bundle layouts differ")
        if b.level != first.level:
            raise ValueError("bundles sit at different levels")
    out_chunks = []
    for j in range(first.chunk_count):
        acc = multiply_scalar(bundles[0].chunks[j], float(w[0]))
        for k in range(1, len(bundles)):
            acc = add(acc, multiply_scalar(bundles[k].chunks[j], float(w[k])))
        out_chunks.append(rescale(acc))
    return CiphertextBundle(out_chunks, first.plaintext_length, first.layout, first.params)


# ---------------------------------------------------------------------------
# size accounting


@dataclass(frozen=True)
class ModelSizeReport:
    chunk_count: int
    per_chunk_bytes: int
    encrypted_bits: int  # serialized bundle size
    plaintext_bits: int  # 32-bit plaintext transfer
    encrypted_comm_bits: int  # ledger convention: 64 bits per parameter


def _chunk_byte_size(params: SchemeParams, level: int) -> int:
    # chunk header: u32 length, u8 level, u8 mult_count, f64 scale
    n_primes = 2 + level
    return 4 + 1 + 1 + 8 + 2 * n_primes * params.ring_dim * 8


def _header_byte_size(params: SchemeParams, layout: tuple) -> int:
    layout_json = json.dumps(layout).encode()
    return 4 + 1 + 4 + 4 + 2 + 1 + 2 + 1 + 3 * 8 + 8 + 4 + 4 + len(layout_json)


def bundle_byte_size(params: SchemeParams, level: int, num_params: int, layout: tuple) -> int:
    return _header_byte_size(params, layout) + chunk_count(num_params, params) * _chunk_byte_size(params, level)


def ciphertext_size_model(num_params: int, params: SchemeParams) -> ModelSizeReport:
    """Serialized size of a freshly encrypted model under the given parameters,
    next to the plaintext 32-bit size and the 64-bit transfer convention."""
    if num_params < 1:
        raise ValueError("model must have at least one parameter")
    layout = (("weights", (num_params,)),)
    count = chunk_count(num_params, params)
    per_chunk = _chunk_byte_size(params, level=1)
    return ModelSizeReport(
        chunk_count=count,
        per_chunk_bytes=per_chunk,
        encrypted_bits=bundle_byte_size(params, 1, num_params, layout) * 8,
        plaintext_bits=PLAINTEXT_BITS_PER_PARAMETER * num_params,
        encrypted_comm_bits=ENCRYPTED_BITS_PER_PARAMETER * num_params,
    )


# ---------------------------------------------------------------------------
# serialization


def serialize_bundle(bundle: CiphertextBundle) -> bytes:
    p = bundle.params
    ctx = CkksContext.get(p)
    layout_json = json.dumps(bundle.layout).encode()
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<B", _VERSION)
    out += struct.pack("<IIHBHB", p.ring_dim, p.slots, p.scale_bits, p.depth,
                       p.security_bits, len(ctx.primes))
    out += struct.pack("<3Q", *ctx.primes)
    out += struct.pack("<QII", bundle.plaintext_length, bundle.chunk_count, len(layout_json))
    out += layout_json
    for ct in bundle.chunks:
        body = struct.pack("<BBd", ct.level, ct.mult_count, ct.scale)
        body += ct.data.astype("<i8").tobytes()
        out += struct.pack("<I", len(body)) + body
    return bytes(out)


def deserialize_bundle(blob: bytes) -> CiphertextBundle:
    view = memoryview(blob)
    if bytes(view[:4]) != _MAGIC:
        raise ValueError("not a ciphertext bundle")
    version = view[4]
    if version != _VERSION:
        raise ValueError(f"unsupported bundle version {version}")
    at = 5
    ring_dim, slots, scale_bits, depth, security_bits, n_primes = struct.unpack_from(
        "<IIHBHB", view, at
    )
    at += struct.calcsize("<IIHBHB")
    primes = struct.unpack_from(f"<{n_primes}Q", view, at)
    at += n_primes * 8
    plaintext_length, count, layout_len = struct.unpack_from("<QII", view, at)
    at += struct.calcsize("<QII")
    layout = _layout_from_json(bytes(view[at : at + layout_len]))
    at += layout_len
    params = SchemeParams(
        ring_dim=ring_dim,
        scale_bits=scale_bits,
        depth=depth,
        security_bits=security_bits,
        batch_size=slots if slots != ring_dim // 2 else None,
    )
    ctx = CkksContext.get(params)
    if tuple(primes) != ctx.primes:
        raise ValueError("bundle primes do not match the derived modulus chain")
    chunks = []
    for _ in range(count):
        (body_len,) = struct.unpack_from("<I", view, at)
        at += 4
        level, mult_count, scale = struct.unpack_from("<BBd", view, at)
        data = np.frombuffer(
            view[at + 10 : at + body_len], dtype="<i8"
        ).reshape(2, 2 + level, ring_dim).astype(np.int64)
        chunks.append(Ciphertext(data, scale, level, mult_count, params))
        at += body_len
    return CiphertextBundle(chunks, plaintext_length, layout, params)


def _layout_from_json(blob: bytes) -> tuple:
    return tuple((name, tuple(shape)) for name, shape in json.loads(blob))


# ---------------------------------------------------------------------------
# encrypted federation round


@dataclass
class EncryptedFederationState:
    """Controller-side state for encrypted runs: the global model exists only
    as a ciphertext bundle and no secret key is ever stored."""

    global_cipher: CiphertextBundle
    round: int = 0
    clock: float = 0.0
    ledger: CommLedger = field(
        default_factory=lambda: CommLedger(bits_per_parameter=ENCRYPTED_BITS_PER_PARAMETER)
    )


def make_encrypted_state(
    initial_model: ParameterVector, keys: KeyPair, rng: np.random.Generator | None = None
) -> EncryptedFederationState:
    """Driver step: encrypt the initial model for the controller."""
    return EncryptedFederationState(encrypt_model(initial_model, keys.public, rng))


def run_encrypted_sync_round(
    state: EncryptedFederationState,
    learners: list,
    keys: KeyPair,
    spec: ModelSpec,
    config: SgdConfig,
    *,
    seed: int,
    privacy=None,
) -> EncryptedFederationState:
    """Synchronous round over ciphertexts: learners decrypt the global bundle,
    train, and re-encrypt; the controller aggregates without the secret key.
    Communication is charged at 64 bits per parameter."""
    from .federation import sync_round_duration
    from .params import local_train

    if not learners:
        raise ValueError("no learners registered")
    bundles = []
    for learner in learners:
        local = decrypt_model(state.global_cipher, keys.secret)
        trained, _ = local_train(
            local, spec, learner.dataset, config, privacy,
            shuffle_rng=substream(seed, "shuffling", learner.id, state.round),
            noise_rng=substream(seed, "noise", learner.id, state.round),
        )
        bundles.append(
            encrypt_model(trained, keys.public, substream(seed, "he", learner.id, state.round))
        )
    weights = np.array([l.weight for l in learners], dtype=np.float64)
    weights = weights / weights.sum()
    new_cipher = encrypted_weighted_aggregate(bundles, list(weights), keys.public)
    ledger = state.ledger.copy()
    ledger.charge_round(state.global_cipher.plaintext_length, [l.id for l in learners])
    return EncryptedFederationState(
        global_cipher=new_cipher,
        round=state.round + 1,
        clock=state.clock + sync_round_duration(learners, config),
        ledger=ledger,
    )
