"""Symmetric primitives for the PSK cipher suite.

AES-128-GCM authenticated encryption, SHA-256, HMAC-SHA256 and the TLS 1.2
pseudo-random function (P_SHA256). Everything here is a pure function of its
inputs and safe for concurrent use. The AEAD and hashes are backed by vetted
providers; correctness is pinned by the vectors under testdata/.
"""

from __future__ import annotations

import hashlib
import hmac as _hmac
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

KEY_LEN = 16
SALT_LEN = 4
EXPLICIT_NONCE_LEN = 8
TAG_LEN = 16
DIGEST_LEN = 32


class AuthFailure(Exception):
    """AEAD open failed: ciphertext, tag or associated data was altered,
    or the key/nonce is wrong. No plaintext is released."""


@dataclass(frozen=True)
class Key128:
    """A 128-bit AEAD key. Compare key material only via constant_time_equal."""

    raw: bytes

    def __post_init__(self) -> None:
        if len(self.raw) != KEY_LEN:
            raise ValueError(f"Key128 requires exactly {KEY_LEN} bytes, got {len(self.raw)}")


@dataclass(frozen=True)
class Nonce96:
    """96-bit GCM nonce: 4-byte implicit salt from the key block plus an
    8-byte explicit part carrying the record epoch and sequence. The caller
    guarantees a (salt, explicit) pair is never reused under one key."""

    salt: bytes
    explicit: bytes

    def __post_init__(self) -> None:
        if len(self.salt) != SALT_LEN:
            raise ValueError(f"nonce salt must be {SALT_LEN} bytes")
        if len(self.explicit) != EXPLICIT_NONCE_LEN:
            raise ValueError(f"explicit nonce must be {EXPLICIT_NONCE_LEN} bytes")

    @property
    def full(self) -> bytes:
        return self.salt + self.explicit


@dataclass(frozen=True)
class AeadSealed:
    """GCM output: ciphertext of the same length as the plaintext, plus tag."""

    ciphertext: bytes
    tag: bytes

    def __post_init__(self) -> None:
        if len(self.tag) != TAG_LEN:
            raise ValueError(f"tag must be {TAG_LEN} bytes")


def sha256(message: bytes) -> bytes:
    return hashlib.sha256(message).digest()


def hmac_sha256(key: bytes, message: bytes) -> bytes:
    return _hmac.digest(key, message, hashlib.sha256)


def tls_prf_sha256(secret: bytes, label: bytes, seed: bytes, out_len: int) -> bytes:
    """P_SHA256 from RFC 5246: expand secret to out_len bytes.

    Output for a shorter length is always a prefix of the output for a
    longer one (same secret/label/seed).
    """
    if out_len < 1:
        raise ValueError("out_len must be >= 1")
    label_seed = label + seed
    out = bytearray()
    a = label_seed
    while len(out) < out_len:
        a = hmac_sha256(secret, a)
        out += hmac_sha256(secret, a + label_seed)
    return bytes(out[:out_len])


def aead_seal(key: Key128, nonce: Nonce96, aad: bytes, plaintext: bytes) -> AeadSealed:
    sealed = AESGCM(key.raw).encrypt(nonce.full, plaintext, aad)
    return AeadSealed(ciphertext=sealed[:-TAG_LEN], tag=sealed[-TAG_LEN:])


def aead_open(key: Key128, nonce: Nonce96, aad: bytes, sealed: AeadSealed) -> bytes:
    try:
        return AESGCM(key.raw).decrypt(nonce.full, sealed.ciphertext + sealed.tag, aad)
    except InvalidTag:
        raise AuthFailure("GCM tag verification failed") from None


def constant_time_equal(a: bytes, b: bytes) -> bool:
    """Timing-safe comparison for tags, verify-data and other secrets."""
    return _hmac.compare_digest(a, b)
