#!/usr/bin/env python3
"""Regenerate the frozen test vectors under testdata/.

Published known-answer vectors (FIPS 180-4, RFC 4231, NIST GCM, the IETF
PRF-SHA256 interop vector) are asserted against their literal values before
anything is written, so a broken generator cannot silently freeze garbage.
Derived vectors (master secret, key block, finished) are produced by a
recursive-form P_SHA256 oracle kept deliberately different in shape from the
iterative implementation in imdauth.crypto.

Run from the repo root: python tools/make_vectors.py
"""

import hashlib
import hmac
from pathlib import Path

from cryptography.hazmat.primitives.ciphers.aead import AESGCM

OUT_DIR = Path(__file__).resolve().parent.parent / "testdata"


def p_sha256_oracle(secret: bytes, label_and_seed: bytes, n: int) -> bytes:
    # Recursive-A formulation of RFC 5246 section 5; the package implements
    # the same function as an iterative loop, so this is an independent path.
    a = [label_and_seed]
    while 32 * (len(a) - 1) < n:
        a.append(hmac.digest(secret, a[-1], hashlib.sha256))
    out = b"".join(
        hmac.digest(secret, ai + label_and_seed, hashlib.sha256) for ai in a[1:]
    )
    return out[:n]


def prf_oracle(secret: bytes, label: bytes, seed: bytes, n: int) -> bytes:
    return p_sha256_oracle(secret, label + seed, n)


def psk_premaster_oracle(psk: bytes) -> bytes:
    # RFC 4279 plain-PSK premaster: other_secret is len(psk) zero octets.
    n = len(psk)
    return n.to_bytes(2, "big") + b"\x00" * n + n.to_bytes(2, "big") + psk


def write_vectors(name: str, header: str, vectors: list[dict[str, bytes | str]]) -> None:
    lines = [f"# {header}", "# format: see testdata/README.md", ""]
    for vec in vectors:
        for key, value in vec.items():
            if key == "vector":
                lines.append(f"vector = {value}")
            else:
                assert isinstance(value, bytes)
                lines.append(f"{key} = {value.hex()}")
        lines.append("")
    (OUT_DIR / name).write_text("\n".join(lines))
    print(f"wrote testdata/{name} ({len(vectors)} vectors)")


def make_sha256() -> None:
    # FIPS 180-4 known-answer vectors.
    known = [
        (b"", "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"),
        (b"abc", "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"),
        (
            b"abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq",
            "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1",
        ),
    ]
    vectors = []
    for i, (msg, digest_hex) in enumerate(known):
        assert hashlib.sha256(msg).hexdigest() == digest_hex, f"sha256 KAT {i}"
        vectors.append({"vector": f"fips-{i}", "in": msg, "out": bytes.fromhex(digest_hex)})
    write_vectors("sha256.txt", "SHA-256 known-answer vectors (FIPS 180-4)", vectors)


def make_hmac() -> None:
    # RFC 4231 test cases 1, 2, 3 plus the degenerate empty/empty case.
    cases = [
        ("rfc4231-1", b"\x0b" * 20, b"Hi There",
         "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7"),
        ("rfc4231-2", b"Jefe", b"what do ya want for nothing?",
         "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"),
        ("rfc4231-3", b"\xaa" * 20, b"\xdd" * 50,
         "773ea91e36800e46854db8ebd09181a72959098b3ef8c122d9635514ced565fe"),
        ("empty", b"", b"", None),
    ]
    vectors = []
    for name, key, msg, expected in cases:
        got = hmac.digest(key, msg, hashlib.sha256)
        if expected is not None:
            assert got.hex() == expected, f"hmac KAT {name}"
        vectors.append({"vector": name, "key": key, "in": msg, "out": got})
    write_vectors("hmac_sha256.txt", "HMAC-SHA256 vectors (RFC 4231 + degenerate)", vectors)


def make_gcm() -> None:
    # The two canonical NIST AES-128-GCM vectors, then AAD-bearing pins
    # frozen from the vetted provider.
    k0, n0 = b"\x00" * 16, b"\x00" * 12
    ct0 = AESGCM(k0).encrypt(n0, b"", b"")
    assert ct0.hex() == "58e2fccefa7e3061367f1d57a4e7455a", "gcm KAT empty-pt"
    ct1 = AESGCM(k0).encrypt(n0, b"\x00" * 16, b"")
    assert ct1.hex() == (
        "0388dace60b6a392f328c2b971b2fe78" "ab6e47d42cec13bdf53a67b21257bddf"
    ), "gcm KAT zero-pt"

    vectors = [
        {"vector": "nist-empty", "key": k0, "nonce": n0, "aad": b"", "pt": b"",
         "ct": b"", "tag": ct0},
        {"vector": "nist-zero16", "key": k0, "nonce": n0, "aad": b"", "pt": b"\x00" * 16,
         "ct": ct1[:16], "tag": ct1[16:]},
    ]
    pins = [
        ("pin-aad", bytes(range(16)), bytes(range(12)), b"associated", b"implant otp pattern"),
        ("pin-long", b"\x42" * 16, b"\x24" * 12, b"\x07" * 13, bytes(range(64))),
    ]
    for name, key, nonce, aad, pt in pins:
        sealed = AESGCM(key).encrypt(nonce, pt, aad)
        vectors.append({"vector": name, "key": key, "nonce": nonce, "aad": aad,
                        "pt": pt, "ct": sealed[:-16], "tag": sealed[-16:]})
    write_vectors("gcm.txt", "AES-128-GCM vectors (NIST known answers + frozen pins)", vectors)


def make_prf() -> None:
    # The widely circulated IETF interop vector for the TLS 1.2 PRF with
    # SHA-256, asserted literally, plus frozen regression vectors.
    secret = bytes.fromhex("9bbe436ba940f017b17652849a71db35")
    seed = bytes.fromhex("a0ba9f936cda311827a6f796ffd5198c")
    out = prf_oracle(secret, b"test label", seed, 100)
    assert out.hex() == (
        "e3f229ba727be17b8d122620557cd453c2aab21d07c3d495329b52d4e61edb5a"
        "6b301791e90d35c9c9a46b4e14baf9af0fa022f7077def17abfd3797c0564bab"
        "4fbc91666e9def9b97fce34f796789baa48082d122ee42c5a72e5a5110fff701"
        "87347b66"
    ), "prf interop vector"

    vectors = [
        {"vector": "ietf-interop", "secret": secret, "label": b"test label",
         "seed": seed, "out": out},
        {"vector": "short-1", "secret": b"\x01\x02\x03", "label": b"key expansion",
         "seed": b"\xf0" * 8, "out": prf_oracle(b"\x01\x02\x03", b"key expansion", b"\xf0" * 8, 1)},
        {"vector": "len-40", "secret": b"\xaa" * 48, "label": b"key expansion",
         "seed": b"\x55" * 64, "out": prf_oracle(b"\xaa" * 48, b"key expansion", b"\x55" * 64, 40)},
    ]
    write_vectors("tls_prf.txt", "TLS 1.2 PRF (P_SHA256) vectors", vectors)


def make_kdf() -> None:
    # Session key schedule pinned end to end from the oracle PRF.
    psk = b"\xaa" * 16
    client_random = b"\x01" * 32
    server_random = b"\x02" * 32
    premaster = psk_premaster_oracle(psk)
    master = prf_oracle(premaster, b"master secret", client_random + server_random, 48)
    key_block = prf_oracle(master, b"key expansion", server_random + client_random, 40)
    transcript_digest = hashlib.sha256(b"stand-in transcript").digest()
    client_verify = prf_oracle(master, b"client finished", transcript_digest, 12)
    server_verify = prf_oracle(master, b"server finished", transcript_digest, 12)

    vectors = [{
        "vector": "psk-aa16",
        "psk": psk,
        "client_random": client_random,
        "server_random": server_random,
        "premaster": premaster,
        "master": master,
        "key_block": key_block,
        "client_write_key": key_block[0:16],
        "server_write_key": key_block[16:32],
        "client_salt": key_block[32:36],
        "server_salt": key_block[36:40],
        "transcript_digest": transcript_digest,
        "client_verify": client_verify,
        "server_verify": server_verify,
    }]
    write_vectors("kdf.txt", "PSK session key schedule vectors (oracle-derived)", vectors)


def main() -> None:
    OUT_DIR.mkdir(exist_ok=True)
    make_sha256()
    make_hmac()
    make_gcm()
    make_prf()
    make_kdf()


if __name__ == "__main__":
    main()
