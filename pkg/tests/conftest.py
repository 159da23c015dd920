"""Shared fixtures: frozen test-vector loading from testdata/."""

from __future__ import annotations

import sys
from pathlib import Path

import pytest

TESTDATA = Path(__file__).resolve().parent.parent / "testdata"


def load_vectors(name: str) -> list[dict[str, bytes | str]]:
    """Parse a stanza-format vector file into a list of dicts.

    Each stanza starts with ``vector = <name>``; every other line is
    ``field = <hex>``. The returned dicts map field names to bytes and
    keep the stanza name under "name".
    """
    vectors: list[dict[str, bytes | str]] = []
    current: dict[str, bytes | str] | None = None
    for raw_line in (TESTDATA / name).read_text().splitlines():
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key == "vector":
            current = {"name": value}
            vectors.append(current)
        else:
            assert current is not None, f"{name}: field before first vector"
            current[key] = bytes.fromhex(value)
    return vectors


@pytest.fixture(scope="session")
def sha256_vectors() -> list[dict]:
    return load_vectors("sha256.txt")


@pytest.fixture(scope="session")
def hmac_vectors() -> list[dict]:
    return load_vectors("hmac_sha256.txt")


@pytest.fixture(scope="session")
def gcm_vectors() -> list[dict]:
    return load_vectors("gcm.txt")


@pytest.fixture(scope="session")
def prf_vectors() -> list[dict]:
    return load_vectors("tls_prf.txt")


@pytest.fixture(scope="session")
def kdf_vectors() -> list[dict]:
    return load_vectors("kdf.txt")


def pytest_terminal_summary(terminalreporter):
    """Surface the release-gate checklist even under output capture."""
    gate_module = sys.modules.get("test_acceptance")
    lines = getattr(gate_module, "GATE_LINES", None) if gate_module else None
    if lines:
        terminalreporter.section("release gate")
        for line in lines:
            terminalreporter.write_line(line)
