"""Byte-exact wire formats: record layer framing, handshake message bodies,
alerts, plaintext control frames, and the sealed application messages.

Every encoder has a matching parser; parsers raise WireError on anything
malformed so upper layers can drop bad datagrams without guessing.
"""

from __future__ import annotations

from dataclasses import dataclass

PROTOCOL_VERSION = 0xFEFD  # 1.2 over datagrams, two's-complement encoding
CIPHER_SUITE_PSK_AES128_GCM_SHA256 = 0x00A8

RECORD_HEADER_LEN = 13
HANDSHAKE_HEADER_LEN = 12
MAX_SEQUENCE = (1 << 48) - 1

# Record content types.
CT_CCS = 20
CT_ALERT = 21
CT_HANDSHAKE = 22
CT_APPDATA = 23
CONTENT_TYPES = (CT_CCS, CT_ALERT, CT_HANDSHAKE, CT_APPDATA)

# Handshake message types.
HT_CLIENT_HELLO = 1
HT_SERVER_HELLO = 2
HT_SERVER_HELLO_DONE = 14
HT_CLIENT_KEY_EXCHANGE = 16
HT_FINISHED = 20

# Alert vocabulary (level is always fatal here).
ALERT_LEVEL_FATAL = 2
ALERT_BAD_RECORD_MAC = 20
ALERT_HANDSHAKE_FAILURE = 40
ALERT_UNKNOWN_IDENTITY = 115

# Plaintext control frames on the relay path, outside the record layer.
# First byte < 20 so they never collide with record content types.
CTRL_CONNECT = 0x01
CTRL_START_AUTH = 0x02

# Application messages carried inside sealed appdata records.
APP_CHALLENGE = 0x01
APP_AUTHORIZE = 0x02
APP_AUTH_RESULT = 0x03
APP_RESULT_ACK = 0x04

RESULT_ACCEPT = 0x01
RESULT_REJECT = 0x00

VERIFY_DATA_LEN = 12


class WireError(Exception):
    """Datagram or record failed to parse."""


@dataclass(frozen=True)
class Record:
    """One record: plaintext payload at epoch 0, ciphertext+tag at epoch 1."""

    content_type: int
    epoch: int
    sequence: int
    payload: bytes

    def __post_init__(self) -> None:
        if self.content_type not in CONTENT_TYPES:
            raise WireError(f"bad content type {self.content_type}")
        if not 0 <= self.epoch <= 0xFFFF:
            raise WireError("epoch out of range")
        if not 0 <= self.sequence <= MAX_SEQUENCE:
            raise WireError("sequence out of range")
        if len(self.payload) > 0xFFFF:
            raise WireError("payload too long")

    def encode(self) -> bytes:
        return (
            bytes([self.content_type])
            + PROTOCOL_VERSION.to_bytes(2, "big")
            + self.epoch.to_bytes(2, "big")
            + self.sequence.to_bytes(6, "big")
            + len(self.payload).to_bytes(2, "big")
            + self.payload
        )

    @property
    def wire_len(self) -> int:
        return RECORD_HEADER_LEN + len(self.payload)

    def explicit_nonce(self) -> bytes:
        """Epoch and sequence as the 8-byte explicit AEAD nonce part."""
        return self.epoch.to_bytes(2, "big") + self.sequence.to_bytes(6, "big")


def decode_record(data: bytes, offset: int = 0) -> tuple[Record, int]:
    """Parse one record at offset; returns (record, next_offset)."""
    if len(data) - offset < RECORD_HEADER_LEN:
        raise WireError("short record header")
    content_type = data[offset]
    version = int.from_bytes(data[offset + 1 : offset + 3], "big")
    if version != PROTOCOL_VERSION:
        raise WireError(f"bad protocol version {version:#06x}")
    epoch = int.from_bytes(data[offset + 3 : offset + 5], "big")
    sequence = int.from_bytes(data[offset + 5 : offset + 11], "big")
    length = int.from_bytes(data[offset + 11 : offset + 13], "big")
    end = offset + RECORD_HEADER_LEN + length
    if end > len(data):
        raise WireError("record payload truncated")
    if content_type not in CONTENT_TYPES:
        raise WireError(f"bad content type {content_type}")
    return Record(content_type, epoch, sequence, data[offset + 13 : end]), end


def decode_datagram(data: bytes) -> list[Record]:
    """Split a datagram into its records; rejects trailing garbage."""
    records = []
    offset = 0
    while offset < len(data):
        record, offset = decode_record(data, offset)
        records.append(record)
    if not records:
        raise WireError("empty datagram")
    return records


def encode_datagram(records: list[Record]) -> bytes:
    return b"".join(r.encode() for r in records)


@dataclass(frozen=True)
class HandshakeMessage:
    """Handshake framing. Fragmentation is unused: offset 0, frag = body."""

    msg_type: int
    message_seq: int
    body: bytes

    def encode(self) -> bytes:
        n = len(self.body)
        return (
            bytes([self.msg_type])
            + n.to_bytes(3, "big")
            + self.message_seq.to_bytes(2, "big")
            + (0).to_bytes(3, "big")
            + n.to_bytes(3, "big")
            + self.body
        )


def decode_handshake(payload: bytes) -> HandshakeMessage:
    if len(payload) < HANDSHAKE_HEADER_LEN:
        raise WireError("short handshake header")
    msg_type = payload[0]
    length = int.from_bytes(payload[1:4], "big")
    message_seq = int.from_bytes(payload[4:6], "big")
    frag_offset = int.from_bytes(payload[6:9], "big")
    frag_len = int.from_bytes(payload[9:12], "big")
    body = payload[HANDSHAKE_HEADER_LEN:]
    if frag_offset != 0 or frag_len != length:
        raise WireError("fragmented handshake message not supported")
    if len(body) != length:
        raise WireError("handshake length mismatch")
    return HandshakeMessage(msg_type, message_seq, body)


def encode_client_hello(client_random: bytes) -> bytes:
    """Empty session id and cookie, exactly one suite, null compression."""
    if len(client_random) != 32:
        raise WireError("client_random must be 32 bytes")
    return (
        PROTOCOL_VERSION.to_bytes(2, "big")
        + client_random
        + b"\x00"  # session_id length
        + b"\x00"  # cookie length
        + (2).to_bytes(2, "big")
        + CIPHER_SUITE_PSK_AES128_GCM_SHA256.to_bytes(2, "big")
        + b"\x01\x00"  # one compression method: null
    )


def decode_client_hello(body: bytes) -> tuple[bytes, list[int]]:
    """Returns (client_random, offered suite ids)."""
    if len(body) < 35:
        raise WireError("short ClientHello")
    version = int.from_bytes(body[0:2], "big")
    if version != PROTOCOL_VERSION:
        raise WireError("ClientHello version mismatch")
    client_random = body[2:34]
    pos = 34
    sid_len = body[pos]
    pos += 1 + sid_len
    if pos >= len(body):
        raise WireError("truncated ClientHello")
    cookie_len = body[pos]
    pos += 1 + cookie_len
    if pos + 2 > len(body):
        raise WireError("truncated ClientHello")
    suites_len = int.from_bytes(body[pos : pos + 2], "big")
    pos += 2
    if suites_len % 2 or pos + suites_len > len(body):
        raise WireError("bad suite list")
    suites = [
        int.from_bytes(body[i : i + 2], "big") for i in range(pos, pos + suites_len, 2)
    ]
    pos += suites_len
    if pos >= len(body):
        raise WireError("truncated ClientHello")
    comp_len = body[pos]
    pos += 1 + comp_len
    if pos > len(body):
        raise WireError("truncated ClientHello")
    return client_random, suites


def encode_server_hello(server_random: bytes) -> bytes:
    if len(server_random) != 32:
        raise WireError("server_random must be 32 bytes")
    return (
        PROTOCOL_VERSION.to_bytes(2, "big")
        + server_random
        + b"\x00"  # session_id length
        + CIPHER_SUITE_PSK_AES128_GCM_SHA256.to_bytes(2, "big")
        + b"\x00"  # null compression
    )


def decode_server_hello(body: bytes) -> tuple[bytes, int]:
    """Returns (server_random, chosen suite id)."""
    if len(body) != 38:
        raise WireError("bad ServerHello length")
    version = int.from_bytes(body[0:2], "big")
    if version != PROTOCOL_VERSION:
        raise WireError("ServerHello version mismatch")
    if body[34] != 0:
        raise WireError("unexpected session id")
    return body[2:34], int.from_bytes(body[35:37], "big")


def encode_client_key_exchange(psk_identity: bytes) -> bytes:
    if not 1 <= len(psk_identity) <= 32:
        raise WireError("psk identity must be 1-32 bytes")
    return len(psk_identity).to_bytes(2, "big") + psk_identity


def decode_client_key_exchange(body: bytes) -> bytes:
    if len(body) < 2:
        raise WireError("short ClientKeyExchange")
    n = int.from_bytes(body[0:2], "big")
    if len(body) != 2 + n or not 1 <= n <= 32:
        raise WireError("bad identity length")
    return body[2:]


def encode_alert(description: int) -> bytes:
    return bytes([ALERT_LEVEL_FATAL, description])


def decode_alert(payload: bytes) -> tuple[int, int]:
    if len(payload) != 2:
        raise WireError("bad alert length")
    return payload[0], payload[1]


def encode_connect(identity: bytes) -> bytes:
    if not 1 <= len(identity) <= 32:
        raise WireError("identity must be 1-32 bytes")
    return bytes([CTRL_CONNECT, len(identity)]) + identity


def encode_start_auth() -> bytes:
    return bytes([CTRL_START_AUTH])


def is_control_datagram(data: bytes) -> bool:
    return bool(data) and data[0] in (CTRL_CONNECT, CTRL_START_AUTH)


def decode_control(data: bytes) -> tuple[int, bytes]:
    """Returns (frame type, identity-or-empty)."""
    if not data:
        raise WireError("empty control frame")
    if data[0] == CTRL_CONNECT:
        if len(data) < 2 or len(data) != 2 + data[1] or data[1] < 1:
            raise WireError("bad connect frame")
        return CTRL_CONNECT, data[2:]
    if data[0] == CTRL_START_AUTH:
        if len(data) != 1:
            raise WireError("bad start frame")
        return CTRL_START_AUTH, b""
    raise WireError(f"unknown control frame {data[0]}")


def encode_challenge(nonce: bytes, window_ticks: int, dose_milli: int, pattern_text: str) -> bytes:
    if len(nonce) != 8:
        raise WireError("nonce must be 8 bytes")
    if not 0 <= window_ticks <= 0xFFFF:
        raise WireError("window out of range")
    return (
        bytes([APP_CHALLENGE])
        + nonce
        + window_ticks.to_bytes(2, "big")
        + dose_milli.to_bytes(4, "big")
        + pattern_text.encode("ascii")
    )


def encode_authorize(nonce: bytes, dose_milli: int) -> bytes:
    if len(nonce) != 8:
        raise WireError("nonce must be 8 bytes")
    if not 0 <= dose_milli <= 0xFFFFFFFF:
        raise WireError("dose out of range")
    return bytes([APP_AUTHORIZE]) + nonce + dose_milli.to_bytes(4, "big")


def encode_auth_result(accepted: bool, nonce: bytes) -> bytes:
    if len(nonce) != 8:
        raise WireError("nonce must be 8 bytes")
    return bytes([APP_AUTH_RESULT, RESULT_ACCEPT if accepted else RESULT_REJECT]) + nonce


def encode_result_ack(nonce: bytes) -> bytes:
    if len(nonce) != 8:
        raise WireError("nonce must be 8 bytes")
    return bytes([APP_RESULT_ACK]) + nonce


@dataclass(frozen=True)
class AppMessage:
    kind: int
    nonce: bytes = b""
    window_ticks: int = 0
    dose_milli: int = 0
    pattern_text: str = ""
    accepted: bool = False


def decode_app_message(payload: bytes) -> AppMessage:
    if not payload:
        raise WireError("empty app message")
    kind = payload[0]
    body = payload[1:]
    if kind == APP_CHALLENGE:
        if len(body) < 14:
            raise WireError("short challenge")
        try:
            text = body[14:].decode("ascii")
        except UnicodeDecodeError as exc:
            raise WireError("challenge pattern not ascii") from exc
        return AppMessage(
            kind=kind,
            nonce=body[0:8],
            window_ticks=int.from_bytes(body[8:10], "big"),
            dose_milli=int.from_bytes(body[10:14], "big"),
            pattern_text=text,
        )
    if kind == APP_AUTHORIZE:
        if len(body) != 12:
            raise WireError("bad authorize length")
        return AppMessage(kind=kind, nonce=body[0:8], dose_milli=int.from_bytes(body[8:], "big"))
    if kind == APP_AUTH_RESULT:
        if len(body) != 9 or body[0] not in (RESULT_ACCEPT, RESULT_REJECT):
            raise WireError("bad auth result")
        return AppMessage(kind=kind, accepted=body[0] == RESULT_ACCEPT, nonce=body[1:])
    if kind == APP_RESULT_ACK:
        if len(body) != 8:
            raise WireError("bad result ack")
        return AppMessage(kind=kind, nonce=body)
    raise WireError(f"unknown app message {kind}")
