"""PSK handshake engine and record layer.

Both roles are explicit, enumerated state machines over the four-flight
exchange (ClientHello / ServerHello+Done / ClientKeyExchange+CCS+Finished /
CCS+Finished), sized against a fixed 2816-byte working buffer. Key material
comes from the TLS 1.2 PRF over the PSK-derived premaster; the established
channel seals application records with AES-128-GCM.

Machines are single-owner: feed records one at a time, collect emitted
records and events from each step. Loss recovery is timer-driven on the
client (the initiator) plus duplicate-triggered re-emission on the server.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from random import Random
from typing import Callable, Literal, Optional

from imdauth import wire
from imdauth.crypto import (
    AuthFailure,
    Key128,
    Nonce96,
    AeadSealed,
    TAG_LEN,
    aead_open,
    aead_seal,
    constant_time_equal,
    tls_prf_sha256,
)
from imdauth.wire import Record

Role = Literal["client", "server"]

BUFFER_BUDGET = 2816
# Fixed per-session bookkeeping held in the working buffer: identity, PSK,
# both randoms, master secret, key block, digest state and counters.
STATE_BLOCK_BYTES = 256

MASTER_SECRET_LEN = 48
KEY_BLOCK_LEN = 40

RETRANSMIT_INTERVAL_S = 1.0
MAX_RETRANSMITS = 3


class HandshakeError(Exception):
    """Base for handshake failures; the machine is Failed once raised."""


class UnknownPskIdentity(HandshakeError):
    pass


class BadFinished(HandshakeError):
    pass


class UnexpectedMessage(HandshakeError):
    pass


class BudgetExceeded(HandshakeError):
    pass


class ReplayDetected(Exception):
    """Record sequence at or below the highest already accepted."""


class ClientPhase(Enum):
    START = "start"
    AWAIT_SERVER_HELLO = "await_server_hello"
    AWAIT_SERVER_HELLO_DONE = "await_server_hello_done"
    AWAIT_CCS_FINISHED = "await_ccs_finished"
    ESTABLISHED = "established"
    FAILED = "failed"


class ServerPhase(Enum):
    AWAIT_CLIENT_HELLO = "await_client_hello"
    AWAIT_CLIENT_KEY_EXCHANGE = "await_client_key_exchange"
    AWAIT_CCS = "await_ccs"
    AWAIT_FINISHED = "await_finished"
    ESTABLISHED = "established"
    FAILED = "failed"


class StepEvent(Enum):
    NONE = "none"
    ESTABLISHED = "established"
    FAILED = "failed"


@dataclass
class StepResult:
    records: list[Record] = field(default_factory=list)
    event: StepEvent = StepEvent.NONE
    error: Optional[HandshakeError] = None


@dataclass
class CryptoMeter:
    """Counts bytes and block invocations pushed through the hash and cipher
    cores, for energy attribution and cycle-accurate-ish latency modeling."""

    aes_bytes: int = 0
    sha_bytes: int = 0
    aes_blocks: int = 0
    sha_blocks: int = 0

    def count_aes(self, nbytes: int) -> None:
        self.aes_bytes += nbytes
        # GCM runs the block cipher once per 16-byte block plus once for the tag.
        self.aes_blocks += (nbytes + 15) // 16 + 1

    def count_sha_message(self, nbytes: int) -> None:
        self.sha_bytes += nbytes
        self.sha_blocks += (nbytes + 9 + 63) // 64

    def count_hmac(self, msg_len: int) -> None:
        self.count_sha_message(64 + msg_len)  # inner: padded key block + message
        self.count_sha_message(64 + 32)  # outer: padded key block + inner digest

    def count_prf(self, label_seed_len: int, out_len: int) -> None:
        iterations = (out_len + 31) // 32
        self.count_hmac(label_seed_len)
        for _ in range(iterations - 1):
            self.count_hmac(32)
        for _ in range(iterations):
            self.count_hmac(32 + label_seed_len)


@dataclass(frozen=True)
class SessionKeys:
    master_secret: bytes
    client_write_key: Key128
    server_write_key: Key128
    client_salt: bytes
    server_salt: bytes

    def __post_init__(self) -> None:
        if len(self.master_secret) != MASTER_SECRET_LEN:
            raise ValueError("master secret must be 48 bytes")
        if len(self.client_salt) != 4 or len(self.server_salt) != 4:
            raise ValueError("salts must be 4 bytes")


def psk_premaster(psk: bytes) -> bytes:
    """Premaster for plain PSK: zero-filled other_secret of the same length."""
    if not 16 <= len(psk) <= 32:
        raise ValueError("psk must be 16-32 bytes")
    n = len(psk).to_bytes(2, "big")
    return n + bytes(len(psk)) + n + psk


def derive_master_secret(
    psk: bytes, client_random: bytes, server_random: bytes, meter: CryptoMeter | None = None
) -> bytes:
    if meter:
        meter.count_prf(len(b"master secret") + 64, MASTER_SECRET_LEN)
    return tls_prf_sha256(
        psk_premaster(psk), b"master secret", client_random + server_random, MASTER_SECRET_LEN
    )


def derive_key_block(
    master: bytes, client_random: bytes, server_random: bytes, meter: CryptoMeter | None = None
) -> SessionKeys:
    if len(master) != MASTER_SECRET_LEN:
        raise ValueError("master secret must be 48 bytes")
    if meter:
        meter.count_prf(len(b"key expansion") + 64, KEY_BLOCK_LEN)
    block = tls_prf_sha256(
        master, b"key expansion", server_random + client_random, KEY_BLOCK_LEN
    )
    return SessionKeys(
        master_secret=master,
        client_write_key=Key128(block[0:16]),
        server_write_key=Key128(block[16:32]),
        client_salt=block[32:36],
        server_salt=block[36:40],
    )


def finished_verify_data(
    master: bytes, transcript_digest: bytes, label: bytes, meter: CryptoMeter | None = None
) -> bytes:
    if label not in (b"client finished", b"server finished"):
        raise ValueError("bad finished label")
    if len(transcript_digest) != 32:
        raise ValueError("transcript digest must be 32 bytes")
    if meter:
        meter.count_prf(len(label) + 32, wire.VERIFY_DATA_LEN)
    return tls_prf_sha256(master, label, transcript_digest, wire.VERIFY_DATA_LEN)


def _sender_key(keys: SessionKeys, sender: Role) -> tuple[Key128, bytes]:
    if sender == "client":
        return keys.client_write_key, keys.client_salt
    return keys.server_write_key, keys.server_salt


def seal_record(
    keys: SessionKeys,
    sender: Role,
    content_type: int,
    epoch: int,
    sequence: int,
    plaintext: bytes,
    meter: CryptoMeter | None = None,
) -> Record:
    """Seal one record. The explicit nonce is not carried in the payload;
    the receiver rebuilds it from the record header (epoch ‖ sequence)."""
    key, salt = _sender_key(keys, sender)
    explicit = epoch.to_bytes(2, "big") + sequence.to_bytes(6, "big")
    aad = explicit + bytes([content_type]) + len(plaintext).to_bytes(2, "big")
    sealed = aead_seal(key, Nonce96(salt, explicit), aad, plaintext)
    if meter:
        meter.count_aes(len(plaintext))
    return Record(content_type, epoch, sequence, sealed.ciphertext + sealed.tag)


def open_record(
    keys: SessionKeys, sender: Role, record: Record, meter: CryptoMeter | None = None
) -> bytes:
    """Open one sealed record from `sender`. Raises AuthFailure on tamper."""
    if len(record.payload) < TAG_LEN:
        raise AuthFailure("sealed record shorter than tag")
    key, salt = _sender_key(keys, sender)
    explicit = record.explicit_nonce()
    pt_len = len(record.payload) - TAG_LEN
    aad = explicit + bytes([record.content_type]) + pt_len.to_bytes(2, "big")
    sealed = AeadSealed(record.payload[:-TAG_LEN], record.payload[-TAG_LEN:])
    plaintext = aead_open(key, Nonce96(salt, explicit), aad, sealed)
    if meter:
        meter.count_aes(pt_len)
    return plaintext


@dataclass
class _FlightItem:
    content_type: int
    epoch: int
    plaintext: bytes  # handshake bytes, or b"\x01" for CCS


@dataclass
class SeqCounter:
    """Monotone sender sequence source. Shared between a machine and its
    SessionChannel so Finished retransmits and application records can
    never collide on an epoch-1 nonce."""

    next_value: int = 0

    def take(self) -> int:
        value = self.next_value
        self.next_value += 1
        return value


@dataclass
class RecvWatermark:
    """Highest epoch-1 sequence accepted so far, shared the same way."""

    value: int = -1


class _Machine:
    """Shared record-layer plumbing for both roles."""

    role: Role
    peer: Role

    def __init__(self, meter: CryptoMeter | None) -> None:
        self.meter = meter
        self.keys: SessionKeys | None = None
        self.payload_bytes_sent = 0
        self.wire_bytes_sent = 0
        self.buffer_peak = STATE_BLOCK_BYTES
        self._transcript = hashlib.sha256()
        self._send_seq0 = 0
        self.epoch1_send = SeqCounter()
        self.epoch1_recv = RecvWatermark()
        self._next_send_msg = 0
        self._next_recv_msg = 0
        self._flight: list[_FlightItem] = []
        self._flight_wire_len = 0

    # -- transcript and framing helpers

    def _hash_message(self, encoded: bytes) -> None:
        self._transcript.update(encoded)
        if self.meter:
            self.meter.count_sha_message(len(encoded))

    def _transcript_digest(self) -> bytes:
        return self._transcript.copy().digest()

    def _release_transcript(self) -> None:
        # Scratch state: nothing hashes into the transcript once the
        # handshake is decided, and the live hash context is the one piece
        # of session state that cannot be copied or serialized.
        self._transcript = None

    def _make_handshake(self, msg_type: int, body: bytes) -> bytes:
        msg = wire.HandshakeMessage(msg_type, self._next_send_msg, body).encode()
        self._next_send_msg += 1
        return msg

    def _charge_buffer(self, incoming_payload_len: int) -> None:
        used = STATE_BLOCK_BYTES + self._flight_wire_len + incoming_payload_len
        if used > self.buffer_peak:
            self.buffer_peak = used
        if used > BUFFER_BUDGET:
            raise BudgetExceeded(f"working buffer would need {used} bytes")

    @property
    def buffer_used(self) -> int:
        return STATE_BLOCK_BYTES + self._flight_wire_len

    # -- emission

    def _set_flight(self, items: list[_FlightItem]) -> list[Record]:
        self._flight = items
        records = self._encode_flight()
        self._flight_wire_len = sum(r.wire_len for r in records)
        self._charge_buffer(0)
        return records

    def _encode_flight(self) -> list[Record]:
        records = []
        for item in self._flight:
            if item.epoch == 0:
                rec = Record(item.content_type, 0, self._send_seq0, item.plaintext)
                self._send_seq0 += 1
            else:
                assert self.keys is not None
                rec = seal_record(
                    self.keys,
                    self.role,
                    item.content_type,
                    1,
                    self.epoch1_send.take(),
                    item.plaintext,
                    self.meter,
                )
            self.payload_bytes_sent += len(rec.payload)
            self.wire_bytes_sent += rec.wire_len
            records.append(rec)
        return records

    def retransmit(self) -> list[Record]:
        """Re-encode the pending flight with fresh record sequence numbers."""
        if not self._flight or self._terminal():
            return []
        return self._encode_flight()

    def _alert(self, description: int) -> Record:
        seq = self._send_seq0
        self._send_seq0 += 1
        rec = Record(wire.CT_ALERT, 0, seq, wire.encode_alert(description))
        self.payload_bytes_sent += len(rec.payload)
        self.wire_bytes_sent += rec.wire_len
        return rec

    def emit_alert(self, description: int) -> Record:
        """Plaintext fatal alert for session-layer failures after the
        handshake itself is done (e.g. a tampered application record)."""
        return self._alert(description)

    def _terminal(self) -> bool:
        raise NotImplementedError

    def _fail(self, error: HandshakeError, alert_code: int | None) -> StepResult:
        records = [self._alert(alert_code)] if alert_code is not None else []
        self._flight = []
        self._flight_wire_len = 0
        self._mark_failed()
        self._release_transcript()
        return StepResult(records=records, event=StepEvent.FAILED, error=error)

    def _mark_failed(self) -> None:
        raise NotImplementedError

    def _open_finished(self, record: Record) -> wire.HandshakeMessage | None:
        """Decrypt and frame-check a peer Finished record. Returns None for
        a stale duplicate; raises BadFinished/UnexpectedMessage otherwise."""
        assert self.keys is not None
        if record.sequence <= self.epoch1_recv.value:
            return None
        try:
            plaintext = open_record(self.keys, self.peer, record, self.meter)
        except AuthFailure as exc:
            raise BadFinished(f"finished record failed authentication: {exc}") from None
        try:
            msg = wire.decode_handshake(plaintext)
        except wire.WireError as exc:
            raise UnexpectedMessage(str(exc)) from None
        if msg.msg_type != wire.HT_FINISHED or len(msg.body) != wire.VERIFY_DATA_LEN:
            raise UnexpectedMessage("expected Finished")
        self.epoch1_recv.value = record.sequence
        return msg


class ClientHandshake(_Machine):
    """Initiator role, as run inside the implant."""

    role: Role = "client"
    peer: Role = "server"

    def __init__(self, psk_identity: bytes, psk: bytes, rng: Random, meter: CryptoMeter | None = None):
        super().__init__(meter)
        if not 1 <= len(psk_identity) <= 32:
            raise ValueError("psk identity must be 1-32 bytes")
        if not 16 <= len(psk) <= 32:
            raise ValueError("psk must be 16-32 bytes")
        self.phase = ClientPhase.START
        self.psk_identity = psk_identity
        self._psk = psk
        self._rng = rng
        self.client_random = b""
        self.server_random = b""
        self._server_verify_expected: bytes | None = None

    def _terminal(self) -> bool:
        return self.phase in (ClientPhase.ESTABLISHED, ClientPhase.FAILED)

    def _mark_failed(self) -> None:
        self.phase = ClientPhase.FAILED

    def start(self) -> list[Record]:
        """Emit flight 1 (ClientHello)."""
        if self.phase is not ClientPhase.START:
            raise HandshakeError("start() called twice")
        self.client_random = self._rng.randbytes(32)
        hello = self._make_handshake(wire.HT_CLIENT_HELLO, wire.encode_client_hello(self.client_random))
        self._hash_message(hello)
        self.phase = ClientPhase.AWAIT_SERVER_HELLO
        return self._set_flight([_FlightItem(wire.CT_HANDSHAKE, 0, hello)])

    def step(self, record: Record) -> StepResult:
        if self._terminal():
            return StepResult()
        try:
            self._charge_buffer(len(record.payload))
        except BudgetExceeded as exc:
            return self._fail(exc, wire.ALERT_HANDSHAKE_FAILURE)

        if record.content_type == wire.CT_ALERT and record.epoch == 0:
            try:
                _, description = wire.decode_alert(record.payload)
            except wire.WireError:
                return StepResult()
            return self._fail(HandshakeError(f"peer alert {description}"), None)

        try:
            if self.phase is ClientPhase.AWAIT_CCS_FINISHED:
                return self._await_ccs_finished(record)
            if record.content_type != wire.CT_HANDSHAKE or record.epoch != 0:
                raise UnexpectedMessage(f"content type {record.content_type} unexpected")
            msg = wire.decode_handshake(record.payload)
            if msg.message_seq != self._next_recv_msg:
                return StepResult()  # duplicate or future: drop, timer recovers
            if self.phase is ClientPhase.AWAIT_SERVER_HELLO:
                return self._on_server_hello(record, msg)
            if self.phase is ClientPhase.AWAIT_SERVER_HELLO_DONE:
                return self._on_server_hello_done(record, msg)
            raise UnexpectedMessage(f"no handshake expected in {self.phase.value}")
        except wire.WireError as exc:
            return self._fail(UnexpectedMessage(str(exc)), wire.ALERT_HANDSHAKE_FAILURE)
        except BadFinished as exc:
            return self._fail(exc, wire.ALERT_BAD_RECORD_MAC)
        except HandshakeError as exc:
            return self._fail(exc, wire.ALERT_HANDSHAKE_FAILURE)

    def _on_server_hello(self, record: Record, msg: wire.HandshakeMessage) -> StepResult:
        if msg.msg_type != wire.HT_SERVER_HELLO:
            raise UnexpectedMessage("expected ServerHello")
        server_random, suite = wire.decode_server_hello(msg.body)
        if suite != wire.CIPHER_SUITE_PSK_AES128_GCM_SHA256:
            raise UnexpectedMessage(f"server chose unsupported suite {suite:#06x}")
        self.server_random = server_random
        self._hash_message(record.payload)
        self._next_recv_msg += 1
        self.phase = ClientPhase.AWAIT_SERVER_HELLO_DONE
        return StepResult()

    def _on_server_hello_done(self, record: Record, msg: wire.HandshakeMessage) -> StepResult:
        if msg.msg_type != wire.HT_SERVER_HELLO_DONE or msg.body:
            raise UnexpectedMessage("expected ServerHelloDone")
        self._hash_message(record.payload)
        self._next_recv_msg += 1

        master = derive_master_secret(self._psk, self.client_random, self.server_random, self.meter)
        self.keys = derive_key_block(master, self.client_random, self.server_random, self.meter)

        cke = self._make_handshake(
            wire.HT_CLIENT_KEY_EXCHANGE, wire.encode_client_key_exchange(self.psk_identity)
        )
        self._hash_message(cke)
        verify = finished_verify_data(master, self._transcript_digest(), b"client finished", self.meter)
        fin = self._make_handshake(wire.HT_FINISHED, verify)
        self._hash_message(fin)
        self._server_verify_expected = finished_verify_data(
            master, self._transcript_digest(), b"server finished", self.meter
        )
        self.phase = ClientPhase.AWAIT_CCS_FINISHED
        records = self._set_flight(
            [
                _FlightItem(wire.CT_HANDSHAKE, 0, cke),
                _FlightItem(wire.CT_CCS, 0, b"\x01"),
                _FlightItem(wire.CT_HANDSHAKE, 1, fin),
            ]
        )
        return StepResult(records=records)

    def _await_ccs_finished(self, record: Record) -> StepResult:
        if record.content_type == wire.CT_CCS and record.epoch == 0:
            return StepResult()  # epoch switch is implied by the sealed Finished
        if record.content_type == wire.CT_HANDSHAKE and record.epoch == 1:
            msg = self._open_finished(record)
            if msg is None:
                return StepResult()
            assert self._server_verify_expected is not None
            if not constant_time_equal(msg.body, self._server_verify_expected):
                raise BadFinished("server verify data mismatch")
            self._flight = []
            self._flight_wire_len = 0
            self.phase = ClientPhase.ESTABLISHED
            self._release_transcript()
            return StepResult(event=StepEvent.ESTABLISHED)
        if record.content_type == wire.CT_HANDSHAKE and record.epoch == 0:
            return StepResult()  # duplicate of flight 2: drop, our timer resends
        raise UnexpectedMessage(f"content type {record.content_type} unexpected")


class ServerHandshake(_Machine):
    """Responder role. PSKs come from a lookup so the registry stays outside."""

    role: Role = "server"
    peer: Role = "client"

    def __init__(self, psk_lookup: Callable[[bytes], bytes | None], rng: Random, meter: CryptoMeter | None = None):
        super().__init__(meter)
        self.phase = ServerPhase.AWAIT_CLIENT_HELLO
        self._psk_lookup = psk_lookup
        self._rng = rng
        self.client_random = b""
        self.server_random = b""
        self.psk_identity = b""
        self._client_verify_expected: bytes | None = None
        self._master: bytes | None = None

    def _terminal(self) -> bool:
        return self.phase is ServerPhase.FAILED

    def _mark_failed(self) -> None:
        self.phase = ServerPhase.FAILED

    def step(self, record: Record) -> StepResult:
        if self.phase is ServerPhase.FAILED:
            return StepResult()
        try:
            self._charge_buffer(len(record.payload))
        except BudgetExceeded as exc:
            return self._fail(exc, wire.ALERT_HANDSHAKE_FAILURE)

        if record.content_type == wire.CT_ALERT and record.epoch == 0:
            try:
                _, description = wire.decode_alert(record.payload)
            except wire.WireError:
                return StepResult()
            return self._fail(HandshakeError(f"peer alert {description}"), None)

        try:
            if record.content_type == wire.CT_CCS and record.epoch == 0:
                return self._on_ccs(record)
            if record.content_type == wire.CT_HANDSHAKE and record.epoch == 1:
                return self._on_sealed_handshake(record)
            if record.content_type != wire.CT_HANDSHAKE or record.epoch != 0:
                raise UnexpectedMessage(f"content type {record.content_type} unexpected")
            msg = wire.decode_handshake(record.payload)
            if msg.message_seq < self._next_recv_msg:
                return self._on_duplicate(msg)
            if msg.message_seq > self._next_recv_msg:
                return StepResult()
            if self.phase is ServerPhase.AWAIT_CLIENT_HELLO:
                return self._on_client_hello(record, msg)
            if self.phase is ServerPhase.AWAIT_CLIENT_KEY_EXCHANGE:
                return self._on_client_key_exchange(record, msg)
            raise UnexpectedMessage(f"no plaintext handshake expected in {self.phase.value}")
        except wire.WireError as exc:
            return self._fail(UnexpectedMessage(str(exc)), wire.ALERT_HANDSHAKE_FAILURE)
        except UnknownPskIdentity as exc:
            return self._fail(exc, wire.ALERT_UNKNOWN_IDENTITY)
        except BadFinished as exc:
            return self._fail(exc, wire.ALERT_BAD_RECORD_MAC)
        except HandshakeError as exc:
            return self._fail(exc, wire.ALERT_HANDSHAKE_FAILURE)

    def _on_duplicate(self, msg: wire.HandshakeMessage) -> StepResult:
        # The peer retransmitting the message that triggered our last flight
        # means that flight was lost: re-emit it. Anything else just drops.
        if (
            msg.msg_type == wire.HT_CLIENT_HELLO
            and self.phase is ServerPhase.AWAIT_CLIENT_KEY_EXCHANGE
        ):
            return StepResult(records=self.retransmit())
        return StepResult()

    def _on_client_hello(self, record: Record, msg: wire.HandshakeMessage) -> StepResult:
        if msg.msg_type != wire.HT_CLIENT_HELLO:
            raise UnexpectedMessage("expected ClientHello")
        client_random, suites = wire.decode_client_hello(msg.body)
        if wire.CIPHER_SUITE_PSK_AES128_GCM_SHA256 not in suites:
            raise UnexpectedMessage("no common cipher suite")
        self.client_random = client_random
        self._hash_message(record.payload)
        self._next_recv_msg += 1

        self.server_random = self._rng.randbytes(32)
        hello = self._make_handshake(wire.HT_SERVER_HELLO, wire.encode_server_hello(self.server_random))
        self._hash_message(hello)
        done = self._make_handshake(wire.HT_SERVER_HELLO_DONE, b"")
        self._hash_message(done)
        self.phase = ServerPhase.AWAIT_CLIENT_KEY_EXCHANGE
        records = self._set_flight(
            [_FlightItem(wire.CT_HANDSHAKE, 0, hello), _FlightItem(wire.CT_HANDSHAKE, 0, done)]
        )
        return StepResult(records=records)

    def _on_client_key_exchange(self, record: Record, msg: wire.HandshakeMessage) -> StepResult:
        if msg.msg_type != wire.HT_CLIENT_KEY_EXCHANGE:
            raise UnexpectedMessage("expected ClientKeyExchange")
        identity = wire.decode_client_key_exchange(msg.body)
        psk = self._psk_lookup(identity)
        if psk is None:
            raise UnknownPskIdentity(identity.hex())
        self.psk_identity = identity
        self._hash_message(record.payload)
        self._next_recv_msg += 1

        self._master = derive_master_secret(psk, self.client_random, self.server_random, self.meter)
        self.keys = derive_key_block(self._master, self.client_random, self.server_random, self.meter)
        self._client_verify_expected = finished_verify_data(
            self._master, self._transcript_digest(), b"client finished", self.meter
        )
        self.phase = ServerPhase.AWAIT_CCS
        return StepResult()

    def _on_ccs(self, record: Record) -> StepResult:
        if self.phase is ServerPhase.AWAIT_CCS:
            self.phase = ServerPhase.AWAIT_FINISHED
            return StepResult()
        if self.phase in (ServerPhase.AWAIT_FINISHED, ServerPhase.ESTABLISHED):
            return StepResult()  # duplicate
        raise UnexpectedMessage("CCS before ClientKeyExchange")

    def _on_sealed_handshake(self, record: Record) -> StepResult:
        if self.phase is ServerPhase.ESTABLISHED:
            return self._on_established_handshake_record(record)
        if self.phase is not ServerPhase.AWAIT_FINISHED:
            raise UnexpectedMessage("sealed handshake before CCS")
        msg = self._open_finished(record)
        if msg is None:
            return StepResult()
        if msg.message_seq != self._next_recv_msg:
            return StepResult()
        assert self._client_verify_expected is not None and self._master is not None
        if not constant_time_equal(msg.body, self._client_verify_expected):
            raise BadFinished("client verify data mismatch")
        # Transcript runs over plaintext handshake bytes on both sides.
        self._hash_message(wire.HandshakeMessage(msg.msg_type, msg.message_seq, msg.body).encode())
        self._next_recv_msg += 1

        verify = finished_verify_data(
            self._master, self._transcript_digest(), b"server finished", self.meter
        )
        fin = self._make_handshake(wire.HT_FINISHED, verify)
        self._hash_message(fin)
        self.phase = ServerPhase.ESTABLISHED
        self._release_transcript()
        records = self._set_flight(
            [_FlightItem(wire.CT_CCS, 0, b"\x01"), _FlightItem(wire.CT_HANDSHAKE, 1, fin)]
        )
        return StepResult(records=records, event=StepEvent.ESTABLISHED)

    def _on_established_handshake_record(self, record: Record) -> StepResult:
        """A retransmitted client Finished (fresh record sequence, stale
        message_seq) means our final flight was lost: re-emit it. Anything
        that does not authenticate as that is dropped without failing."""
        assert self.keys is not None
        try:
            plaintext = open_record(self.keys, self.peer, record, self.meter)
            msg = wire.decode_handshake(plaintext)
        except (AuthFailure, wire.WireError):
            return StepResult()
        if msg.msg_type == wire.HT_FINISHED and msg.message_seq < self._next_recv_msg:
            if record.sequence > self.epoch1_recv.value:
                self.epoch1_recv.value = record.sequence
            return StepResult(records=self.retransmit())
        return StepResult()


class SessionChannel:
    """Sealed application channel over an established handshake.

    Sender sequences and the receive watermark are shared with the
    handshake machine (each side's Finished consumed epoch-1 sequence 0,
    and retransmitted Finished copies consume further sequences), so a
    nonce is never reused between handshake and application records.
    Anything at or below the watermark raises ReplayDetected before any
    decryption is attempted.
    """

    def __init__(
        self,
        keys: SessionKeys,
        local_role: Role,
        meter: CryptoMeter | None = None,
        send_counter: SeqCounter | None = None,
        recv_watermark: RecvWatermark | None = None,
    ):
        self._keys = keys
        self._role: Role = local_role
        self._peer: Role = "server" if local_role == "client" else "client"
        self._meter = meter
        self._send = send_counter if send_counter is not None else SeqCounter(next_value=1)
        self._recv = recv_watermark if recv_watermark is not None else RecvWatermark(value=0)

    @classmethod
    def for_machine(cls, machine: _Machine, meter: CryptoMeter | None = None) -> "SessionChannel":
        assert machine.keys is not None, "machine not established"
        return cls(
            machine.keys,
            machine.role,
            meter if meter is not None else machine.meter,
            send_counter=machine.epoch1_send,
            recv_watermark=machine.epoch1_recv,
        )

    def seal(self, payload: bytes, content_type: int = wire.CT_APPDATA) -> Record:
        return seal_record(
            self._keys, self._role, content_type, 1, self._send.take(), payload, self._meter
        )

    def open(self, record: Record) -> bytes:
        if record.epoch != 1:
            raise AuthFailure("plaintext record on established channel")
        if record.sequence <= self._recv.value:
            raise ReplayDetected(f"sequence {record.sequence} already seen")
        plaintext = open_record(self._keys, self._peer, record, self._meter)
        self._recv.value = record.sequence
        return plaintext
