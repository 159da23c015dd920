"""Authority side: patient registry, prescription policy gate, server-role
handshakes, dual-channel challenge issuance, and a tamper-evident transaction
log.

Policy runs before any byte is emitted: a request outside the prescription
produces a refusal SMS and a log record but no wire traffic at all. Each
begun session ends in exactly one TransactionRecord whatever its outcome.

The SMS channel is a plain outbox list on the core, never handed to the
datagram router; the tap code reaches the user only on that side channel, and
the relay path only ever carries it AEAD-sealed.
"""

from __future__ import annotations

import json
import hashlib
from dataclasses import dataclass, field
from random import Random
from typing import Optional

import tomli

from imdauth import tapcode, wire
from imdauth.crypto import AuthFailure
from imdauth.handshake import (
    ReplayDetected,
    ServerHandshake,
    ServerPhase,
    SessionChannel,
    StepEvent,
)
from imdauth.tapcode import ClockConfig, OtpChallenge

GENESIS_DIGEST = "0" * 64


class StorageFailure(Exception):
    pass


class LogCorrupt(Exception):
    def __init__(self, index: int, reason: str):
        super().__init__(f"log entry {index}: {reason}")
        self.index = index


@dataclass(frozen=True)
class Prescription:
    min_dose_milli: int
    max_dose_milli: int
    max_daily_doses: int
    units: str

    def __post_init__(self) -> None:
        if self.min_dose_milli > self.max_dose_milli:
            raise ValueError("min dose exceeds max dose")
        if self.min_dose_milli < 0 or self.max_daily_doses < 1:
            raise ValueError("bad prescription bounds")


@dataclass(frozen=True)
class PatientRecord:
    psk_identity: bytes
    psk: bytes
    prescription: Prescription
    phone_handle: str
    user_secret: str
    second_factor: bool = True

    def __post_init__(self) -> None:
        if not 1 <= len(self.psk_identity) <= 32:
            raise ValueError("identity must be 1-32 bytes")
        if not 16 <= len(self.psk) <= 32:
            raise ValueError("psk must be 16-32 bytes")


def registry_from_toml(text: str) -> dict[str, PatientRecord]:
    """Parse the human-editable registry; keys are identity strings."""
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ValueError(f"bad registry file: {exc}") from exc
    return registry_from_dict(data)


def registry_from_dict(data: dict) -> dict[str, PatientRecord]:
    registry: dict[str, PatientRecord] = {}
    for entry in data.get("patient", []):
        rx = entry["prescription"]
        record = PatientRecord(
            psk_identity=entry["identity"].encode("ascii"),
            psk=bytes.fromhex(entry["psk_hex"]),
            prescription=Prescription(
                min_dose_milli=int(rx["min_dose_milli"]),
                max_dose_milli=int(rx["max_dose_milli"]),
                max_daily_doses=int(rx["max_daily_doses"]),
                units=str(rx["units"]),
            ),
            phone_handle=str(entry["phone"]),
            user_secret=str(entry["user_secret"]),
            second_factor=bool(entry.get("second_factor", True)),
        )
        identity = record.psk_identity.decode("ascii")
        if identity in registry:
            raise ValueError(f"duplicate identity {identity}")
        if any(r.psk == record.psk for r in registry.values()):
            raise ValueError(f"psk for {identity} reused by another identity")
        registry[identity] = record
    return registry


@dataclass(frozen=True)
class SmsMessage:
    to: str
    body: str
    at_ns: int
    pattern_text: str = ""  # structured copy of the tap code, when present


@dataclass
class TransactionRecord:
    timestamp_ns: int
    psk_identity: str
    requested_dose_milli: int
    policy_verdict: str
    first_factor_result: str
    second_factor_result: str
    otp_pattern_text: str
    final_outcome: str

    def to_dict(self) -> dict:
        return {
            "timestamp_ns": self.timestamp_ns,
            "psk_identity": self.psk_identity,
            "requested_dose_milli": self.requested_dose_milli,
            "policy_verdict": self.policy_verdict,
            "first_factor_result": self.first_factor_result,
            "second_factor_result": self.second_factor_result,
            "otp_pattern_text": self.otp_pattern_text,
            "final_outcome": self.final_outcome,
        }


class TransactionLog:
    """Append-only JSON-lines log where every entry carries the hex digest
    of its predecessor; any stored-byte mutation breaks the chain."""

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self.lines: list[str] = []
        self.records: list[TransactionRecord] = []
        self._head = GENESIS_DIGEST

    def append(self, record: TransactionRecord) -> str:
        entry = {"seq": len(self.lines), "prev": self._head, **record.to_dict()}
        line = json.dumps(entry, sort_keys=True, separators=(",", ":"))
        self._head = hashlib.sha256(line.encode()).hexdigest()
        self.lines.append(line)
        self.records.append(record)
        if self.path is not None:
            try:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")
            except OSError as exc:
                raise StorageFailure(str(exc)) from exc
        return self._head

    def read(self, psk_identity: Optional[str] = None,
             final_outcome: Optional[str] = None) -> list[TransactionRecord]:
        out = []
        for record in self.records:
            if psk_identity is not None and record.psk_identity != psk_identity:
                continue
            if final_outcome is not None and record.final_outcome != final_outcome:
                continue
            out.append(record)
        return out

    @property
    def head(self) -> str:
        return self._head

    def verify(self) -> int:
        """Recompute the whole chain; returns entry count, raises LogCorrupt
        at the first entry whose linkage or digest does not hold."""
        return self.verify_lines(self.lines, expected_head=self._head)

    @staticmethod
    def verify_lines(lines: list[str], expected_head: Optional[str] = None) -> int:
        """Chain check over exported lines. Without the independently held
        head digest a mutation of the final entry is unprovable, so callers
        auditing a file should pass the head they recorded."""
        head = GENESIS_DIGEST
        for i, line in enumerate(lines):
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LogCorrupt(i, f"unparseable: {exc}") from exc
            if entry.get("seq") != i:
                raise LogCorrupt(i, f"sequence {entry.get('seq')} != {i}")
            if entry.get("prev") != head:
                raise LogCorrupt(i, "previous-entry digest mismatch")
            canonical = json.dumps(entry, sort_keys=True, separators=(",", ":"))
            if canonical != line:
                raise LogCorrupt(i, "non-canonical encoding")
            head = hashlib.sha256(line.encode()).hexdigest()
        if expected_head is not None and head != expected_head:
            raise LogCorrupt(max(len(lines) - 1, 0), "head digest mismatch")
        return len(lines)


@dataclass
class TimerRequest:
    at_ns: int
    kind: str
    token: int


@dataclass
class ServerOutput:
    sends: list[tuple[str, bytes]] = field(default_factory=list)  # (identity, datagram)
    timers: list[TimerRequest] = field(default_factory=list)


class _SessionState:
    HANDSHAKE = "handshake"
    AWAIT_RESULT = "await_result"
    DONE = "done"


@dataclass
class _Session:
    identity: str
    patient: PatientRecord
    dose_milli: int
    started_ns: int
    machine: ServerHandshake
    state: str = _SessionState.HANDSHAKE
    channel: Optional[SessionChannel] = None
    otp: Optional[OtpChallenge] = None
    first_factor_result: str = "pending"
    second_factor_result: str = "not_run"
    otp_text: str = ""
    final_outcome: str = "pending"
    record_written: bool = False
    start_auth_tries: int = 0


class ServerCore:
    def __init__(
        self,
        registry: dict[str, PatientRecord],
        rng: Random,
        log: Optional[TransactionLog] = None,
        clock: Optional[ClockConfig] = None,
        challenge_window_s: float = 30.0,
        session_deadline_s: float = 120.0,
        start_auth_retry_s: float = 2.0,
        start_auth_max_tries: int = 5,
        connect_ttl_s: float = 15.0,
        otp_min_taps: int = 3,
        otp_max_taps: int = 6,
    ):
        self.registry = registry
        self.rng = rng
        self.log = log if log is not None else TransactionLog()
        self.clock = clock or ClockConfig()
        self.challenge_window_s = challenge_window_s
        self.session_deadline_s = session_deadline_s
        self.start_auth_retry_s = start_auth_retry_s
        self.start_auth_max_tries = start_auth_max_tries
        self.connect_ttl_s = connect_ttl_s
        self.otp_min_taps = otp_min_taps
        self.otp_max_taps = otp_max_taps
        self.sms_outbox: list[SmsMessage] = []
        self.sessions_begun = 0
        self.events: list[tuple[int, str]] = []
        self._connected: dict[str, int] = {}
        self._sessions: dict[str, _Session] = {}
        self._pending: dict[str, tuple[int, int]] = {}  # identity -> (dose, t)
        self._tokens: dict[str, int] = {}

    # ------------------------------------------------------------- plumbing

    def _arm(self, kind: str, at_ns: int) -> TimerRequest:
        token = self._tokens.get(kind, 0) + 1
        self._tokens[kind] = token
        return TimerRequest(at_ns=at_ns, kind=kind, token=token)

    def _cancel(self, kind: str) -> None:
        self._tokens[kind] = self._tokens.get(kind, 0) + 1

    def _sms(self, patient: PatientRecord, body: str, now_ns: int, pattern_text: str = "") -> None:
        self.sms_outbox.append(
            SmsMessage(to=patient.phone_handle, body=body, at_ns=now_ns, pattern_text=pattern_text)
        )

    def _finish(self, session: _Session, outcome: str, now_ns: int,
                policy_verdict: str = "allow") -> None:
        if session.record_written:
            return
        session.final_outcome = outcome
        session.record_written = True
        session.state = _SessionState.DONE
        self._cancel(f"deadline:{session.identity}")
        self.log.append(TransactionRecord(
            timestamp_ns=now_ns,
            psk_identity=session.identity,
            requested_dose_milli=session.dose_milli,
            policy_verdict=policy_verdict,
            first_factor_result=session.first_factor_result,
            second_factor_result=session.second_factor_result,
            otp_pattern_text=session.otp_text,
            final_outcome=outcome,
        ))
        self.events.append((now_ns, f"session:{session.identity}:{outcome}"))

    def _refuse(self, identity: str, dose_milli: int, verdict: str, now_ns: int,
                patient: Optional[PatientRecord] = None) -> None:
        """Refusal before any handshake: record plus SMS, zero wire bytes."""
        self.sessions_begun += 1
        self.log.append(TransactionRecord(
            timestamp_ns=now_ns,
            psk_identity=identity,
            requested_dose_milli=dose_milli,
            policy_verdict=verdict,
            first_factor_result="not_run",
            second_factor_result="not_run",
            otp_pattern_text="",
            final_outcome="refused",
        ))
        self.events.append((now_ns, f"refused:{identity}:{verdict}"))
        if patient is not None:
            self._sms(patient, f"request refused: {verdict}", now_ns)

    # ------------------------------------------------------------ user side

    def executed_today(self, identity: str, now_ns: int) -> int:
        window_start = now_ns - 24 * 3600 * 1_000_000_000
        return sum(
            1 for r in self.log.read(psk_identity=identity, final_outcome="executed")
            if r.timestamp_ns > window_start
        )

    def begin_session(self, identity: str, user_secret: str, dose_milli: int,
                      now_ns: int) -> ServerOutput:
        """Credential check, then policy, then (and only then) wire traffic."""
        out = ServerOutput()
        patient = self.registry.get(identity)
        if patient is None:
            self._refuse(identity, dose_milli, "unknown_identity", now_ns)
            return out
        if user_secret != patient.user_secret:
            self._refuse(identity, dose_milli, "bad_credentials", now_ns, patient)
            return out
        active = self._sessions.get(identity)
        if active is not None and active.state != _SessionState.DONE:
            self._refuse(identity, dose_milli, "session_in_progress", now_ns, patient)
            return out
        rx = patient.prescription
        if not rx.min_dose_milli <= dose_milli <= rx.max_dose_milli:
            self._refuse(identity, dose_milli, "dose_out_of_range", now_ns, patient)
            return out
        if self.executed_today(identity, now_ns) >= rx.max_daily_doses:
            self._refuse(identity, dose_milli, "daily_limit_reached", now_ns, patient)
            return out

        self.sessions_begun += 1
        session = _Session(
            identity=identity,
            patient=patient,
            dose_milli=dose_milli,
            started_ns=now_ns,
            machine=ServerHandshake(self._psk_lookup, self.rng),
        )
        self._sessions[identity] = session
        self.events.append((now_ns, f"session:{identity}:begin"))
        out.timers.append(self._arm(
            f"deadline:{identity}",
            now_ns + int(round(self.session_deadline_s * 1e9)),
        ))
        last_seen = self._connected.get(identity)
        ttl_ns = int(round(self.connect_ttl_s * 1e9))
        if last_seen is not None and now_ns - last_seen <= ttl_ns:
            self._send_start_auth(session, out, now_ns)
        else:
            # device radio is (probably) asleep; wait for its next announce
            self._pending[identity] = (dose_milli, now_ns)
        return out

    def _send_start_auth(self, session: _Session, out: ServerOutput, now_ns: int) -> None:
        """Kick the device into its first factor, and keep kicking: the frame
        is plaintext fire-and-forget, so losing it must not strand the session."""
        session.start_auth_tries += 1
        out.sends.append((session.identity, wire.encode_start_auth()))
        if session.start_auth_tries < self.start_auth_max_tries:
            out.timers.append(self._arm(
                f"startauth:{session.identity}",
                now_ns + int(round(self.start_auth_retry_s * 1e9)),
            ))

    def _psk_lookup(self, identity: bytes) -> Optional[bytes]:
        record = self.registry.get(identity.decode("ascii", errors="replace"))
        return record.psk if record else None

    # ------------------------------------------------------------ wire side

    def on_datagram(self, identity: str, data: bytes, now_ns: int) -> ServerOutput:
        out = ServerOutput()
        if wire.is_control_datagram(data):
            try:
                kind, payload = wire.decode_control(data)
            except wire.WireError:
                return out
            if kind == wire.CTRL_CONNECT:
                claimed = payload.decode("ascii", errors="replace")
                self._connected[claimed] = now_ns
                self.events.append((now_ns, f"connect:{claimed}"))
                if claimed in self._pending:
                    self._pending.pop(claimed)
                    pending = self._sessions.get(claimed)
                    if pending is not None and pending.state != _SessionState.DONE:
                        self._send_start_auth(pending, out, now_ns)
            return out

        session = self._sessions.get(identity)
        if session is None or session.state == _SessionState.DONE:
            if session is not None:
                self._maybe_reack(session, data, out, now_ns)
            return out
        try:
            records = wire.decode_datagram(data)
        except wire.WireError:
            return out
        self._cancel(f"startauth:{identity}")  # the device is talking now

        replies: list[wire.Record] = []
        for record in records:
            if record.content_type == wire.CT_APPDATA:
                if session.channel is not None:
                    self._on_app_record(session, record, replies, now_ns)
                continue  # sealed data before establishment: drop
            if (record.content_type == wire.CT_ALERT
                    and session.machine.phase is ServerPhase.ESTABLISHED):
                self._finish(session, "failed", now_ns)
                break
            result = session.machine.step(record)
            replies.extend(result.records)
            if result.event is StepEvent.ESTABLISHED:
                self._on_established(session, replies, now_ns)
            elif result.event is StepEvent.FAILED:
                reason = type(result.error).__name__ if result.error else "peer_alert"
                session.first_factor_result = f"fail:{reason}"
                self._finish(session, "failed", now_ns)
                self._sms(session.patient, "authentication failed", now_ns)
                break
            elif (session.machine.phase is ServerPhase.ESTABLISHED
                  and result.records and session.state == _SessionState.AWAIT_RESULT):
                # Flight re-emission for a retransmitted Finished: the sealed
                # challenge rode the lost datagram, so restate it too.
                replies.append(self._seal_first_app(session))
        if replies:
            out.sends.append((identity, wire.encode_datagram(replies)))
        return out

    def _on_established(self, session: _Session, replies: list[wire.Record], now_ns: int) -> None:
        session.first_factor_result = "pass"
        session.channel = SessionChannel.for_machine(session.machine)
        session.state = _SessionState.AWAIT_RESULT
        self.events.append((now_ns, f"established:{session.identity}"))
        if session.patient.second_factor:
            window_ticks = self.clock.ms_to_lclk_ticks(self.challenge_window_s * 1000)
            session.otp = tapcode.generate_otp(
                self.rng, self.otp_min_taps, self.otp_max_taps
            ).with_expiry(window_ticks)
            text = session.otp.pattern.to_text()
            session.otp_text = text
            self._sms(
                session.patient,
                f"tap code for your {session.dose_milli} milli-unit request: {text}",
                now_ns,
                pattern_text=text,
            )
        else:
            session.otp = OtpChallenge(
                pattern=tapcode.TapPattern(tap_count=1, gaps=()),
                nonce=self.rng.randbytes(tapcode.NONCE_LEN),
            )
        replies.append(self._seal_first_app(session))

    def _seal_first_app(self, session: _Session) -> wire.Record:
        assert session.channel is not None and session.otp is not None
        if session.patient.second_factor:
            payload = wire.encode_challenge(
                session.otp.nonce,
                session.otp.expiry_ticks,
                session.dose_milli,
                session.otp.pattern.to_text(),
            )
        else:
            payload = wire.encode_authorize(session.otp.nonce, session.dose_milli)
        return session.channel.seal(payload)

    def _on_app_record(self, session: _Session, record: wire.Record,
                       replies: list[wire.Record], now_ns: int) -> None:
        assert session.channel is not None
        try:
            plaintext = session.channel.open(record)
        except ReplayDetected:
            return
        except AuthFailure:
            session.second_factor_result = "fail:channel_tamper"
            replies.append(session.machine.emit_alert(wire.ALERT_BAD_RECORD_MAC))
            self._finish(session, "failed", now_ns)
            self._sms(session.patient, "authentication failed", now_ns)
            return
        try:
            message = wire.decode_app_message(plaintext)
        except wire.WireError:
            return
        if message.kind != wire.APP_AUTH_RESULT or session.otp is None:
            return
        if message.nonce != session.otp.nonce:
            return
        replies.append(session.channel.seal(wire.encode_result_ack(message.nonce)))
        if session.state != _SessionState.AWAIT_RESULT:
            return  # duplicate result from a lost ack: re-ack only
        if session.patient.second_factor:
            session.second_factor_result = "accept" if message.accepted else "reject"
        outcome = "executed" if message.accepted else "denied"
        verdict_body = (
            f"dose of {session.dose_milli} milli-units executed"
            if message.accepted else "request denied"
        )
        self._sms(session.patient, verdict_body, now_ns)
        self._finish(session, outcome, now_ns)

    def _maybe_reack(self, session: _Session, data: bytes, out: ServerOutput,
                     now_ns: int) -> None:
        """A finished session still re-acks duplicate AUTH_RESULT retries so
        the device can close its side."""
        if session.channel is None or session.otp is None:
            return
        try:
            records = wire.decode_datagram(data)
        except wire.WireError:
            return
        replies = []
        for record in records:
            if record.content_type != wire.CT_APPDATA:
                continue
            try:
                message = wire.decode_app_message(session.channel.open(record))
            except (ReplayDetected, AuthFailure, wire.WireError):
                continue
            if message.kind == wire.APP_AUTH_RESULT and message.nonce == session.otp.nonce:
                replies.append(session.channel.seal(wire.encode_result_ack(message.nonce)))
        if replies:
            out.sends.append((session.identity, wire.encode_datagram(replies)))

    # --------------------------------------------------------------- timers

    def on_timer(self, kind: str, token: int, now_ns: int) -> ServerOutput:
        out = ServerOutput()
        if self._tokens.get(kind, 0) != token:
            return out
        if kind.startswith("startauth:"):
            identity = kind.split(":", 1)[1]
            session = self._sessions.get(identity)
            if (session is not None and session.state == _SessionState.HANDSHAKE
                    and session.machine.phase is ServerPhase.AWAIT_CLIENT_HELLO):
                self._send_start_auth(session, out, now_ns)
        elif kind.startswith("deadline:"):
            identity = kind.split(":", 1)[1]
            session = self._sessions.get(identity)
            if session is not None and not session.record_written:
                if session.first_factor_result == "pending":
                    session.first_factor_result = "timeout"
                elif session.state == _SessionState.AWAIT_RESULT:
                    session.second_factor_result = "timeout"
                self._finish(session, "timeout", now_ns)
                self._sms(session.patient, "request timed out", now_ns)
        return out
