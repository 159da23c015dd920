"""Implant lifecycle: touch wake-up, first-factor client handshake, one-time
tap-pattern verification, command execution, and a picojoule-resolution
energy ledger calibrated against measured power figures.

The device is a deterministic reactor: the simulator hands it touch samples,
datagrams and its own timer expiries, each stamped with virtual-clock
nanoseconds, and it returns datagrams to send and new timers to arm. In Idle
only the touch sensing domain runs; network input is physically ignored, so
wake-spam costs an attacker nothing but their own airtime.

Latency model: every inbound/outbound byte crosses the bus at spi_bps, every
hash/cipher block costs fixed cycles on the high-frequency clock, and a single
calibrated overhead constant at first-factor entry stands in for radio
bring-up. All processing chains through a busy-until watermark so response
times compose correctly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from random import Random

from imdauth import tapcode, wire
from imdauth.crypto import AuthFailure
from imdauth.handshake import (
    ClientHandshake,
    ClientPhase,
    CryptoMeter,
    ReplayDetected,
    SessionChannel,
    StepEvent,
)
from imdauth.tapcode import ClockConfig, DetectorConfig, OtpChallenge, TapDetector, TapPattern


class DeviceState(Enum):
    IDLE = "idle"
    WOKEN = "woken"
    FIRST_FACTOR = "first_factor"
    AWAIT_SECOND_FACTOR = "await_second_factor"
    VERIFYING = "verifying"
    EXECUTING = "executing"
    NOTIFYING = "notifying"
    LOCKOUT = "lockout"


@dataclass(frozen=True)
class PowerParams:
    idle_w: float = 735e-12
    active_w: float = 8e-6
    aes_j_per_bit: float = 14.1e-12
    sha_j_per_bit: float = 5.3e-12
    spi_bps: int = 125_000
    vdd: float = 2.5
    vdc: float = 0.87

    def __post_init__(self) -> None:
        values = (self.idle_w, self.active_w, self.aes_j_per_bit,
                  self.sha_j_per_bit, self.spi_bps, self.vdd, self.vdc)
        if any(v <= 0 for v in values):
            raise ValueError("power parameters must be positive")
        if self.active_w <= self.idle_w:
            raise ValueError("active power must exceed idle power")

    def spi_ns(self, nbytes: int) -> int:
        return nbytes * 8 * 1_000_000_000 // self.spi_bps


@dataclass(frozen=True)
class DeviceTimings:
    """Cost model constants. The overhead constant is the one calibrated
    value: it folds radio bring-up and link setup into a single figure fixed
    by the no-second-factor reference run."""

    sha_cycles_per_block: int = 66
    aes_cycles_per_block: int = 12
    verify_ns: int = 1_000_000
    execute_ns: int = 5_000_000
    first_factor_overhead_ns: int = 537_105_820


class EnergyLedger:
    """Per-state time in integer nanoseconds plus primitive bit counters.

    Joule figures are computed at read time from the integer tallies, so
    identical event histories produce bit-identical energy reports. The
    primitive breakdown attributes slices of active-state energy; it is not
    additive on top of the state totals.
    """

    def __init__(self, power: PowerParams):
        self.power = power
        self.state_ns: dict[DeviceState, int] = {s: 0 for s in DeviceState}
        self.aes_bits = 0
        self.sha_bits = 0
        self.spi_bits = 0

    def accrue(self, state: DeviceState, dt_ns: int) -> None:
        if dt_ns < 0:
            raise ValueError("negative accrual")
        self.state_ns[state] += dt_ns

    def debit_bits(self, primitive: str, bits: int) -> None:
        if bits < 0:
            raise ValueError("negative debit")
        if primitive == "aes":
            self.aes_bits += bits
        elif primitive == "sha":
            self.sha_bits += bits
        elif primitive == "spi":
            self.spi_bits += bits
        else:
            raise ValueError(f"unknown primitive {primitive}")

    def state_seconds(self, state: DeviceState) -> float:
        return self.state_ns[state] / 1e9

    def state_joules(self, state: DeviceState) -> float:
        power = self.power.idle_w if state is DeviceState.IDLE else self.power.active_w
        return power * self.state_seconds(state)

    @property
    def by_state(self) -> dict[str, float]:
        return {s.value: self.state_joules(s) for s in DeviceState}

    @property
    def by_primitive(self) -> dict[str, float]:
        return {
            "aes": self.aes_bits * self.power.aes_j_per_bit,
            "sha": self.sha_bits * self.power.sha_j_per_bit,
            "spi": self.spi_bits / self.power.spi_bps * self.power.active_w,
        }

    @property
    def total_joules(self) -> float:
        return sum(self.state_joules(s) for s in DeviceState)

    @property
    def sim_time_s(self) -> float:
        return sum(self.state_ns.values()) / 1e9

    def snapshot(self) -> dict:
        return {
            "by_state_j": self.by_state,
            "by_primitive_j": self.by_primitive,
            "total_j": self.total_joules,
            "sim_time_s": self.sim_time_s,
            "aes_bits": self.aes_bits,
            "sha_bits": self.sha_bits,
            "spi_bits": self.spi_bits,
        }


@dataclass(frozen=True)
class DeviceConfig:
    psk_identity: bytes
    psk: bytes
    wake_pattern: TapPattern
    second_factor_enabled: bool = True
    second_factor_window_s: float = 30.0
    max_failed_attempts: int = 3
    lockout_s: float = 60.0
    woken_timeout_s: float = 10.0
    connect_beacon_s: float = 2.0
    handshake_timeout_s: float = 10.0
    wake_match_gaps: bool = False
    radio_on_in_idle: bool = False  # ablation: what touch wake-up buys us

    def __post_init__(self) -> None:
        if not 16 <= len(self.psk) <= 32:
            raise ValueError("psk must be 16-32 bytes")
        if not 1 <= len(self.psk_identity) <= 32:
            raise ValueError("psk identity must be 1-32 bytes")


@dataclass
class Outgoing:
    at_ns: int
    data: bytes


@dataclass
class TimerRequest:
    at_ns: int
    kind: str
    token: int


@dataclass
class DeviceOutput:
    sends: list[Outgoing] = field(default_factory=list)
    timers: list[TimerRequest] = field(default_factory=list)


def _s_to_ns(seconds: float) -> int:
    return int(round(seconds * 1e9))


class Device:
    def __init__(
        self,
        config: DeviceConfig,
        rng: Random,
        power: PowerParams | None = None,
        timings: DeviceTimings | None = None,
        clock: ClockConfig | None = None,
        detector_config: DetectorConfig | None = None,
    ):
        self.config = config
        self.power = power or PowerParams()
        self.timings = timings or DeviceTimings()
        self.clock = clock or ClockConfig()
        self.detector_config = detector_config or DetectorConfig()
        self.rng = rng
        self.ledger = EnergyLedger(self.power)
        self.state = DeviceState.IDLE
        self.events: list[tuple[int, str]] = []
        self.executions: list[tuple[int, int]] = []  # (t_ns, dose_milli)
        self.auth_started_ns: int | None = None
        self.executing_entered_ns: int | None = None
        self.meter = CryptoMeter()
        self.machine: ClientHandshake | None = None
        self.channel: SessionChannel | None = None
        self.handshake_payload_bytes = 0
        self.handshake_wire_bytes = 0
        self.buffer_peak = 0

        self._detector = TapDetector(self.detector_config)
        self._last_touch_tick: int | None = None
        self._last_accrued_ns = 0
        self._busy_until_ns = 0
        self._tokens: dict[str, int] = {}
        self._challenge: OtpChallenge | None = None
        self._dose_milli = 0
        self._pending_result: tuple[bool, bytes] | None = None
        self._failures = 0
        self._retransmits = 0
        self._notify_retries = 0
        self._meter_marks = (0, 0, 0, 0)

    # ------------------------------------------------------------- plumbing

    def sync(self, now_ns: int) -> None:
        """Bring state-time accrual up to the given instant."""
        self._accrue_to(now_ns)

    def _accrue_to(self, now_ns: int) -> None:
        dt = now_ns - self._last_accrued_ns
        if dt > 0:
            self.ledger.accrue(self.state, dt)
            self._last_accrued_ns = now_ns

    def _change_state(self, new_state: DeviceState, at_ns: int) -> None:
        self._accrue_to(at_ns)
        self.state = new_state
        self.events.append((at_ns, f"state:{new_state.value}"))
        if new_state is DeviceState.EXECUTING and self.executing_entered_ns is None:
            self.executing_entered_ns = at_ns

    def _arm(self, kind: str, at_ns: int) -> TimerRequest:
        token = self._tokens.get(kind, 0) + 1
        self._tokens[kind] = token
        return TimerRequest(at_ns=at_ns, kind=kind, token=token)

    def _cancel(self, kind: str) -> None:
        self._tokens[kind] = self._tokens.get(kind, 0) + 1

    def _timer_current(self, kind: str, token: int) -> bool:
        return self._tokens.get(kind, 0) == token

    def _take_crypto_ns(self) -> int:
        """Debit crypto bits accumulated since the last call; return the
        cycle cost of that work on the high-frequency clock."""
        aes_b, sha_b, aes_blk, sha_blk = self._meter_marks
        d_aes_bytes = self.meter.aes_bytes - aes_b
        d_sha_bytes = self.meter.sha_bytes - sha_b
        d_aes_blocks = self.meter.aes_blocks - aes_blk
        d_sha_blocks = self.meter.sha_blocks - sha_blk
        self._meter_marks = (
            self.meter.aes_bytes, self.meter.sha_bytes,
            self.meter.aes_blocks, self.meter.sha_blocks,
        )
        if d_aes_bytes:
            self.ledger.debit_bits("aes", d_aes_bytes * 8)
        if d_sha_bytes:
            self.ledger.debit_bits("sha", d_sha_bytes * 8)
        cycles = (
            d_sha_blocks * self.timings.sha_cycles_per_block
            + d_aes_blocks * self.timings.aes_cycles_per_block
        )
        return self.clock.hf_cycles_to_ns(cycles) if cycles else 0

    def _send(self, data: bytes, start_ns: int, out: DeviceOutput) -> int:
        """Charge crypto-then-bus time and schedule the datagram; returns
        the completion time."""
        crypto_ns = self._take_crypto_ns()
        spi = self.power.spi_ns(len(data))
        self.ledger.debit_bits("spi", len(data) * 8)
        done = max(start_ns, self._busy_until_ns) + crypto_ns + spi
        self._busy_until_ns = done
        out.sends.append(Outgoing(at_ns=done, data=data))
        return done

    def _fresh_detector(self) -> None:
        self._detector = TapDetector(self.detector_config)

    def _feed_detector(self, level: bool, tick: int):
        # A tick jump means the touch source was quiet in between; whatever
        # fragment the detector held could never finalize, so drop it.
        if self._last_touch_tick is not None and tick != self._last_touch_tick + 1:
            self._fresh_detector()
        self._last_touch_tick = tick
        return self._detector.sample(level, tick)

    def _session_teardown(self) -> None:
        for kind in ("retransmit", "auth_stall", "sf_window", "ack_timeout",
                     "verify_done", "execute_done", "woken_timeout", "connect_beacon"):
            self._cancel(kind)
        self.machine = None
        self.channel = None
        self._challenge = None
        self._pending_result = None

    def _abort_to_idle(self, at_ns: int, reason: str, out: DeviceOutput) -> None:
        self.events.append((at_ns, f"abort:{reason}"))
        self._session_teardown()
        self._change_state(DeviceState.IDLE, at_ns)
        self._fresh_detector()

    # --------------------------------------------------------------- inputs

    def on_touch_level(self, level: bool, tick: int, now_ns: int) -> DeviceOutput:
        out = DeviceOutput()
        self._accrue_to(now_ns)
        if self.state is DeviceState.IDLE:
            emitted = self._feed_detector(level, tick)
            if isinstance(emitted, TapPattern):
                matcher = tapcode.match if self.config.wake_match_gaps else tapcode.match_count_only
                if matcher(emitted, self.config.wake_pattern):
                    self._wake(now_ns, out)
        elif self.state is DeviceState.AWAIT_SECOND_FACTOR:
            emitted = self._feed_detector(level, tick)
            if isinstance(emitted, TapPattern):
                self._on_observed_pattern(emitted, now_ns, out)
        # Other states ignore touch; detectors are rebuilt on entry to a
        # sampling state, so tick gaps never trip the continuity check.
        return out

    def on_datagram(self, data: bytes, now_ns: int) -> DeviceOutput:
        out = DeviceOutput()
        self._accrue_to(now_ns)

        if self.state is DeviceState.IDLE:
            if self.config.radio_on_in_idle:
                # Ablation: an always-on receiver burns an active window per
                # datagram. Charged as Woken time to keep state accounting whole.
                dt = self.power.spi_ns(len(data))
                self.ledger.accrue(DeviceState.WOKEN, dt)
                self.ledger.debit_bits("spi", len(data) * 8)
                self._last_accrued_ns = now_ns + dt
            return out

        if self.state is DeviceState.WOKEN:
            if wire.is_control_datagram(data):
                try:
                    kind, _ = wire.decode_control(data)
                except wire.WireError:
                    return out
                if kind == wire.CTRL_START_AUTH:
                    self._begin_first_factor(now_ns, out)
            return out

        if self.state in (DeviceState.FIRST_FACTOR, DeviceState.AWAIT_SECOND_FACTOR,
                          DeviceState.NOTIFYING):
            if wire.is_control_datagram(data):
                return out
            try:
                records = wire.decode_datagram(data)
            except wire.WireError:
                return out
            arrival_done = max(now_ns, self._busy_until_ns) + self.power.spi_ns(len(data))
            self.ledger.debit_bits("spi", len(data) * 8)
            self._busy_until_ns = arrival_done
            self._process_records(records, arrival_done, out)
            # Verify-only steps (no reply flight) still cost cycles.
            self._busy_until_ns += self._take_crypto_ns()
            return out

        return out  # VERIFYING, EXECUTING, LOCKOUT: unit busy or locked

    def on_timer(self, kind: str, token: int, now_ns: int) -> DeviceOutput:
        out = DeviceOutput()
        if not self._timer_current(kind, token):
            return out
        self._accrue_to(now_ns)

        if kind == "woken_timeout" and self.state is DeviceState.WOKEN:
            self._abort_to_idle(now_ns, "woken_timeout", out)
        elif kind == "connect_beacon" and self.state is DeviceState.WOKEN:
            # The announce frame is fire-and-forget, so repeat it while
            # waiting; a lost first copy must not strand the session.
            self._send(wire.encode_connect(self.config.psk_identity), now_ns, out)
            out.timers.append(
                self._arm("connect_beacon", now_ns + _s_to_ns(self.config.connect_beacon_s))
            )
        elif kind == "auth_stall":
            self._abort_to_idle(now_ns, "auth_stall", out)
        elif kind == "retransmit" and self.state is DeviceState.FIRST_FACTOR:
            self._on_retransmit_timer(now_ns, out)
        elif kind == "sf_window" and self.state is DeviceState.AWAIT_SECOND_FACTOR:
            self.events.append((now_ns, "second_factor:timeout"))
            self._challenge_verdict(False, now_ns, out, skip_verify_delay=True)
        elif kind == "verify_done" and self.state is DeviceState.VERIFYING:
            self._notify(now_ns, out)
        elif kind == "ack_timeout" and self.state is DeviceState.NOTIFYING:
            self._on_ack_timeout(now_ns, out)
        elif kind == "execute_done" and self.state is DeviceState.EXECUTING:
            self.events.append((now_ns, "execute:done"))
            self._session_teardown()
            self._change_state(DeviceState.IDLE, now_ns)
            self._fresh_detector()
        elif kind == "lockout_end" and self.state is DeviceState.LOCKOUT:
            self.events.append((now_ns, "lockout:end"))
            self._failures = 0
            self._change_state(DeviceState.IDLE, now_ns)
            self._fresh_detector()
        return out

    # ---------------------------------------------------------- transitions

    def _wake(self, now_ns: int, out: DeviceOutput) -> None:
        self.events.append((now_ns, "wake"))
        self._change_state(DeviceState.WOKEN, now_ns)
        self._busy_until_ns = now_ns
        self._send(wire.encode_connect(self.config.psk_identity), now_ns, out)
        out.timers.append(
            self._arm("woken_timeout", now_ns + _s_to_ns(self.config.woken_timeout_s))
        )
        out.timers.append(
            self._arm("connect_beacon", now_ns + _s_to_ns(self.config.connect_beacon_s))
        )

    def _begin_first_factor(self, now_ns: int, out: DeviceOutput) -> None:
        self._cancel("woken_timeout")
        self._cancel("connect_beacon")
        self._change_state(DeviceState.FIRST_FACTOR, now_ns)
        self.auth_started_ns = now_ns
        self.meter = CryptoMeter()
        self._meter_marks = (0, 0, 0, 0)
        self.machine = ClientHandshake(
            self.config.psk_identity, self.config.psk, self.rng, meter=self.meter
        )
        self._busy_until_ns = now_ns + self.timings.first_factor_overhead_ns
        records = self.machine.start()
        done = self._send(wire.encode_datagram(records), self._busy_until_ns, out)
        self._retransmits = 0
        out.timers.append(self._arm("retransmit", done + _s_to_ns(1.0)))
        out.timers.append(
            self._arm("auth_stall", now_ns + _s_to_ns(self.config.handshake_timeout_s))
        )

    def _on_retransmit_timer(self, now_ns: int, out: DeviceOutput) -> None:
        assert self.machine is not None
        if self.machine.phase is ClientPhase.ESTABLISHED:
            return
        if self._retransmits >= 3:
            self._abort_to_idle(now_ns, "handshake_timeout", out)
            return
        self._retransmits += 1
        records = self.machine.retransmit()
        if records:
            done = self._send(wire.encode_datagram(records), now_ns, out)
            self.events.append((now_ns, f"retransmit:{self._retransmits}"))
            out.timers.append(self._arm("retransmit", done + _s_to_ns(1.0)))

    def _process_records(self, records: list[wire.Record], start_ns: int, out: DeviceOutput) -> None:
        assert self.machine is not None
        replies: list[wire.Record] = []
        done = start_ns
        for record in records:
            if self.state is DeviceState.IDLE:
                break
            if record.content_type == wire.CT_APPDATA:
                done = self._on_app_record(record, done, out)
                continue
            result = self.machine.step(record)
            replies.extend(result.records)
            if result.event is StepEvent.ESTABLISHED:
                self.channel = SessionChannel.for_machine(self.machine)
                self.events.append((start_ns, "handshake:established"))
                self._cancel("retransmit")
                self._cancel("auth_stall")
                out.timers.append(self._arm(
                    "auth_stall", start_ns + _s_to_ns(self.config.handshake_timeout_s)
                ))
            elif result.event is StepEvent.FAILED:
                reason = type(result.error).__name__ if result.error else "peer_alert"
                if replies:
                    self._send(wire.encode_datagram(replies), done, out)
                    replies = []
                self.handshake_payload_bytes = self.machine.payload_bytes_sent
                self.handshake_wire_bytes = self.machine.wire_bytes_sent
                self.buffer_peak = max(self.buffer_peak, self.machine.buffer_peak)
                self._abort_to_idle(done, f"handshake_failed:{reason}", out)
                return
        if replies:
            done = self._send(wire.encode_datagram(replies), done, out)
            self._cancel("retransmit")
            if self.machine and self.machine.phase is not ClientPhase.ESTABLISHED:
                out.timers.append(self._arm("retransmit", done + _s_to_ns(1.0)))
        if self.machine:
            self.handshake_payload_bytes = self.machine.payload_bytes_sent
            self.handshake_wire_bytes = self.machine.wire_bytes_sent
            self.buffer_peak = max(self.buffer_peak, self.machine.buffer_peak)

    def _on_app_record(self, record: wire.Record, start_ns: int, out: DeviceOutput) -> int:
        if self.channel is None:
            return start_ns  # sealed data before establishment: drop
        try:
            plaintext = self.channel.open(record)
        except ReplayDetected:
            self.events.append((start_ns, "replay_dropped"))
            return start_ns
        except AuthFailure:
            # Tampered traffic on the session channel is fatal to the session.
            self.events.append((start_ns, "channel_auth_failure"))
            assert self.machine is not None
            alert = self.machine.emit_alert(wire.ALERT_BAD_RECORD_MAC)
            done = self._send(wire.encode_datagram([alert]), start_ns, out)
            self._abort_to_idle(done, "channel_tamper", out)
            return done
        done = max(start_ns, self._busy_until_ns) + self._take_crypto_ns()
        self._busy_until_ns = done
        try:
            message = wire.decode_app_message(plaintext)
        except wire.WireError:
            return done
        if message.kind == wire.APP_CHALLENGE and self.state is DeviceState.FIRST_FACTOR:
            self._on_challenge(message, done, out)
        elif message.kind == wire.APP_AUTHORIZE and self.state is DeviceState.FIRST_FACTOR:
            self._on_authorize(message, done, out)
        elif message.kind == wire.APP_RESULT_ACK and self.state is DeviceState.NOTIFYING:
            self._on_result_ack(message, done, out)
        return done

    def _on_challenge(self, message: wire.AppMessage, at_ns: int, out: DeviceOutput) -> None:
        if not self.config.second_factor_enabled:
            return
        self._cancel("auth_stall")
        try:
            pattern = TapPattern.from_text(message.pattern_text)
        except ValueError:
            return
        self._challenge = OtpChallenge(
            pattern=pattern, nonce=message.nonce, expiry_ticks=message.window_ticks
        )
        self._dose_milli = message.dose_milli
        self.events.append((at_ns, "challenge:received"))
        self._change_state(DeviceState.AWAIT_SECOND_FACTOR, at_ns)
        self._fresh_detector()
        window_ns = self.clock.lclk_ticks_to_ns(message.window_ticks)
        out.timers.append(self._arm("sf_window", at_ns + window_ns))

    def _on_authorize(self, message: wire.AppMessage, at_ns: int, out: DeviceOutput) -> None:
        if self.config.second_factor_enabled:
            return  # a lone first factor cannot authorize this configuration
        self._cancel("auth_stall")
        self._dose_milli = message.dose_milli
        self._pending_result = (True, message.nonce)
        self.events.append((at_ns, "authorize:received"))
        self._notify(at_ns, out)

    def _on_observed_pattern(self, observed: TapPattern, now_ns: int, out: DeviceOutput) -> None:
        if self._challenge is None:
            return
        self._cancel("sf_window")
        self.events.append((now_ns, f"second_factor:observed:{observed.to_text()}"))
        accepted = tapcode.match(observed, self._challenge.pattern)
        self._challenge_verdict(accepted, now_ns, out)

    def _challenge_verdict(
        self, accepted: bool, now_ns: int, out: DeviceOutput, skip_verify_delay: bool = False
    ) -> None:
        assert self._challenge is not None
        nonce = self._challenge.nonce
        self._challenge = None  # single-use, consumed whatever the outcome
        if accepted:
            self._failures = 0
        else:
            self._failures += 1
        self._pending_result = (accepted, nonce)
        self.events.append((now_ns, f"second_factor:{'accept' if accepted else 'reject'}"))
        if skip_verify_delay:
            self._notify(now_ns, out)
        else:
            self._change_state(DeviceState.VERIFYING, now_ns)
            out.timers.append(self._arm("verify_done", now_ns + self.timings.verify_ns))

    def _notify(self, now_ns: int, out: DeviceOutput) -> None:
        assert self._pending_result is not None and self.channel is not None
        accepted, nonce = self._pending_result
        self._change_state(DeviceState.NOTIFYING, now_ns)
        record = self.channel.seal(wire.encode_auth_result(accepted, nonce))
        done = self._send(wire.encode_datagram([record]), now_ns, out)
        self._notify_retries = 0
        out.timers.append(self._arm("ack_timeout", done + _s_to_ns(1.0)))

    def _on_ack_timeout(self, now_ns: int, out: DeviceOutput) -> None:
        if self._notify_retries >= 3 or self.channel is None:
            # Give up without executing: no confirmed receipt, no dose.
            self._finish_session(acknowledged=False, at_ns=now_ns, out=out)
            return
        self._notify_retries += 1
        assert self._pending_result is not None
        accepted, nonce = self._pending_result
        record = self.channel.seal(wire.encode_auth_result(accepted, nonce))
        done = self._send(wire.encode_datagram([record]), now_ns, out)
        self.events.append((now_ns, f"notify_retry:{self._notify_retries}"))
        out.timers.append(self._arm("ack_timeout", done + _s_to_ns(1.0)))

    def _on_result_ack(self, message: wire.AppMessage, at_ns: int, out: DeviceOutput) -> None:
        assert self._pending_result is not None
        accepted, nonce = self._pending_result
        if message.nonce != nonce:
            return
        self._cancel("ack_timeout")
        self._finish_session(acknowledged=True, at_ns=at_ns, out=out)

    def _finish_session(self, acknowledged: bool, at_ns: int, out: DeviceOutput) -> None:
        assert self._pending_result is not None
        accepted, _ = self._pending_result
        if accepted and acknowledged:
            self._change_state(DeviceState.EXECUTING, at_ns)
            self.executions.append((at_ns, self._dose_milli))
            self.events.append((at_ns, f"execute:dose_milli={self._dose_milli}"))
            out.timers.append(self._arm("execute_done", at_ns + self.timings.execute_ns))
            return
        if not accepted and self._failures >= self.config.max_failed_attempts:
            self._session_teardown()
            self._change_state(DeviceState.LOCKOUT, at_ns)
            self.events.append((at_ns, "lockout:start"))
            out.timers.append(self._arm("lockout_end", at_ns + _s_to_ns(self.config.lockout_s)))
            return
        self._abort_to_idle(at_ns, "session_closed", out)
