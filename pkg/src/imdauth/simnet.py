"""Deterministic discrete-event world: a virtual nanosecond clock, lossy
in-order datagram links, the cellphone relay with pluggable adversary
behavior, and the wiring that lets a Device and a ServerCore talk.

Determinism contract: one integer seed fans out into named child RNG streams
(device, server, link, adversary), events fire in (time, insertion) order,
and every RNG draw happens inside an event handler, so a given (seed,
scenario) pair reproduces the same trace byte for byte.

Links deliver in order: a datagram is never scheduled ahead of one accepted
earlier on the same direction, because the record layer's anti-replay
watermark treats reordering as an attack. Loss is silent, as on any datagram
transport.

The adversary owns the relay position only. It is constructed from a policy
and an RNG, is handed nothing but the bytes crossing the relay, and the SMS
outbox lives on the server object where the relay cannot see it: the
two-channel threat model, enforced structurally.
"""

from __future__ import annotations

import hashlib
import heapq
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from random import Random
from typing import Callable, Optional

from imdauth import wire
from imdauth.device import Device, DeviceOutput
from imdauth.server import ServerCore, ServerOutput
from imdauth.tapcode import ClockConfig


def rng_stream(seed: int, name: str) -> Random:
    """Independent child RNG; draws on one stream never shift another."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return Random(int.from_bytes(digest[:8], "big"))


class SimClock:
    def __init__(self) -> None:
        self._now = 0
        self._seq = 0
        self._heap: list[tuple[int, int, str, Callable[[], None]]] = []
        self.trace: list[str] = []

    @property
    def now_ns(self) -> int:
        return self._now

    def schedule(self, at_ns: int, fn: Callable[[], None], label: str = "") -> None:
        if at_ns < self._now:
            raise ValueError(f"cannot schedule at {at_ns} before now {self._now}")
        heapq.heappush(self._heap, (at_ns, self._seq, label, fn))
        self._seq += 1

    def run_until(self, t_end_ns: Optional[int] = None, max_events: int = 5_000_000) -> int:
        """Fire events in (time, insertion) order until the horizon or
        quiescence; returns the number fired."""
        fired = 0
        while self._heap:
            at_ns = self._heap[0][0]
            if t_end_ns is not None and at_ns > t_end_ns:
                break
            _, _, label, fn = heapq.heappop(self._heap)
            self._now = at_ns
            if label:
                self.trace.append(f"{at_ns} {label}")
            fn()
            fired += 1
            if fired > max_events:
                raise RuntimeError("event budget exhausted; runaway schedule")
        if t_end_ns is not None and self._now < t_end_ns:
            self._now = t_end_ns
        return fired


@dataclass(frozen=True)
class LinkConfig:
    loss_rate: float = 0.0
    delay_ns: int = 5_000_000
    jitter_ns: int = 0
    bandwidth_bps: int = 125_000

    def __post_init__(self) -> None:
        if not 0.0 <= self.loss_rate < 1.0:
            raise ValueError("loss_rate must be in [0, 1)")
        if self.bandwidth_bps <= 0:
            raise ValueError("bandwidth must be positive")
        if self.delay_ns < 0 or self.jitter_ns < 0:
            raise ValueError("delays cannot be negative")


class _DirectedLink:
    """One direction of the radio hop: serialization + delay + jitter + loss,
    with first-in-first-out delivery enforced."""

    def __init__(self, config: LinkConfig, rng: Random, clock: SimClock, label: str):
        self.config = config
        self.rng = rng
        self.clock = clock
        self.label = label
        self._last_delivery_ns = 0
        self.sent = 0
        self.lost = 0

    def send(self, data: bytes, deliver: Callable[[bytes], None]) -> None:
        now = self.clock.now_ns
        self.sent += 1
        tx_ns = len(data) * 8 * 1_000_000_000 // self.config.bandwidth_bps
        jitter = self.rng.randrange(self.config.jitter_ns + 1) if self.config.jitter_ns else 0
        if self.config.loss_rate and self.rng.random() < self.config.loss_rate:
            self.lost += 1
            self.clock.schedule(
                now + tx_ns, lambda: None, f"{self.label}:lost len={len(data)}"
            )
            return
        arrival = max(now + tx_ns + self.config.delay_ns + jitter, self._last_delivery_ns)
        self._last_delivery_ns = arrival
        self.clock.schedule(
            arrival, lambda: deliver(data), f"{self.label}:rx len={len(data)}"
        )


class AdversaryMode(Enum):
    HONEST = "honest"
    PASSIVE_CAPTURE = "passive_capture"
    TAMPER = "tamper"
    REPLAY = "replay"
    INJECT = "inject"
    WAKE_SPAM = "wake_spam"


@dataclass(frozen=True)
class AdversaryPolicy:
    mode: AdversaryMode = AdversaryMode.HONEST
    replay_buffer_size: int = 32
    replay_delay_ns: int = 2_000_000_000
    tamper_rate: float = 1.0
    tamper_sealed_only: bool = True
    inject_rate_hz: float = 20.0
    spam_count: int = 0
    spam_duration_s: float = 1.0
    spam_payload: bytes = b"\x01wake-up"

    def __post_init__(self) -> None:
        if not 0.0 <= self.tamper_rate <= 1.0:
            raise ValueError("tamper_rate must be in [0, 1]")
        if self.replay_buffer_size < 1 or self.inject_rate_hz <= 0:
            raise ValueError("bad adversary parameters")


@dataclass
class RelayAction:
    """What the relay wants done with traffic it processed: datagrams to
    forward immediately, and datagrams to originate later."""

    forward: list[bytes] = field(default_factory=list)
    later: list[tuple[int, str, bytes]] = field(default_factory=list)  # (at_ns, direction, data)


class Relay:
    """The cellphone position. Receives relay-path bytes only; applies the
    adversary policy; logs everything it does."""

    def __init__(self, policy: AdversaryPolicy, rng: Random):
        self.policy = policy
        self.rng = rng
        self.captured: list[tuple[int, str, bytes]] = []
        self.actions: list[str] = []
        self._rings: dict[str, deque] = {
            "up": deque(maxlen=policy.replay_buffer_size),
            "down": deque(maxlen=policy.replay_buffer_size),
        }

    def process(self, data: bytes, direction: str, now_ns: int) -> RelayAction:
        mode = self.policy.mode
        action = RelayAction()
        if mode is not AdversaryMode.HONEST:
            self.captured.append((now_ns, direction, data))
        self._rings[direction].append(data)

        if mode is AdversaryMode.TAMPER and self.rng.random() < self.policy.tamper_rate:
            mutated = self._tamper(data)
            if mutated != data:
                self.actions.append(f"{now_ns} tamper:{direction} len={len(data)}")
                action.forward.append(mutated)
                return action
        if mode is AdversaryMode.REPLAY:
            action.later.append((now_ns + self.policy.replay_delay_ns, direction, data))
            self.actions.append(f"{now_ns} replay_queued:{direction}")
        action.forward.append(data)
        return action

    def _tamper(self, data: bytes) -> bytes:
        """Flip one bit of one sealed record; when nothing is sealed (and the
        policy restricts itself to sealed traffic), pass through untouched."""
        try:
            records = wire.decode_datagram(data)
        except wire.WireError:
            # control frames and other non-record traffic
            if self.policy.tamper_sealed_only:
                return data
            return self._flip_raw(data)
        sealed = [i for i, r in enumerate(records) if r.epoch == 1]
        if not sealed:
            if self.policy.tamper_sealed_only:
                return data
            return self._flip_raw(data)
        index = sealed[self.rng.randrange(len(sealed))]
        target = records[index]
        payload = bytearray(target.payload)
        payload[self.rng.randrange(len(payload))] ^= 1 << self.rng.randrange(8)
        records[index] = wire.Record(
            target.content_type, target.epoch, target.sequence, bytes(payload)
        )
        return wire.encode_datagram(records)

    def _flip_raw(self, data: bytes) -> bytes:
        if not data:
            return data
        flipped = bytearray(data)
        flipped[self.rng.randrange(len(flipped))] ^= 1 << self.rng.randrange(8)
        return bytes(flipped)

    def craft_injection(self) -> tuple[str, bytes]:
        """Random bytes or a grammar-aware mutation of captured traffic;
        pure randomness alone under-tests the parsers."""
        direction = "down" if self.rng.random() < 0.8 else "up"
        ring = self._rings[direction]
        style = self.rng.randrange(3) if ring else 0
        if style == 0:
            length = self.rng.randrange(1, 65)
            return direction, self.rng.randbytes(length)
        base = ring[self.rng.randrange(len(ring))]
        if style == 1:
            return direction, self._flip_raw(base)
        cut = self.rng.randrange(1, len(base) + 1)
        return direction, base[:cut]


class World:
    """One device, one server, one adversarial relay, two link directions."""

    def __init__(
        self,
        seed: int,
        device: Device,
        server: ServerCore,
        link: LinkConfig | None = None,
        adversary: AdversaryPolicy | None = None,
        server_hop_ns: int = 5_000_000,
    ):
        self.seed = seed
        self.clock = SimClock()
        self.device = device
        self.server = server
        self.identity = device.config.psk_identity.decode("ascii")
        self.link_config = link or LinkConfig()
        self.adversary = adversary or AdversaryPolicy()
        self.relay = Relay(self.adversary, rng_stream(seed, "adversary"))
        link_rng = rng_stream(seed, "link")
        self.uplink = _DirectedLink(self.link_config, link_rng, self.clock, "up")
        self.downlink = _DirectedLink(self.link_config, link_rng, self.clock, "down")
        self.server_hop_ns = server_hop_ns
        self.sms_hooks: list[Callable[[object], None]] = []
        self._sms_seen = 0
        self.tap_clock = device.clock

    # ------------------------------------------------------------ dispatch

    def _handle_device_output(self, out: DeviceOutput) -> None:
        for timer in out.timers:
            self.clock.schedule(
                timer.at_ns,
                lambda t=timer: self._handle_device_output(
                    self.device.on_timer(t.kind, t.token, self.clock.now_ns)
                ),
                f"device_timer:{timer.kind}",
            )
        for send in out.sends:
            self.clock.schedule(
                send.at_ns,
                lambda d=send.data: self.uplink.send(
                    d, lambda dd: self._into_relay(dd, "up")
                ),
                f"dev_tx len={len(send.data)}",
            )

    def _handle_server_output(self, out: ServerOutput) -> None:
        for timer in out.timers:
            self.clock.schedule(
                timer.at_ns,
                lambda t=timer: self._drain_server(
                    self.server.on_timer(t.kind, t.token, self.clock.now_ns)
                ),
                f"server_timer:{timer.kind}",
            )
        for _identity, data in out.sends:
            self.clock.schedule(
                self.clock.now_ns + self.server_hop_ns,
                lambda d=data: self._into_relay(d, "down"),
                f"srv_tx len={len(data)}",
            )

    def _drain_server(self, out: ServerOutput) -> None:
        self._handle_server_output(out)
        while self._sms_seen < len(self.server.sms_outbox):
            message = self.server.sms_outbox[self._sms_seen]
            self._sms_seen += 1
            for hook in self.sms_hooks:
                hook(message)

    def _into_relay(self, data: bytes, direction: str) -> None:
        action = self.relay.process(data, direction, self.clock.now_ns)
        for datagram in action.forward:
            self._relay_forward(datagram, direction)
        for at_ns, later_direction, datagram in action.later:
            self.clock.schedule(
                at_ns,
                lambda d=datagram, dd=later_direction: self._relay_forward(d, dd),
                f"relay_replay:{later_direction}",
            )

    def _relay_forward(self, data: bytes, direction: str) -> None:
        if direction == "up":
            self.clock.schedule(
                self.clock.now_ns + self.server_hop_ns,
                lambda: self._drain_server(
                    self.server.on_datagram(self.identity, data, self.clock.now_ns)
                ),
                f"srv_rx len={len(data)}",
            )
        else:
            self.downlink.send(
                data,
                lambda d: self._handle_device_output(
                    self.device.on_datagram(d, self.clock.now_ns)
                ),
            )

    # --------------------------------------------------------------- inputs

    def feed_touch_at(self, tick: int, level: bool) -> None:
        """Deliver one touch sample at its tick time (or now, if the clock has
        already moved past it)."""
        at_ns = max(self.tap_clock.lclk_ticks_to_ns(tick), self.clock.now_ns)
        self.clock.schedule(
            at_ns,
            lambda: self._handle_device_output(
                self.device.on_touch_level(level, tick, self.clock.now_ns)
            ),
            "",  # per-tick labels would swamp the trace
        )

    def schedule_waveform(self, start_tick: int, levels: list[bool]) -> None:
        for i, level in enumerate(levels):
            self.feed_touch_at(start_tick + i, level)

    def schedule_request(self, at_ns: int, secret: str, dose_milli: int) -> None:
        self.clock.schedule(
            at_ns,
            lambda: self._drain_server(
                self.server.begin_session(self.identity, secret, dose_milli, self.clock.now_ns)
            ),
            f"user_request dose={dose_milli}",
        )

    def on_sms(self, hook: Callable[[object], None]) -> None:
        self.sms_hooks.append(hook)

    def start_adversary_pumps(self, horizon_ns: int) -> None:
        mode = self.adversary.mode
        if mode is AdversaryMode.WAKE_SPAM and self.adversary.spam_count > 0:
            duration_ns = int(round(self.adversary.spam_duration_s * 1e9))
            step = max(duration_ns // self.adversary.spam_count, 1)
            for i in range(self.adversary.spam_count):
                self.clock.schedule(
                    1 + i * step,
                    lambda: self.downlink.send(
                        self.adversary.spam_payload,
                        lambda d: self._handle_device_output(
                            self.device.on_datagram(d, self.clock.now_ns)
                        ),
                    ),
                    "",
                )
        elif mode is AdversaryMode.INJECT:
            interval_ns = max(int(round(1e9 / self.adversary.inject_rate_hz)), 1)

            def pump() -> None:
                direction, data = self.relay.craft_injection()
                self.relay.actions.append(
                    f"{self.clock.now_ns} inject:{direction} len={len(data)}"
                )
                self._relay_forward(data, direction)
                next_at = self.clock.now_ns + interval_ns
                if next_at <= horizon_ns:
                    self.clock.schedule(next_at, pump, "")

            self.clock.schedule(interval_ns, pump, "inject_pump_start")

    # ------------------------------------------------------------------ run

    def run(self, horizon_s: float, start_pumps: bool = True) -> None:
        horizon_ns = int(round(horizon_s * 1e9))
        if start_pumps:
            self.start_adversary_pumps(horizon_ns)
        self.advance_to(horizon_ns)

    def advance_to(self, t_ns: int) -> None:
        """Run events up to the given instant and bring the device's energy
        accounting to the same point (for incremental, live-driven worlds)."""
        self.clock.run_until(t_ns)
        self.device.sync(self.clock.now_ns)

    # --------------------------------------------------------------- output

    def trace_text(self) -> str:
        lines = list(self.clock.trace)
        lines += [f"{t} device {e}" for t, e in self.device.events]
        lines += [f"{t} server {e}" for t, e in self.server.events]
        lines.sort(key=lambda s: (int(s.split(" ", 1)[0]), s))
        return "\n".join(lines) + "\n"
