"""Scenario files: one structured-text description of a simulated run — the
patient registry, the device setup, link and adversary behavior, a timed
user script, and the expectations the run must meet.

The user script models the human: they tap the implant awake, type a dose
request into the phone, read the tap code off the SMS that arrives, and tap
it in after a reaction delay. The script never sees relay traffic; its only
information channels are the SMS outbox and its own intent.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import tomli

from imdauth.device import Device, DeviceConfig, DeviceTimings, PowerParams
from imdauth.server import (
    PatientRecord,
    ServerCore,
    TransactionLog,
    TransactionRecord,
    registry_from_dict,
)
from imdauth.simnet import (
    AdversaryMode,
    AdversaryPolicy,
    LinkConfig,
    World,
    rng_stream,
)
from imdauth.tapcode import TapPattern, render_waveform


class ScenarioError(ValueError):
    """The scenario text is malformed or self-contradictory."""


class ExpectationFailed(AssertionError):
    def __init__(self, failures: list[str]):
        super().__init__("; ".join(failures))
        self.failures = failures


@dataclass
class Scenario:
    title: str
    seed: int
    horizon_s: float
    device_table: dict
    server_table: dict
    link: LinkConfig
    adversary: AdversaryPolicy
    registry: dict[str, PatientRecord]
    user_steps: list[dict]
    expect: dict
    raw: dict


_USER_ACTIONS = {"wake", "tap", "request", "tap_code"}


def scenario_from_text(text: str) -> Scenario:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ScenarioError(f"bad scenario file: {exc}") from exc
    return scenario_from_dict(data)


def scenario_from_dict(data: dict) -> Scenario:
    try:
        registry = registry_from_dict(data)
    except (ValueError, KeyError, TypeError) as exc:
        raise ScenarioError(f"bad patient table: {exc}") from exc
    if not registry:
        raise ScenarioError("scenario defines no patients")

    device_table = dict(data.get("device", {}))
    identity = device_table.get("identity")
    if identity is None:
        if len(registry) != 1:
            raise ScenarioError("device.identity required with multiple patients")
        identity = next(iter(registry))
        device_table["identity"] = identity
    if identity not in registry:
        raise ScenarioError(f"device identity {identity!r} not in patient table")

    link_table = data.get("link", {})
    try:
        link = LinkConfig(
            loss_rate=float(link_table.get("loss_rate", 0.0)),
            delay_ns=int(link_table.get("delay_ns", 5_000_000)),
            jitter_ns=int(link_table.get("jitter_ns", 0)),
            bandwidth_bps=int(link_table.get("bandwidth_bps", 125_000)),
        )
    except (ValueError, TypeError) as exc:
        raise ScenarioError(f"bad link table: {exc}") from exc

    adversary_table = data.get("adversary", {})
    mode_name = adversary_table.get("mode", "honest")
    try:
        mode = AdversaryMode(mode_name)
    except ValueError as exc:
        raise ScenarioError(f"unknown adversary mode {mode_name!r}") from exc
    try:
        adversary = AdversaryPolicy(
            mode=mode,
            replay_buffer_size=int(adversary_table.get("replay_buffer_size", 32)),
            replay_delay_ns=int(round(float(adversary_table.get("replay_delay_s", 2.0)) * 1e9)),
            tamper_rate=float(adversary_table.get("tamper_rate", 1.0)),
            tamper_sealed_only=bool(adversary_table.get("tamper_sealed_only", True)),
            inject_rate_hz=float(adversary_table.get("inject_rate_hz", 20.0)),
            spam_count=int(adversary_table.get("spam_count", 0)),
            spam_duration_s=float(adversary_table.get("spam_duration_s", 1.0)),
        )
    except (ValueError, TypeError) as exc:
        raise ScenarioError(f"bad adversary table: {exc}") from exc

    user_steps = data.get("user", [])
    if not isinstance(user_steps, list):
        raise ScenarioError("user script must be an array of tables")
    for step in user_steps:
        action = step.get("action")
        if action not in _USER_ACTIONS:
            raise ScenarioError(f"unknown user action {action!r}")
        if action in ("wake", "tap", "request") and "at_s" not in step:
            raise ScenarioError(f"user action {action!r} needs at_s")
        if action == "request" and "dose_milli" not in step:
            raise ScenarioError("request needs dose_milli")
        if action == "tap" and "pattern" not in step:
            raise ScenarioError("tap needs pattern")

    try:
        seed = int(data.get("seed", 0))
        horizon_s = float(data.get("horizon_s", 120.0))
    except (ValueError, TypeError) as exc:
        raise ScenarioError(f"bad scalar: {exc}") from exc
    if horizon_s <= 0:
        raise ScenarioError("horizon_s must be positive")

    return Scenario(
        title=str(data.get("title", "untitled")),
        seed=seed,
        horizon_s=horizon_s,
        device_table=device_table,
        server_table=dict(data.get("server", {})),
        link=link,
        adversary=adversary,
        registry=registry,
        user_steps=list(user_steps),
        expect=dict(data.get("expect", {})),
        raw=data,
    )


def apply_override(data: dict, dotted_key: str, raw_value: str) -> None:
    """CLI override: dotted path into the scenario dict, TOML-typed value."""
    try:
        value = tomli.loads(f"v = {raw_value}")["v"]
    except tomli.TOMLDecodeError:
        value = raw_value  # bare string
    node = data
    parts = dotted_key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ScenarioError(f"override path {dotted_key!r} crosses a non-table")
    node[parts[-1]] = value


# ---------------------------------------------------------------- building


def build_device(sc: Scenario) -> Device:
    table = sc.device_table
    identity = table["identity"]
    patient = sc.registry[identity]
    wake_text = table.get("wake_pattern", "T.T.T.T")
    try:
        wake = TapPattern.from_text(wake_text)
    except ValueError as exc:
        raise ScenarioError(f"bad wake pattern: {exc}") from exc
    try:
        config = DeviceConfig(
            psk_identity=identity.encode("ascii"),
            psk=patient.psk,
            wake_pattern=wake,
            second_factor_enabled=bool(table.get("second_factor", patient.second_factor)),
            second_factor_window_s=float(table.get("second_factor_window_s", 30.0)),
            max_failed_attempts=int(table.get("max_failed_attempts", 3)),
            lockout_s=float(table.get("lockout_s", 60.0)),
            woken_timeout_s=float(table.get("woken_timeout_s", 10.0)),
            handshake_timeout_s=float(table.get("handshake_timeout_s", 10.0)),
            wake_match_gaps=bool(table.get("wake_match_gaps", False)),
            radio_on_in_idle=bool(table.get("radio_on_in_idle", False)),
        )
    except (ValueError, TypeError) as exc:
        raise ScenarioError(f"bad device table: {exc}") from exc
    timings = DeviceTimings()
    if "first_factor_overhead_ns" in table:
        timings = DeviceTimings(first_factor_overhead_ns=int(table["first_factor_overhead_ns"]))
    return Device(
        config,
        rng=rng_stream(sc.seed, "device"),
        power=PowerParams(),
        timings=timings,
    )


def build_world(sc: Scenario, wire_script: bool = True) -> World:
    device = build_device(sc)
    server = ServerCore(
        sc.registry,
        rng=rng_stream(sc.seed, "server"),
        log=TransactionLog(),
        challenge_window_s=float(sc.server_table.get("challenge_window_s", 30.0)),
        session_deadline_s=float(sc.server_table.get("session_deadline_s", 120.0)),
        otp_min_taps=int(sc.server_table.get("otp_min_taps", 3)),
        otp_max_taps=int(sc.server_table.get("otp_max_taps", 6)),
    )
    world = World(
        seed=sc.seed,
        device=device,
        server=server,
        link=sc.link,
        adversary=sc.adversary,
    )
    if wire_script:
        _wire_user_script(sc, world)
    return world


def _wire_user_script(sc: Scenario, world: World) -> None:
    device = world.device
    patient = sc.registry[sc.device_table["identity"]]
    tap_code_steps: deque = deque(
        step for step in sc.user_steps if step["action"] == "tap_code"
    )

    def schedule_pattern(pattern: TapPattern, at_ns: int) -> None:
        start_tick = device.clock.ns_to_lclk_ticks(at_ns) + 1
        world.schedule_waveform(
            start_tick, render_waveform(pattern, device.detector_config)
        )

    def on_sms(message) -> None:
        if not getattr(message, "pattern_text", ""):
            return
        if not tap_code_steps:
            return
        step = tap_code_steps.popleft()
        text = step.get("override", message.pattern_text)
        try:
            pattern = TapPattern.from_text(text)
        except ValueError as exc:
            raise ScenarioError(f"bad tap_code override: {exc}") from exc
        reaction_ns = int(round(float(step.get("reaction_s", 2.0)) * 1e9))
        schedule_pattern(pattern, world.clock.now_ns + reaction_ns)

    world.on_sms(on_sms)

    for step in sc.user_steps:
        action = step["action"]
        if action == "tap_code":
            continue
        at_ns = int(round(float(step["at_s"]) * 1e9))
        if action == "wake":
            schedule_pattern(device.config.wake_pattern, at_ns)
        elif action == "tap":
            try:
                pattern = TapPattern.from_text(step["pattern"])
            except ValueError as exc:
                raise ScenarioError(f"bad tap pattern: {exc}") from exc
            schedule_pattern(pattern, at_ns)
        elif action == "request":
            world.schedule_request(
                at_ns,
                str(step.get("secret", patient.user_secret)),
                int(step["dose_milli"]),
            )


# ----------------------------------------------------------------- running


@dataclass
class RunResult:
    scenario: Scenario
    world: World
    records: list[TransactionRecord]
    outcomes: list[str]
    executions: list[tuple[int, int]]
    auth_latency_s: Optional[float]
    first_factor_energy_j: Optional[float]
    handshake_established: bool
    lockout: bool
    ledger: dict
    sms: list[dict]
    expectation_failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.expectation_failures


def run_scenario(sc: Scenario) -> RunResult:
    world = build_world(sc)
    world.run(sc.horizon_s)
    return collect_result(sc, world)


def collect_result(sc: Scenario, world: World) -> RunResult:
    """Grade a world against the scenario's expectations; also usable as a
    point-in-time snapshot of a live, partially run world."""
    device = world.device
    server = world.server

    auth_latency_s: Optional[float] = None
    energy: Optional[float] = None
    if device.auth_started_ns is not None and device.executing_entered_ns is not None:
        latency_ns = device.executing_entered_ns - device.auth_started_ns
        auth_latency_s = latency_ns / 1e9
        # From auth start to execution the device never leaves active states,
        # so the segment energy is exactly active power times elapsed time.
        energy = device.power.active_w * auth_latency_s

    result = RunResult(
        scenario=sc,
        world=world,
        records=list(server.log.records),
        outcomes=[r.final_outcome for r in server.log.records],
        executions=list(device.executions),
        auth_latency_s=auth_latency_s,
        first_factor_energy_j=energy,
        handshake_established=any(e == "handshake:established" for _, e in device.events),
        lockout=any(e == "state:lockout" for _, e in device.events),
        ledger=device.ledger.snapshot(),
        sms=[
            {"to": m.to, "body": m.body, "at_ns": m.at_ns, "pattern_text": m.pattern_text}
            for m in server.sms_outbox
        ],
    )
    result.expectation_failures = check_expectations(sc.expect, result)
    return result


def check_expectations(expect: dict, result: RunResult) -> list[str]:
    failures: list[str] = []

    def check(name: str, actual, wanted) -> None:
        if actual != wanted:
            failures.append(f"{name}: expected {wanted!r}, got {actual!r}")

    if "outcome" in expect:
        if len(result.outcomes) != 1:
            failures.append(f"outcome: expected exactly one record, got {result.outcomes!r}")
        else:
            check("outcome", result.outcomes[0], expect["outcome"])
    if "outcomes" in expect:
        check("outcomes", result.outcomes, list(expect["outcomes"]))
    if "device_executions" in expect:
        check("device_executions", len(result.executions), int(expect["device_executions"]))
    if "handshake_established" in expect:
        check("handshake_established", result.handshake_established,
              bool(expect["handshake_established"]))
    if "lockout" in expect:
        check("lockout", result.lockout, bool(expect["lockout"]))
    if "log_verifies" in expect and expect["log_verifies"]:
        try:
            result.world.server.log.verify()
        except Exception as exc:
            failures.append(f"log_verifies: {exc}")
    if "auth_latency_s" in expect:
        bounds = expect["auth_latency_s"]
        if result.auth_latency_s is None:
            failures.append("auth_latency_s: no completed authentication")
        else:
            if "min" in bounds and result.auth_latency_s < float(bounds["min"]):
                failures.append(
                    f"auth_latency_s: {result.auth_latency_s:.3f} below {bounds['min']}"
                )
            if "max" in bounds and result.auth_latency_s > float(bounds["max"]):
                failures.append(
                    f"auth_latency_s: {result.auth_latency_s:.3f} above {bounds['max']}"
                )
    if expect.get("otp_hidden_from_relay"):
        texts = [r.otp_pattern_text for r in result.records if r.otp_pattern_text]
        if not texts:
            failures.append("otp_hidden_from_relay: no challenge was issued")
        captured = result.world.relay.captured
        if not captured:
            failures.append("otp_hidden_from_relay: relay captured nothing to scan")
        for text in texts:
            needle = text.encode("ascii")
            for _, _, datagram in captured:
                if needle in datagram:
                    failures.append(f"otp_hidden_from_relay: {text!r} visible on relay path")
                    break
    if "sessions" in expect:
        check("sessions", result.world.server.sessions_begun, int(expect["sessions"]))
    return failures


def run_scenario_text(text: str) -> RunResult:
    return run_scenario(scenario_from_text(text))
