"""Run reports: one versioned, machine-readable document per scenario run,
plus a human-readable rendering of the same facts. Reports are reproducible
under a fixed seed, so goldens can be pinned byte for byte.
"""

from __future__ import annotations

import json

from imdauth.device import DeviceState
from imdauth.scenario import RunResult

REPORT_VERSION = 1


def scenario_report(result: RunResult) -> dict:
    sc = result.scenario
    world = result.world
    device = world.device
    phase_seconds = {
        state.value: device.ledger.state_ns[state] / 1e9 for state in DeviceState
    }
    return {
        "report_version": REPORT_VERSION,
        "title": sc.title,
        "seed": sc.seed,
        "horizon_s": sc.horizon_s,
        "passed": result.passed,
        "expectation_failures": list(result.expectation_failures),
        "outcomes": list(result.outcomes),
        "sessions_begun": world.server.sessions_begun,
        "handshake": {
            "established": result.handshake_established,
            "payload_bytes": device.handshake_payload_bytes,
            "wire_bytes": device.handshake_wire_bytes,
            "buffer_peak_bytes": device.buffer_peak,
        },
        "timing": {
            "auth_latency_s": result.auth_latency_s,
            "first_factor_energy_j": result.first_factor_energy_j,
            "per_phase_s": phase_seconds,
        },
        "energy": result.ledger,
        "device": {
            "state": device.state.value,
            "executions": [
                {"at_ns": t, "dose_milli": dose} for t, dose in result.executions
            ],
            "lockout": result.lockout,
        },
        "link": {
            "up_sent": world.uplink.sent,
            "up_lost": world.uplink.lost,
            "down_sent": world.downlink.sent,
            "down_lost": world.downlink.lost,
        },
        "adversary": {
            "mode": sc.adversary.mode.value,
            "actions": list(world.relay.actions),
            "captured_datagrams": len(world.relay.captured),
        },
        "sms": list(result.sms),
        "log": {
            "entries": [record.to_dict() for record in result.records],
            "head": world.server.log.head,
        },
    }


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def render_text(report: dict) -> str:
    lines = [
        f"scenario : {report['title']} (seed {report['seed']})",
        f"outcomes : {', '.join(report['outcomes']) or 'none'}",
        f"handshake: established={report['handshake']['established']}"
        f" payload={report['handshake']['payload_bytes']}B"
        f" wire={report['handshake']['wire_bytes']}B",
    ]
    latency = report["timing"]["auth_latency_s"]
    if latency is not None:
        lines.append(
            f"auth     : {latency:.3f} s,"
            f" {report['timing']['first_factor_energy_j'] * 1e6:.2f} uJ"
        )
    lines.append(f"energy   : {report['energy']['total_j'] * 1e6:.4f} uJ total")
    if report["adversary"]["mode"] != "honest":
        lines.append(
            f"adversary: {report['adversary']['mode']},"
            f" {len(report['adversary']['actions'])} actions,"
            f" {report['adversary']['captured_datagrams']} captured"
        )
    for failure in report["expectation_failures"]:
        lines.append(f"FAIL     : {failure}")
    lines.append("result   : " + ("PASS" if report["passed"] else "FAIL"))
    return "\n".join(lines) + "\n"
