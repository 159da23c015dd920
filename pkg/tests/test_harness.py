"""Operator surface: tap quantization, run reports, the CLI, and the live
HTTP/WS session service."""

import json
import pathlib

import pytest
from click.testing import CliRunner
from fastapi.testclient import TestClient

from imdauth.harness.cli import main as cli_main
from imdauth.harness.report import REPORT_VERSION, render_text, scenario_report
from imdauth.harness.service import CreateSession, LiveSession, create_app
from imdauth.harness.taps import TapQuantizer
from imdauth.scenario import run_scenario, scenario_from_text
from imdauth.tapcode import ClockConfig, DetectorConfig, TapPattern, render_waveform

SCENARIO_DIR = pathlib.Path(__file__).resolve().parent.parent / "scenarios"
HAPPY = SCENARIO_DIR / "happy_dual_factor.toml"


def pattern_edges(
    pattern: TapPattern, start_ms: float, clock: ClockConfig | None = None
) -> list[tuple[float, bool]]:
    """Emulate a human: raw level edges that quantize onto the same ticks the
    simulator's rendered waveform occupies."""
    clock = clock or ClockConfig()
    levels = render_waveform(pattern, DetectorConfig())
    start_tick = clock.ms_to_lclk_ticks(start_ms) + 1
    edges = []
    previous = False
    for i, level in enumerate(levels):
        if level != previous:
            t_ms = clock.lclk_ticks_to_ns(start_tick + i) / 1e6 + 1.0
            edges.append((t_ms, level))
            previous = level
    return edges


# ---------------------------------------------------------------- quantizer


def test_quantizer_holds_level_between_edges():
    q = TapQuantizer()
    q.push_edge(0.0, False)
    q.push_edge(60.0, True)  # inside tick window 1
    q.push_edge(160.0, False)  # inside tick window 3
    samples = q.sample_through(5)
    assert samples == [
        (0, False), (1, True), (2, True), (3, False), (4, False), (5, False)
    ]


def test_quantizer_applies_late_edges_to_the_next_sample():
    q = TapQuantizer()
    q.sample_through(10)
    q.push_edge(0.0, True)  # tick 0, long since sampled
    samples = q.sample_through(12)
    assert samples == [(11, True), (12, True)]


def test_quantizer_matches_rendered_waveform():
    # the oracle equivalence: a tap stream quantized at the touch sampling
    # rate must equal the directly rendered waveform, tick for tick
    clock = ClockConfig()
    pattern = TapPattern.from_text("T.T-T.T")
    levels = render_waveform(pattern, DetectorConfig())
    start_ms = 1000.0
    start_tick = clock.ms_to_lclk_ticks(start_ms) + 1

    q = TapQuantizer(clock)
    for t_ms, level in pattern_edges(pattern, start_ms, clock):
        q.push_edge(t_ms, level)
    samples = dict(q.sample_through(start_tick + len(levels) + 5))
    for i, level in enumerate(levels):
        assert samples[start_tick + i] == level, f"tick {start_tick + i}"


def test_quantizer_rejects_negative_timestamps():
    with pytest.raises(ValueError):
        TapQuantizer().push_edge(-1.0, True)


# ------------------------------------------------------------------ reports


def test_report_carries_version_and_core_fields():
    result = run_scenario(scenario_from_text(HAPPY.read_text()))
    report = scenario_report(result)
    assert report["report_version"] == REPORT_VERSION
    assert report["passed"] is True
    assert report["outcomes"] == ["executed"]
    assert report["handshake"]["payload_bytes"] > 0
    assert report["handshake"]["wire_bytes"] > report["handshake"]["payload_bytes"]
    assert report["timing"]["per_phase_s"]["first_factor"] > 0
    assert report["energy"]["total_j"] > 0
    assert report["log"]["entries"][0]["final_outcome"] == "executed"
    text = render_text(report)
    assert "PASS" in text and "executed" in text


def test_report_is_reproducible_under_fixed_seed():
    text = HAPPY.read_text()
    first = scenario_report(run_scenario(scenario_from_text(text)))
    second = scenario_report(run_scenario(scenario_from_text(text)))
    assert first == second


def test_report_matches_pinned_golden():
    golden = pathlib.Path(__file__).parent.parent / "testdata" / "report_happy_dual_factor_seed7.json"
    result = run_scenario(scenario_from_text(HAPPY.read_text()))
    assert json.loads(golden.read_text()) == scenario_report(result)


# ---------------------------------------------------------------------- cli


def test_cli_run_passes_on_happy_scenario(tmp_path):
    runner = CliRunner()
    report_path = tmp_path / "out.json"
    result = runner.invoke(
        cli_main, ["run", str(HAPPY), "--report", str(report_path)]
    )
    assert result.exit_code == 0, result.output
    assert "PASS" in result.output
    written = json.loads(report_path.read_text())
    assert written["outcomes"] == ["executed"]


def test_cli_run_machine_format_is_json():
    runner = CliRunner()
    result = runner.invoke(cli_main, ["run", str(HAPPY), "--format", "machine"])
    assert result.exit_code == 0
    assert json.loads(result.output)["report_version"] == REPORT_VERSION


def test_cli_run_exit_one_on_failed_expectations():
    runner = CliRunner()
    result = runner.invoke(
        cli_main, ["run", str(HAPPY), "-o", "expect.device_executions=5"]
    )
    assert result.exit_code == 1
    assert "FAIL" in result.output


def test_cli_run_exit_two_on_parse_error(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("not really [ toml")
    runner = CliRunner()
    result = runner.invoke(cli_main, ["run", str(bad)])
    assert result.exit_code == 2
    assert "scenario error" in result.stderr


def test_cli_run_seed_override_lands_in_report():
    runner = CliRunner()
    result = runner.invoke(
        cli_main,
        ["run", str(SCENARIO_DIR / "first_factor_only.toml"),
         "--seed", "123", "--format", "machine"],
    )
    assert json.loads(result.output)["seed"] == 123


def test_cli_suite_runs_all_shipped_scenarios():
    runner = CliRunner()
    result = runner.invoke(cli_main, ["suite", str(SCENARIO_DIR)])
    assert result.exit_code == 0, result.output
    for path in SCENARIO_DIR.glob("*.toml"):
        assert path.stem in result.output


# ------------------------------------------------------------------ service


def make_client() -> TestClient:
    return TestClient(create_app())


def test_scripted_session_runs_to_completion():
    with make_client() as client:
        response = client.post(
            "/sessions",
            json={"mode": "scripted", "scenario_text": HAPPY.read_text()},
        )
        assert response.status_code == 201
        body = response.json()
        assert body["done"] is True
        assert body["outcomes"] == ["executed"]
        report = client.get(f"/sessions/{body['id']}/report").json()
        assert report["passed"] is True


def test_unknown_session_is_404():
    with make_client() as client:
        assert client.get("/sessions/nope").status_code == 404
        assert client.get("/sessions/nope/report").status_code == 404


def test_bad_scenario_is_422():
    with make_client() as client:
        response = client.post(
            "/sessions", json={"scenario_text": "title = 3 ["}
        )
        assert response.status_code == 422


def test_dose_request_requires_secret():
    with make_client() as client:
        response = client.post("/sessions", json={"dose_milli": 500, "time_scale": 0})
        assert response.status_code == 422


def test_advance_rejected_on_wall_pinned_session():
    with make_client() as client:
        created = client.post("/sessions", json={"time_scale": 1.0}).json()
        response = client.post(
            f"/sessions/{created['id']}/advance", json={"to_ms": 100}
        )
        assert response.status_code == 409


def test_interactive_session_full_flow_over_http():
    with make_client() as client:
        created = client.post(
            "/sessions",
            json={
                "mode": "interactive",
                "time_scale": 0,
                "secret": "open-sesame",
                "dose_milli": 1500,
                "request_at_s": 2.0,
            },
        )
        assert created.status_code == 201
        sid = created.json()["id"]
        assert created.json()["device_state"] == "idle"

        wake = TapPattern.from_text("T.T.T.T")
        with client.websocket_connect(f"/sessions/{sid}/taps") as ws:
            for t_ms, level in pattern_edges(wake, 500.0):
                ws.send_json({"t_ms": t_ms, "level": level})
                ack = ws.receive_json()
                assert ack["ok"] is True

        snap = client.post(f"/sessions/{sid}/advance", json={"to_ms": 12_000}).json()
        assert snap["handshake_established"] is True
        assert snap["device_state"] == "await_second_factor"
        codes = [m["pattern_text"] for m in snap["sms"] if m["pattern_text"]]
        assert len(codes) == 1

        code = TapPattern.from_text(codes[0])
        with client.websocket_connect(f"/sessions/{sid}/taps") as ws:
            for t_ms, level in pattern_edges(code, 13_000.0):
                ws.send_json({"t_ms": t_ms, "level": level})
                ack = ws.receive_json()
                assert ack["ok"] is True
                assert ack["device_state"] == "await_second_factor"
                assert ack["sampling"] is True

        snap = client.post(f"/sessions/{sid}/advance", json={"to_ms": 30_000}).json()
        assert snap["outcomes"] == ["executed"]
        assert snap["executions"] == 1
        report = client.get(f"/sessions/{sid}/report").json()
        assert report["outcomes"] == ["executed"]


def test_taps_during_first_factor_are_acknowledged_but_ignored():
    with make_client() as client:
        created = client.post(
            "/sessions",
            json={
                "mode": "interactive",
                "time_scale": 0,
                "secret": "open-sesame",
                "dose_milli": 1500,
                "request_at_s": 2.0,
            },
        )
        sid = created.json()["id"]
        with client.websocket_connect(f"/sessions/{sid}/taps") as ws:
            for t_ms, level in pattern_edges(TapPattern.from_text("T.T.T.T"), 500.0):
                ws.send_json({"t_ms": t_ms, "level": level})
                ws.receive_json()
        snap = client.post(f"/sessions/{sid}/advance", json={"to_ms": 7_000}).json()
        assert snap["device_state"] == "first_factor"
        with client.websocket_connect(f"/sessions/{sid}/taps") as ws:
            ws.send_json({"t_ms": 7_010.0, "level": True})
            ack = ws.receive_json()
            assert ack["ok"] is True and ack["sampling"] is False
            ws.send_json({"t_ms": 7_060.0, "level": False})
            ws.receive_json()
        snap = client.post(f"/sessions/{sid}/advance", json={"to_ms": 7_200}).json()
        assert snap["device_state"] == "first_factor"


def test_malformed_tap_message_is_answered_not_fatal():
    with make_client() as client:
        sid = client.post("/sessions", json={"time_scale": 0}).json()["id"]
        with client.websocket_connect(f"/sessions/{sid}/taps") as ws:
            ws.send_json({"wrong": "shape"})
            assert ws.receive_json()["ok"] is False
            ws.send_json({"t_ms": 5.0, "level": True})
            assert ws.receive_json()["ok"] is True


# --------------------------------------- scripted vs interactive equivalence


def test_interactive_taps_reproduce_the_scripted_report():
    text = HAPPY.read_text()
    sc = scenario_from_text(text)
    scripted = scenario_report(run_scenario(sc))

    session = LiveSession(
        "eq", scenario_from_text(text),
        CreateSession(mode="interactive", time_scale=0.0),
    )
    clock = session.world.tap_clock
    # same request as the script
    session.world.schedule_request(2_000_000_000, "open-sesame", 2500)
    # same wake taps as the script (it schedules from at_s = 0.5)
    for t_ms, level in pattern_edges(
        TapPattern.from_text("T.T.T.T"), 500.0, clock
    ):
        session.push_tap(t_ms, level)
    # run until the SMS exists, then tap the code with the script's timing
    session.advance_to_ns(9_000_000_000)
    sms = [m for m in session.world.server.sms_outbox if m.pattern_text]
    assert len(sms) == 1
    reaction_ns = int(3.8 * 1e9)
    start_tick = clock.ns_to_lclk_ticks(sms[0].at_ns + reaction_ns) + 1
    start_ms = clock.lclk_ticks_to_ns(start_tick - 1) / 1e6
    for t_ms, level in pattern_edges(
        TapPattern.from_text(sms[0].pattern_text), start_ms, clock
    ):
        session.push_tap(t_ms, level)
    session.advance_to_ns(session.horizon_ns)

    interactive = session.report()
    assert interactive == scripted
