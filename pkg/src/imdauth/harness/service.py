"""Live-session service: a small HTTP/WS surface that lets a browser act as
the patient's phone against a simulated implant and server.

Each session owns one simulated world and is advanced single-threadedly on
the event loop; tap edges arriving over the WebSocket go into the session's
quantizer queue and take effect when the clock next advances (message-passing
only, no shared mutable simulation state). Interactive sessions normally run
pinned one-to-one to wall time so human taps are meaningful; a session
created with time_scale 0 is advanced explicitly through POST .../advance,
which is what automated clients use to run fast.

The service carries no authentication of its own: the protocol under study
runs inside the simulation, not on this API.
"""

from __future__ import annotations

import asyncio
import itertools
import time
from contextlib import asynccontextmanager
from pathlib import Path
from typing import Literal, Optional

from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect
from fastapi.middleware.cors import CORSMiddleware
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from imdauth.device import DeviceState
from imdauth.harness.report import scenario_report
from imdauth.harness.taps import TapQuantizer
from imdauth.scenario import (
    Scenario,
    ScenarioError,
    apply_override,
    build_world,
    collect_result,
    scenario_from_dict,
)

import tomli

DEFAULT_SCENARIO_TEXT = """
title = "interactive session"
seed = 1
horizon_s = 300.0

[[patient]]
identity = "imd-001"
psk_hex = "000102030405060708090a0b0c0d0e0f"
phone = "+15550001111"
user_secret = "open-sesame"
second_factor = true

[patient.prescription]
min_dose_milli = 100
max_dose_milli = 5000
max_daily_doses = 4
units = "milli-units"

[device]
wake_pattern = "T.T.T.T"
"""

_SAMPLING_STATES = (DeviceState.IDLE, DeviceState.AWAIT_SECOND_FACTOR)


class CreateSession(BaseModel):
    mode: Literal["interactive", "scripted"] = "interactive"
    scenario_text: Optional[str] = None
    seed: Optional[int] = None
    overrides: dict[str, str] = Field(default_factory=dict)
    secret: Optional[str] = None
    dose_milli: Optional[int] = None
    request_at_s: float = 0.5
    time_scale: float = Field(default=1.0, ge=0.0)


class TapEdge(BaseModel):
    t_ms: float = Field(ge=0.0)
    level: bool


class LiveSession:
    def __init__(self, sid: str, sc: Scenario, body: CreateSession):
        self.id = sid
        self.sc = sc
        self.mode = body.mode
        self.time_scale = body.time_scale
        self.world = build_world(sc, wire_script=(body.mode == "scripted"))
        self.horizon_ns = int(round(sc.horizon_s * 1e9))
        self.quantizer = TapQuantizer(self.world.device.clock)
        self._wall_t0_ns = time.monotonic_ns()
        self._pump: Optional[asyncio.Task] = None

        if self.mode == "scripted":
            self.world.run(sc.horizon_s)
        elif body.dose_milli is not None:
            if body.secret is None:
                raise ScenarioError("a dose request needs the care-team secret")
            self.world.schedule_request(
                int(round(body.request_at_s * 1e9)), body.secret, body.dose_milli
            )

    # ------------------------------------------------------------- clocking

    @property
    def done(self) -> bool:
        return self.world.clock.now_ns >= self.horizon_ns

    def advance_to_ns(self, t_ns: int) -> None:
        target_ns = min(t_ns, self.horizon_ns)
        if target_ns <= self.world.clock.now_ns:
            return
        last_tick = self.world.tap_clock.ns_to_lclk_ticks(target_ns)
        for tick, level in self.quantizer.sample_through(last_tick):
            self.world.feed_touch_at(tick, level)
        self.world.advance_to(target_ns)

    def advance_with_wall_clock(self) -> None:
        elapsed = time.monotonic_ns() - self._wall_t0_ns
        self.advance_to_ns(int(elapsed * self.time_scale))

    def start_pump(self) -> None:
        async def pump() -> None:
            while not self.done:
                self.advance_with_wall_clock()
                await asyncio.sleep(0.02)

        self._pump = asyncio.get_running_loop().create_task(pump())

    def stop_pump(self) -> None:
        if self._pump is not None:
            self._pump.cancel()
            self._pump = None

    # --------------------------------------------------------------- inputs

    def push_tap(self, t_ms: float, level: bool) -> dict:
        tick = self.quantizer.push_edge(t_ms, level)
        return {
            "ok": True,
            "tick": tick,
            "sampling": self.world.device.state in _SAMPLING_STATES,
            "device_state": self.world.device.state.value,
        }

    # -------------------------------------------------------------- outputs

    def snapshot(self) -> dict:
        device = self.world.device
        server = self.world.server
        return {
            "id": self.id,
            "mode": self.mode,
            "device_state": device.state.value,
            "sim_time_s": self.world.clock.now_ns / 1e9,
            "horizon_s": self.sc.horizon_s,
            "done": self.done,
            "handshake_established": any(
                e == "handshake:established" for _, e in device.events
            ),
            "executions": len(device.executions),
            "outcomes": [r.final_outcome for r in server.log.records],
            "sms": [
                {"body": m.body, "at_ns": m.at_ns, "pattern_text": m.pattern_text}
                for m in server.sms_outbox
            ],
        }

    def report(self) -> dict:
        return scenario_report(collect_result(self.sc, self.world))


def _parse_scenario(body: CreateSession) -> Scenario:
    text = body.scenario_text or DEFAULT_SCENARIO_TEXT
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ScenarioError(f"bad scenario file: {exc}") from exc
    if body.seed is not None:
        apply_override(data, "seed", str(body.seed))
    for key, value in body.overrides.items():
        apply_override(data, key, value)
    return scenario_from_dict(data)


def create_app() -> FastAPI:
    @asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        for session in app.state.sessions.values():
            session.stop_pump()

    app = FastAPI(title="imd-sim harness", lifespan=lifespan)
    # Local demo service, deliberately unauthenticated: let the browser
    # console talk to it from any origin (e.g. a file:// page or a dev server).
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    app.state.sessions = {}
    counter = itertools.count(1)

    def _get(sid: str) -> LiveSession:
        session = app.state.sessions.get(sid)
        if session is None:
            raise HTTPException(status_code=404, detail=f"no session {sid!r}")
        return session

    @app.post("/sessions", status_code=201)
    async def create_session(body: CreateSession) -> dict:
        try:
            sc = _parse_scenario(body)
            session = LiveSession(f"s{next(counter)}", sc, body)
        except ScenarioError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        app.state.sessions[session.id] = session
        if session.mode == "interactive" and session.time_scale > 0:
            session.start_pump()
        return session.snapshot()

    @app.get("/sessions/{sid}")
    async def get_session(sid: str) -> dict:
        return _get(sid).snapshot()

    @app.post("/sessions/{sid}/advance")
    async def advance_session(sid: str, body: dict) -> dict:
        session = _get(sid)
        if session.mode != "interactive" or session.time_scale != 0:
            raise HTTPException(
                status_code=409,
                detail="only time_scale=0 sessions advance explicitly",
            )
        try:
            to_ms = float(body["to_ms"])
        except (KeyError, TypeError, ValueError) as exc:
            raise HTTPException(status_code=422, detail="body needs to_ms") from exc
        session.advance_to_ns(int(round(to_ms * 1e6)))
        return session.snapshot()

    @app.get("/sessions/{sid}/report")
    async def get_report(sid: str) -> dict:
        return _get(sid).report()

    @app.websocket("/sessions/{sid}/taps")
    async def taps(websocket: WebSocket, sid: str) -> None:
        session = app.state.sessions.get(sid)
        if session is None:
            await websocket.close(code=1008)
            return
        await websocket.accept()
        try:
            while True:
                raw = await websocket.receive_json()
                try:
                    edge = TapEdge.model_validate(raw)
                except ValueError as exc:
                    await websocket.send_json({"ok": False, "error": str(exc)})
                    continue
                await websocket.send_json(session.push_tap(edge.t_ms, edge.level))
        except WebSocketDisconnect:
            return

    # Serve the browser console when its checkout is present (repo layout
    # only; wheel installs simply run the API without it).
    console_dir = Path(__file__).resolve().parents[3] / "frontend"
    if (console_dir / "index.html").is_file():
        app.mount("/console", StaticFiles(directory=console_dir, html=True), name="console")

    return app
