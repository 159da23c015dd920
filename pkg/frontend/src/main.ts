/**
 * Page wiring: one session, one tap socket, a 500 ms poll loop. Tap timing
 * is captured here with performance.now() and shipped raw; the harness owns
 * quantization so the browser clock never has to agree with the sim clock
 * about tick boundaries.
 */

import { HarnessClient, TapSocket } from "./api.js";
import type { Snapshot } from "./api.js";
import { TapCapture } from "./capture.js";
import { guideSegments, parsePattern, WAKE_PATTERN_TEXT } from "./tapcode.js";
import {
  PhaseTimeline,
  renderConnection,
  renderGuide,
  renderOutcome,
  renderSms,
  renderState,
} from "./view.js";

const $ = (id: string): HTMLElement => {
  const el = document.getElementById(id);
  if (el === null) throw new Error(`missing element #${id}`);
  return el;
};

const params = new URLSearchParams(location.search);
const client = new HarnessClient(params.get("api") ?? location.origin);

const capture = new TapCapture();
const timeline = new PhaseTimeline();
let socket: TapSocket | null = null;
let sessionId: string | null = null;
let epochMs: number | null = null;
let connectionUp = false;
let guidePattern = "";

function showGuide(text: string, label: string): void {
  if (text === guidePattern) return;
  guidePattern = text;
  $("guide-label").textContent = label;
  renderGuide($("guide"), guideSegments(parsePattern(text)));
}

function render(snap: Snapshot): void {
  timeline.push(snap);
  renderState($("device-state"), snap);
  renderSms($("sms-list"), snap);
  renderOutcome($("outcome"), snap);
  timeline.render($("timeline"));
  $("sim-time").textContent = `${snap.sim_time_s.toFixed(1)}s`;
  const latest = snap.sms[snap.sms.length - 1];
  if (latest !== undefined && latest.pattern_text !== "") {
    showGuide(latest.pattern_text, "Tap the code from the SMS:");
  }
}

function sendEdge(level: boolean): void {
  if (socket === null || epochMs === null) return;
  const edge = capture.edge(level, performance.now() - epochMs);
  if (edge !== null) void socket.send(edge);
}

async function start(): Promise<void> {
  const secret = ($("secret") as HTMLInputElement).value;
  const dose = Number(($("dose") as HTMLInputElement).value);
  const snap = await client.createSession({
    secret,
    dose_milli: dose,
    request_at_s: 0.5,
  });
  sessionId = snap.id;
  epochMs = performance.now();
  socket = new TapSocket(client.tapsUrl(snap.id), (url) => new WebSocket(url));
  socket.onConnection = (up) => {
    connectionUp = up;
    renderConnection($("connection"), up);
  };
  socket.connect();
  $("login").classList.add("hidden");
  $("session").classList.remove("hidden");
  showGuide(WAKE_PATTERN_TEXT, "Tap the wake pattern:");
  render(snap);
  poll();
}

function poll(): void {
  setInterval(async () => {
    if (sessionId === null) return;
    try {
      render(await client.getSession(sessionId));
      if (!connectionUp) renderConnection($("connection"), false);
    } catch {
      renderConnection($("connection"), false);
    }
  }, 500);
}

function wireTapPad(): void {
  const pad = $("pad");
  pad.addEventListener("pointerdown", (ev) => {
    ev.preventDefault();
    pad.classList.add("pressed");
    sendEdge(true);
  });
  const release = (): void => {
    pad.classList.remove("pressed");
    sendEdge(false);
  };
  pad.addEventListener("pointerup", release);
  pad.addEventListener("pointercancel", release);
  pad.addEventListener("pointerleave", () => {
    if (capture.isDown) release();
  });
  document.addEventListener("keydown", (ev) => {
    if (ev.code !== "Space" || ev.repeat) return;
    ev.preventDefault();
    pad.classList.add("pressed");
    sendEdge(true);
  });
  document.addEventListener("keyup", (ev) => {
    if (ev.code !== "Space") return;
    ev.preventDefault();
    release();
  });
}

$("start").addEventListener("click", () => {
  void start().catch((err) => {
    $("login-error").textContent = String(err);
  });
});
wireTapPad();
