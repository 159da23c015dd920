/**
 * DOM rendering for the tap console. Pure functions of (element, data) so
 * the same code runs the live page and the jsdom tests; state lives in the
 * harness, not here.
 */

import type { Snapshot } from "./api.js";
import type { Segment } from "./tapcode.js";

export const STATE_LABELS: Record<string, string> = {
  idle: "Idle",
  woken: "Woken",
  first_factor: "Pairing",
  await_second_factor: "Awaiting tap code",
  verifying: "Verifying",
  executing: "Executing dose",
  notifying: "Reporting result",
  lockout: "Locked out",
};

export function renderState(el: HTMLElement, snap: Snapshot): void {
  el.textContent = STATE_LABELS[snap.device_state] ?? snap.device_state;
  el.dataset.state = snap.device_state;
}

export function renderConnection(el: HTMLElement, up: boolean): void {
  el.textContent = up ? "connected" : "reconnecting…";
  el.classList.toggle("down", !up);
}

/** Append messages the inbox has not seen yet; re-rendering is idempotent. */
export function renderSms(listEl: HTMLElement, snap: Snapshot): void {
  for (const sms of snap.sms.slice(listEl.childElementCount)) {
    const item = document.createElement("li");
    item.textContent = sms.body;
    listEl.appendChild(item);
  }
}

/**
 * Metronome strip: one span per press or gap, width proportional to its
 * duration so the rhythm can be read (and tapped along to) at a glance.
 */
export function renderGuide(el: HTMLElement, segments: Segment[]): void {
  el.textContent = "";
  for (const seg of segments) {
    const span = document.createElement("span");
    span.className = seg.kind === "tap" ? "tap" : `gap-${seg.kind}`;
    span.style.width = `${seg.ms / 10}px`;
    el.appendChild(span);
  }
}

const OUTCOME_LABELS: Record<string, string> = {
  executed: "Authenticated, executing",
  denied: "Second factor rejected",
  refused: "Request refused",
  failed: "Session failed",
};

export function renderOutcome(el: HTMLElement, snap: Snapshot): void {
  const last = snap.outcomes[snap.outcomes.length - 1];
  if (last === undefined) {
    el.textContent = "";
    el.dataset.outcome = "";
    return;
  }
  el.textContent = OUTCOME_LABELS[last] ?? last;
  el.dataset.outcome = last;
}

interface PhaseEntry {
  state: string;
  at_s: number;
}

/** Records each device-state change with the sim time it was first seen. */
export class PhaseTimeline {
  readonly entries: PhaseEntry[] = [];

  push(snap: Snapshot): void {
    const last = this.entries[this.entries.length - 1];
    if (last !== undefined && last.state === snap.device_state) return;
    this.entries.push({ state: snap.device_state, at_s: snap.sim_time_s });
  }

  render(listEl: HTMLElement): void {
    for (const entry of this.entries.slice(listEl.childElementCount)) {
      const item = document.createElement("li");
      const label = STATE_LABELS[entry.state] ?? entry.state;
      item.textContent = `${entry.at_s.toFixed(1)}s  ${label}`;
      listEl.appendChild(item);
    }
  }
}
