/**
 * Rhythm text grammar shared with the implant: "T" is a tap, and between
 * consecutive taps sits exactly one gap character, "." (short) or "-"
 * (long). "T.T-T" reads: tap, short gap, tap, long gap, tap.
 *
 * The console never classifies gaps itself. It sends raw edge timestamps
 * and the detector on the other side decides; the constants here only have
 * to keep a played-back rhythm comfortably inside the detector's bands
 * (sampling 20.15 Hz, long-gap threshold near 0.6 s).
 */

export type Gap = "short" | "long";

export interface Pattern {
  taps: number;
  gaps: Gap[];
}

export interface TapEdge {
  t_ms: number;
  level: boolean;
}

export interface Segment {
  kind: "tap" | "short" | "long";
  ms: number;
}

export const PRESS_MS = 140;
export const SHORT_GAP_MS = 300;
export const LONG_GAP_MS = 950;

/** Wake rhythm from the default scenario; the patient taps it from memory. */
export const WAKE_PATTERN_TEXT = "T.T.T.T";

export function parsePattern(text: string): Pattern {
  if (text.length === 0 || text.length % 2 === 0) {
    throw new Error(`bad pattern ${JSON.stringify(text)}`);
  }
  const gaps: Gap[] = [];
  for (let i = 0; i < text.length; i++) {
    const ch = text[i];
    if (i % 2 === 0) {
      if (ch !== "T") throw new Error(`expected T at ${i} in ${JSON.stringify(text)}`);
    } else if (ch === ".") {
      gaps.push("short");
    } else if (ch === "-") {
      gaps.push("long");
    } else {
      throw new Error(`expected . or - at ${i} in ${JSON.stringify(text)}`);
    }
  }
  return { taps: (text.length + 1) / 2, gaps };
}

export function patternText(pattern: Pattern): string {
  let out = "T";
  for (const gap of pattern.gaps) out += (gap === "short" ? "." : "-") + "T";
  return out;
}

/** Press/gap blocks in playing order, for the metronome strip and playback. */
export function guideSegments(pattern: Pattern): Segment[] {
  const segments: Segment[] = [{ kind: "tap", ms: PRESS_MS }];
  for (const gap of pattern.gaps) {
    segments.push({ kind: gap, ms: gap === "short" ? SHORT_GAP_MS : LONG_GAP_MS });
    segments.push({ kind: "tap", ms: PRESS_MS });
  }
  return segments;
}

/** Timed down/up edges that perform the pattern, starting at startMs. */
export function tapSchedule(pattern: Pattern, startMs: number): TapEdge[] {
  const edges: TapEdge[] = [];
  let t = startMs;
  for (const segment of guideSegments(pattern)) {
    if (segment.kind === "tap") {
      edges.push({ t_ms: t, level: true });
      edges.push({ t_ms: t + segment.ms, level: false });
    }
    t += segment.ms;
  }
  return edges;
}
