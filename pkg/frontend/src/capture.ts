/**
 * Live tap recording. The pad and the spacebar both feed edges in here;
 * what comes out is the clean alternating down/up stream the tap channel
 * expects: duplicate levels (key autorepeat, stray pointer events) are
 * swallowed, and time running backwards is a caller bug, not data.
 */

import type { TapEdge } from "./tapcode.js";

export class TapCapture {
  readonly edges: TapEdge[] = [];
  private level = false;

  /** Record one edge; returns it, or null if it was a no-op repeat. */
  edge(level: boolean, t_ms: number): TapEdge | null {
    if (level === this.level) return null;
    const last = this.edges[this.edges.length - 1];
    if (last !== undefined && t_ms <= last.t_ms) {
      throw new Error(`tap time went backwards: ${t_ms} after ${last.t_ms}`);
    }
    const edge = { t_ms, level };
    this.edges.push(edge);
    this.level = level;
    return edge;
  }

  get isDown(): boolean {
    return this.level;
  }

  get tapCount(): number {
    return this.edges.filter((e) => e.level).length;
  }
}
