"""Millisecond tap timestamps to low-clock touch samples.

The browser reports raw press/release edges; the implant samples its touch
sensor once per low-clock tick. This quantizer is the single point where the
two meet: sample-and-hold at the tick rate, so a streamed tap session and an
equivalently rendered waveform produce identical samples.
"""

from __future__ import annotations

from collections import deque

from imdauth.tapcode import ClockConfig


class TapQuantizer:
    """Orders incoming level edges and emits one (tick, level) sample per
    elapsed tick. An edge inside tick window k shows up in sample k; edges
    arriving after their window was already sampled apply from the next
    sample instead of being dropped."""

    def __init__(self, clock: ClockConfig | None = None):
        self.clock = clock or ClockConfig()
        self._level = False
        self._next_tick = 0
        self._pending: deque[tuple[int, bool]] = deque()

    @property
    def level(self) -> bool:
        return self._level

    def push_edge(self, t_ms: float, level: bool) -> int:
        if t_ms < 0:
            raise ValueError("timestamps start at session time zero")
        tick = self.clock.ms_to_lclk_ticks(t_ms)
        self._pending.append((max(tick, self._next_tick), bool(level)))
        return tick

    def sample_through(self, last_tick: int) -> list[tuple[int, bool]]:
        samples: list[tuple[int, bool]] = []
        for tick in range(self._next_tick, last_tick + 1):
            while self._pending and self._pending[0][0] <= tick:
                self._level = self._pending.popleft()[1]
            samples.append((tick, self._level))
        if last_tick >= self._next_tick:
            self._next_tick = last_tick + 1
        return samples
