"""Tap-pattern subsystem: sampling a binary touch level on the low-frequency
clock, debouncing presses into tap events, classifying inter-tap gaps into a
short/long rhythm alphabet, generating one-time challenge patterns, and
matching observed patterns.

Pattern identity lives entirely in the tap count and the gap rhythm; press
duration carries no information. Text encoding: `T` per tap, `.` for a short
gap, `-` for a long one (`T.T-T` = 3 taps, gaps [S, L]).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction
from random import Random

SHORT = "S"
LONG = "L"

NONCE_LEN = 8


@dataclass(frozen=True)
class ClockConfig:
    """Clock rates. The low-frequency clock sets touch sampling resolution;
    conversions use exact rational arithmetic off the decimal rates so
    simulated timestamps are reproducible integers."""

    lclk_hz: float = 20.15
    cka_hz: float = 10.07
    hf_hz: float = 660_000.0

    def __post_init__(self) -> None:
        if self.lclk_hz <= 0 or self.cka_hz <= 0 or self.hf_hz <= 0:
            raise ValueError("clock rates must be positive")

    def _lclk_period_ns(self) -> Fraction:
        return Fraction(1_000_000_000) / Fraction(str(self.lclk_hz))

    def lclk_ticks_to_ns(self, ticks: int) -> int:
        # Ceiling pairs with the floor below so the maps are exact inverses.
        return math.ceil(ticks * self._lclk_period_ns())

    def ns_to_lclk_ticks(self, ns: int) -> int:
        return int(Fraction(ns) / self._lclk_period_ns())

    def ms_to_lclk_ticks(self, t_ms: float) -> int:
        return int(Fraction(str(t_ms)) * Fraction(str(self.lclk_hz)) / 1000)

    def hf_cycles_to_ns(self, cycles: int) -> int:
        return int(cycles * Fraction(1_000_000_000) / Fraction(str(self.hf_hz)))


@dataclass(frozen=True)
class TapEvent:
    """One debounced press: its length and the silence that preceded it."""

    press_ticks: int
    gap_ticks: int

    def __post_init__(self) -> None:
        if self.press_ticks < 1 or self.gap_ticks < 0:
            raise ValueError("bad tap event")


@dataclass(frozen=True)
class TapPattern:
    tap_count: int
    gaps: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.tap_count < 1:
            raise ValueError("tap_count must be >= 1")
        if len(self.gaps) != self.tap_count - 1:
            raise ValueError("gaps length must be tap_count - 1")
        if any(g not in (SHORT, LONG) for g in self.gaps):
            raise ValueError("gap symbols must be S or L")

    def to_text(self) -> str:
        out = ["T"]
        for gap in self.gaps:
            out.append("." if gap == SHORT else "-")
            out.append("T")
        return "".join(out)

    @classmethod
    def from_text(cls, text: str) -> "TapPattern":
        if not text or text[0] != "T" or text[-1] != "T":
            raise ValueError(f"bad pattern text {text!r}")
        taps = 0
        gaps = []
        expect_tap = True
        for ch in text:
            if expect_tap:
                if ch != "T":
                    raise ValueError(f"bad pattern text {text!r}")
                taps += 1
            else:
                if ch == ".":
                    gaps.append(SHORT)
                elif ch == "-":
                    gaps.append(LONG)
                else:
                    raise ValueError(f"bad pattern text {text!r}")
            expect_tap = not expect_tap
        if expect_tap:
            raise ValueError(f"bad pattern text {text!r}")
        return cls(tap_count=taps, gaps=tuple(gaps))


@dataclass(frozen=True)
class OtpChallenge:
    """Single-use challenge; the verifier consumes it on the first attempt."""

    pattern: TapPattern
    nonce: bytes
    expiry_ticks: int = 0

    def __post_init__(self) -> None:
        if len(self.nonce) != NONCE_LEN:
            raise ValueError("nonce must be 8 bytes")

    def with_expiry(self, expiry_ticks: int) -> "OtpChallenge":
        return replace(self, expiry_ticks=expiry_ticks)


@dataclass(frozen=True)
class DetectorConfig:
    debounce_ticks: int = 1
    gap_threshold_ticks: int = 12  # ~0.6 s at 20.15 Hz
    pattern_timeout_ticks: int = 101  # ~5 s of silence finalizes
    tolerance_ticks: int = 2

    def __post_init__(self) -> None:
        if self.debounce_ticks < 1:
            raise ValueError("debounce_ticks must be >= 1")
        if self.gap_threshold_ticks <= self.debounce_ticks:
            raise ValueError("gap threshold must exceed debounce")
        if self.pattern_timeout_ticks <= self.gap_threshold_ticks:
            raise ValueError("timeout must exceed gap threshold")
        if self.tolerance_ticks < 0:
            raise ValueError("tolerance must be >= 0")

    def classify_gap(self, gap_ticks: int) -> str:
        return LONG if gap_ticks >= self.gap_threshold_ticks else SHORT


@dataclass(frozen=True)
class RenderConfig:
    """Ideal waveform synthesis parameters for the round-trip oracle."""

    press_ticks: int = 2
    short_gap_ticks: int = 6
    long_gap_ticks: int = 18
    lead_in_ticks: int = 2


class TapDetector:
    """Debouncing press detector over a monotone tick stream.

    High runs shorter than the debounce are glitches: they never produce a
    tap, and their ticks count toward the surrounding gap. A press emits its
    TapEvent on release; a silence of pattern_timeout_ticks emits the
    completed TapPattern.
    """

    def __init__(self, config: DetectorConfig | None = None):
        self.config = config or DetectorConfig()
        self._last_tick: int | None = None
        self._high_run = 0
        self._in_press = False
        self._gap_run = 0
        self._gap_at_press = 0
        self._events: list[TapEvent] = []

    def reset(self) -> None:
        self._high_run = 0
        self._in_press = False
        self._gap_run = 0
        self._gap_at_press = 0
        self._events = []

    @property
    def pending_events(self) -> list[TapEvent]:
        return list(self._events)

    def sample(self, level: bool, tick: int) -> TapEvent | TapPattern | None:
        if self._last_tick is not None and tick != self._last_tick + 1:
            raise ValueError(f"tick {tick} not consecutive after {self._last_tick}")
        self._last_tick = tick

        emitted: TapEvent | TapPattern | None = None
        if level:
            self._high_run += 1
            if self._high_run == self.config.debounce_ticks:
                self._in_press = True
                # Gap attribution excludes the run's own sub-debounce ticks.
                self._gap_at_press = self._gap_run
        else:
            if self._in_press:
                emitted = TapEvent(press_ticks=self._high_run, gap_ticks=self._gap_at_press)
                self._events.append(emitted)
                self._in_press = False
                self._gap_run = 0
            else:
                # Dead glitch ticks count as part of the gap.
                self._gap_run += self._high_run
            self._high_run = 0
            self._gap_run += 1
            if self._events and self._gap_run >= self.config.pattern_timeout_ticks:
                emitted = self._finalize()
        return emitted

    def _finalize(self) -> TapPattern:
        gaps = tuple(self.config.classify_gap(e.gap_ticks) for e in self._events[1:])
        pattern = TapPattern(tap_count=len(self._events), gaps=gaps)
        self._events = []
        return pattern


def render_waveform(
    pattern: TapPattern,
    detector: DetectorConfig | None = None,
    render: RenderConfig | None = None,
) -> list[bool]:
    """Synthesize an ideal level sequence that sample() maps back to
    `pattern`, including the trailing silence that finalizes it."""
    detector = detector or DetectorConfig()
    render = render or RenderConfig()
    if render.press_ticks < detector.debounce_ticks:
        raise ValueError("press shorter than debounce cannot register")
    if not render.short_gap_ticks < detector.gap_threshold_ticks <= render.long_gap_ticks:
        raise ValueError("render gaps must straddle the classification threshold")

    levels = [False] * render.lead_in_ticks
    for i in range(pattern.tap_count):
        if i > 0:
            gap = render.short_gap_ticks if pattern.gaps[i - 1] == SHORT else render.long_gap_ticks
            levels.extend([False] * gap)
        levels.extend([True] * render.press_ticks)
    levels.extend([False] * detector.pattern_timeout_ticks)
    return levels


def sample_waveform(levels: list[bool], config: DetectorConfig | None = None) -> list[TapPattern]:
    """Run a fresh detector over a waveform; returns completed patterns."""
    detector = TapDetector(config)
    patterns = []
    for tick, level in enumerate(levels):
        emitted = detector.sample(level, tick)
        if isinstance(emitted, TapPattern):
            patterns.append(emitted)
    return patterns


def pattern_space(min_taps: int, max_taps: int) -> list[TapPattern]:
    """All patterns within the bounds, in a stable enumeration order."""
    if not 1 <= min_taps <= max_taps:
        raise ValueError("bad tap count bounds")
    out = []
    for count in range(min_taps, max_taps + 1):
        for bits in range(1 << (count - 1)):
            gaps = tuple(
                LONG if bits & (1 << i) else SHORT for i in range(count - 1)
            )
            out.append(TapPattern(tap_count=count, gaps=gaps))
    return out


def generate_otp(rng: Random, min_taps: int = 3, max_taps: int = 6) -> OtpChallenge:
    """Draw a challenge uniformly over the whole bounded pattern space, so
    blind-guess success is exactly 1/|space| per attempt. (Uniform tap count
    first would skew mass toward short patterns and weaken that bound.)"""
    space = pattern_space(min_taps, max_taps)
    pattern = space[rng.randrange(len(space))]
    return OtpChallenge(pattern=pattern, nonce=rng.randbytes(NONCE_LEN))


def match(observed: TapPattern, expected: TapPattern) -> bool:
    """Exact match: same tap count, same gap rhythm."""
    return observed.tap_count == expected.tap_count and observed.gaps == expected.gaps


def match_count_only(observed: TapPattern, expected: TapPattern) -> bool:
    """Relaxed wake matching: tap count alone, rhythm ignored."""
    return observed.tap_count == expected.tap_count
