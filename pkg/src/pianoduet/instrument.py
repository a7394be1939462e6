"""A simulated player piano with solenoid-style actuation physics.

Three behaviors matter to the engine and are modeled here: actuation
latency that falls as velocity rises (soft notes need a slower, longer
solenoid push), a mechanical reset time after a key is released before
the same key can strike again, and optional per-note timing jitter.
The instrument records everything that acoustically happened, which is
what timing and safety assertions run against.
"""
from __future__ import annotations

import logging
import random
from dataclasses import dataclass
from enum import Enum

from .midi import EventKind, MidiEvent

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InstrumentModel:
    """L(v) = base - slope * (v - 1), clamped to stay positive."""

    base_latency_ms: float = 120.0
    latency_slope_ms: float = 0.6
    reset_time_ms: float = 50.0
    jitter_ms: float = 0.0
    jitter_seed: int = 0

    def __post_init__(self) -> None:
        if self.base_latency_ms <= 0:
            raise ValueError("base latency must be positive")
        if self.latency_slope_ms < 0 or self.jitter_ms < 0 or self.reset_time_ms < 0:
            raise ValueError("slope, jitter, and reset time must be non-negative")
        if self.base_latency_ms - self.latency_slope_ms * 126 <= 0:
            raise ValueError("latency curve goes non-positive before velocity 127")

    def latency_for(self, velocity: int) -> float:
        if not 1 <= velocity <= 127:
            raise ValueError(f"velocity out of range 1..127: {velocity}")
        return self.base_latency_ms - self.latency_slope_ms * (velocity - 1)


class AcousticKind(Enum):
    SOUNDED = "sounded"
    DAMPED = "damped"
    REJECTED_RETRIGGER = "rejected_retrigger"


@dataclass(frozen=True)
class AcousticEvent:
    kind: AcousticKind
    pitch: int
    velocity: int
    time_ms: float


@dataclass
class _KeyState:
    strike_ms: float  # when the hammer lands (or landed)
    velocity: int


class VirtualInstrument:
    """Accepts wire MidiEvents in receive order and logs the acoustics.

    A NoteOn while the key is engaged, or before the mechanical reset
    time since its release has passed, is rejected and logged rather
    than sounded; the engine's scheduler is supposed to make such sends
    impossible.  Jitter draws come from a seeded generator in receive
    order, so identical input streams produce identical logs.
    """

    def __init__(self, model: InstrumentModel | None = None) -> None:
        self.model = model or InstrumentModel()
        self._rng = random.Random(self.model.jitter_seed)
        self._engaged: dict[int, _KeyState] = {}
        self._released_at: dict[int, float] = {}
        self._events: list[AcousticEvent] = []
        self._last_receive_ms = float("-inf")

    def receive(self, ev: MidiEvent, now_ms: float | None = None) -> list[AcousticEvent]:
        """Feed one wire event at its receive time; returns what sounded."""
        now = ev.timestamp_ms if now_ms is None else now_ms
        if now < self._last_receive_ms:
            raise ValueError(
                f"receive time ran backwards: {now} < {self._last_receive_ms}"
            )
        self._last_receive_ms = now

        if ev.kind is EventKind.NOTE_ON and ev.velocity > 0:
            return self._strike(ev.pitch, ev.velocity, now)
        if ev.kind is EventKind.NOTE_OFF or ev.kind is EventKind.NOTE_ON:
            return self._release(ev.pitch, now)
        # Pedal solenoids are modeled as ideal; nothing to log.
        return []

    def _strike(self, pitch: int, velocity: int, now: float) -> list[AcousticEvent]:
        if pitch in self._engaged:
            return [self._log(AcousticKind.REJECTED_RETRIGGER, pitch, velocity, now)]
        released = self._released_at.get(pitch)
        if released is not None and now - released < self.model.reset_time_ms:
            return [self._log(AcousticKind.REJECTED_RETRIGGER, pitch, velocity, now)]
        jitter = 0.0
        if self.model.jitter_ms > 0:
            jitter = self._rng.uniform(-self.model.jitter_ms, self.model.jitter_ms)
        strike = now + self.model.latency_for(velocity) + jitter
        self._engaged[pitch] = _KeyState(strike, velocity)
        return [self._log(AcousticKind.SOUNDED, pitch, velocity, strike)]

    def _release(self, pitch: int, now: float) -> list[AcousticEvent]:
        state = self._engaged.pop(pitch, None)
        if state is None:
            log.debug("note-off for silent pitch %d", pitch)
            return []
        self._released_at[pitch] = now
        # A release racing the hammer cannot damp before the strike lands.
        return [self._log(AcousticKind.DAMPED, pitch, state.velocity, max(now, state.strike_ms))]

    def _log(self, kind: AcousticKind, pitch: int, velocity: int, t: float) -> AcousticEvent:
        ev = AcousticEvent(kind, pitch, velocity, t)
        self._events.append(ev)
        return ev

    @property
    def acoustic_log(self) -> list[AcousticEvent]:
        """All acoustic events sorted by time; ties keep receive order."""
        return sorted(self._events, key=lambda e: e.time_ms)

    @property
    def raw_log(self) -> list[AcousticEvent]:
        """Acoustic events in receive order (strikes may land later)."""
        return list(self._events)

    def engaged_pitches(self) -> set[int]:
        return set(self._engaged)


def export_acoustic_log(events: list[AcousticEvent]) -> str:
    """Line format: ``<kind> <pitch> <velocity> <time_ms>`` with ms to 3dp."""
    return "".join(
        f"{e.kind.value} {e.pitch} {e.velocity} {e.time_ms:.3f}\n" for e in events
    )


def parse_acoustic_log(text: str) -> list[AcousticEvent]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"line {lineno}: expected 4 fields")
        out.append(
            AcousticEvent(AcousticKind(parts[0]), int(parts[1]), int(parts[2]), float(parts[3]))
        )
    return out
