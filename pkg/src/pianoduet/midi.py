"""Timestamped MIDI events and live reconstruction of notes and pedals.

The tracker turns a raw, time-ordered event stream into the two things
the rest of the engine consumes: finalized notes (closed intervals with
pitch, onset, duration, velocity) and pedal state changes.  It also
watches the soft pedal, which this system repurposes as the control
signal for handing the keyboard over to the generator.
"""
from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass, field, replace
from enum import Enum

log = logging.getLogger(__name__)

SUSTAIN_CONTROLLER = 64
SOFT_PEDAL_CONTROLLER = 67
PEDAL_ON_THRESHOLD = 64

# A key released (or re-struck) within the same millisecond it went down
# still sounded; 1ms is the shortest duration the tracker will emit.
MIN_NOTE_DURATION_MS = 1.0


class EventKind(Enum):
    NOTE_ON = "note_on"
    NOTE_OFF = "note_off"
    CONTROL = "control"


@dataclass(frozen=True)
class MidiEvent:
    kind: EventKind
    timestamp_ms: float
    pitch: int = 0
    velocity: int = 0
    controller: int = 0
    value: int = 0


def _check_7bit(name: str, v: int) -> None:
    if not 0 <= v <= 127:
        raise ValueError(f"{name} out of range 0..127: {v}")


def note_on(pitch: int, velocity: int, timestamp_ms: float) -> MidiEvent:
    """NoteOn; a zero velocity is normalized to NoteOff here, at the edge."""
    _check_7bit("pitch", pitch)
    _check_7bit("velocity", velocity)
    if velocity == 0:
        return note_off(pitch, timestamp_ms)
    return MidiEvent(EventKind.NOTE_ON, float(timestamp_ms), pitch=pitch, velocity=velocity)


def note_off(pitch: int, timestamp_ms: float) -> MidiEvent:
    _check_7bit("pitch", pitch)
    return MidiEvent(EventKind.NOTE_OFF, float(timestamp_ms), pitch=pitch)


def control(controller: int, value: int, timestamp_ms: float) -> MidiEvent:
    _check_7bit("controller", controller)
    _check_7bit("value", value)
    return MidiEvent(EventKind.CONTROL, float(timestamp_ms), controller=controller, value=value)


@dataclass(frozen=True)
class Note:
    """One piano note.  ``duration_ms`` is None while the key is down."""

    pitch: int
    onset_ms: float
    duration_ms: float | None
    velocity: int

    @property
    def is_open(self) -> bool:
        return self.duration_ms is None

    @property
    def off_ms(self) -> float:
        if self.duration_ms is None:
            raise ValueError("open note has no release time")
        return self.onset_ms + self.duration_ms

    def closed_at(self, off_ms: float) -> "Note":
        dur = max(off_ms - self.onset_ms, MIN_NOTE_DURATION_MS)
        return replace(self, duration_ms=dur)

    def closed_with_duration(self, duration_ms: float) -> "Note":
        return replace(self, duration_ms=max(duration_ms, MIN_NOTE_DURATION_MS))


class Pedal(Enum):
    SUSTAIN = "sustain"
    SOFT = "soft"


@dataclass(frozen=True)
class PedalEvent:
    pedal: Pedal
    on: bool
    time_ms: float


@dataclass(frozen=True)
class TakeoverSignal:
    """Soft-pedal press edge: the player is handing over the keyboard."""

    time_ms: float


Emitted = "Note | PedalEvent | TakeoverSignal"


@dataclass(frozen=True)
class TrackerConfig:
    sustain_controller: int = SUSTAIN_CONTROLLER
    soft_pedal_controller: int = SOFT_PEDAL_CONTROLLER
    pedal_on_threshold: int = PEDAL_ON_THRESHOLD


class SequencingError(Exception):
    """Raised when an event stream runs backwards in time."""


def _onset_key(n: Note) -> float:
    return n.onset_ms


@dataclass
class TrackerState:
    """Mutable tracker internals, exposed read-only to the engine."""

    open_notes: dict[int, Note] = field(default_factory=dict)
    finalized: list[Note] = field(default_factory=list)
    pedal_log: list[PedalEvent] = field(default_factory=list)
    sustain_down: bool = False
    soft_down: bool = False
    last_timestamp_ms: float = float("-inf")
    notes_seen: int = 0
    dropped_note_offs: int = 0


class NoteTracker:
    """Single-writer note/pedal reconstruction from a raw event stream.

    ``ingest`` returns what the event produced: a finalized Note, a
    PedalEvent for a state change, a TakeoverSignal for a soft-pedal
    press edge, or nothing.  Timestamps must be non-decreasing; equal
    timestamps are legal and keep arrival order.
    """

    def __init__(self, config: TrackerConfig | None = None) -> None:
        self.config = config or TrackerConfig()
        self.state = TrackerState()

    # -- queries ----------------------------------------------------------

    def hanging_notes(self, at_ms: float | None = None) -> list[Note]:
        """Open notes sorted by onset, optionally only those begun by at_ms."""
        notes = sorted(self.state.open_notes.values(), key=_onset_key)
        if at_ms is not None:
            notes = [n for n in notes if n.onset_ms <= at_ms]
        return notes

    @property
    def finalized(self) -> list[Note]:
        return self.state.finalized

    @property
    def pedal_log(self) -> list[PedalEvent]:
        return self.state.pedal_log

    @property
    def sustain_down(self) -> bool:
        return self.state.sustain_down

    @property
    def notes_seen(self) -> int:
        return self.state.notes_seen

    # -- mutation ---------------------------------------------------------

    def ingest(self, ev: MidiEvent) -> list[Note | PedalEvent | TakeoverSignal]:
        st = self.state
        if ev.timestamp_ms < st.last_timestamp_ms:
            raise SequencingError(
                f"event at {ev.timestamp_ms}ms after one at {st.last_timestamp_ms}ms"
            )
        st.last_timestamp_ms = ev.timestamp_ms

        if ev.kind is EventKind.NOTE_ON and ev.velocity > 0:
            return self._ingest_note_on(ev)
        if ev.kind is EventKind.NOTE_OFF or ev.kind is EventKind.NOTE_ON:
            return self._ingest_note_off(ev)
        return self._ingest_control(ev)

    def _ingest_note_on(self, ev: MidiEvent) -> list[Note | PedalEvent | TakeoverSignal]:
        st = self.state
        out: list[Note | PedalEvent | TakeoverSignal] = []
        prior = st.open_notes.pop(ev.pitch, None)
        if prior is not None:
            # Same-pitch retrigger closes the earlier note at the new onset.
            out.append(self._finalize(prior.closed_at(ev.timestamp_ms)))
        st.open_notes[ev.pitch] = Note(ev.pitch, ev.timestamp_ms, None, ev.velocity)
        st.notes_seen += 1
        return out

    def _ingest_note_off(self, ev: MidiEvent) -> list[Note | PedalEvent | TakeoverSignal]:
        st = self.state
        prior = st.open_notes.pop(ev.pitch, None)
        if prior is None:
            # Off with no matching on: either noise or a key whose note was
            # already speculatively finalized at takeover.  Count and drop.
            st.dropped_note_offs += 1
            log.debug("dropped note-off for pitch %d at %.1fms", ev.pitch, ev.timestamp_ms)
            return []
        return [self._finalize(prior.closed_at(ev.timestamp_ms))]

    def _ingest_control(self, ev: MidiEvent) -> list[Note | PedalEvent | TakeoverSignal]:
        st = self.state
        cfg = self.config
        on = ev.value >= cfg.pedal_on_threshold
        if ev.controller == cfg.sustain_controller:
            if on == st.sustain_down:
                return []
            st.sustain_down = on
            pe = PedalEvent(Pedal.SUSTAIN, on, ev.timestamp_ms)
            st.pedal_log.append(pe)
            return [pe]
        if ev.controller == cfg.soft_pedal_controller:
            if on == st.soft_down:
                return []
            st.soft_down = on
            pe = PedalEvent(Pedal.SOFT, on, ev.timestamp_ms)
            st.pedal_log.append(pe)
            out: list[Note | PedalEvent | TakeoverSignal] = [pe]
            if on:
                out.append(TakeoverSignal(ev.timestamp_ms))
            return out
        log.debug("ignoring controller %d", ev.controller)
        return []

    def finalize_open(self, pitch: int, duration_ms: float) -> Note:
        """Close an open note with an externally decided duration.

        Used at takeover to commit speculative durations; the eventual
        real note-off for this key will be dropped as unmatched.
        """
        prior = self.state.open_notes.pop(pitch)
        return self._finalize(prior.closed_with_duration(duration_ms))

    def add_note(self, note: Note) -> Note:
        """Merge an externally produced (generated) note into the record."""
        if note.is_open:
            raise ValueError("cannot merge an open note")
        return self._finalize(note)

    def apply_pedal(self, pedal: Pedal, on: bool, time_ms: float) -> PedalEvent | None:
        """Merge an externally produced pedal change; no-ops are dropped."""
        st = self.state
        if pedal is Pedal.SUSTAIN:
            if on == st.sustain_down:
                return None
            st.sustain_down = on
        else:
            if on == st.soft_down:
                return None
            st.soft_down = on
        pe = PedalEvent(pedal, on, time_ms)
        st.pedal_log.append(pe)
        return pe

    def _finalize(self, note: Note) -> Note:
        # Keep the finalized list sorted by onset: notes close in release
        # order, not onset order.  Ties keep insertion order.
        bisect.insort(self.state.finalized, note, key=_onset_key)
        return note
