"""Latency-compensated, mechanically safe output scheduling.

The generator asks for notes to *sound* at target times; the player
piano needs its NoteOn early by the velocity-dependent actuation
latency.  This queue does that send-time math and enforces the safety
rules a real action imposes:

* a NoteOn that would be sent more than the staleness threshold late is
  dropped (late notes are musical garbage), together with its NoteOff;
* a repeated pitch needs a minimum gap between the previous key release
  and the next strike, so the earlier NoteOff is retroactively pulled
  forward, or the new NoteOn pushed back, to make room;
* cancelling pending output never cancels the NoteOff of a NoteOn that
  already went out, so no key is ever left down.

Methods take the current time from the caller and are thread-safe; the
callbacks fire outside the lock.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

from .calibration import CalibrationTable
from .midi import EventKind, MidiEvent, control, note_off, note_on

log = logging.getLogger(__name__)


class SchedulerError(Exception):
    pass


class BackpressureError(SchedulerError):
    """The pending queue is full; offer the event again later."""


@dataclass(frozen=True)
class SchedulerConfig:
    staleness_threshold_ms: float = 30.0
    retrigger_gap_ms: float = 60.0
    max_pending: int = 4096
    tick_quantum_ms: float = 1.0
    compensate_note_off: bool = False

    def __post_init__(self) -> None:
        if self.staleness_threshold_ms < 0 or self.retrigger_gap_ms < 0:
            raise ValueError("thresholds must be non-negative")
        if self.max_pending < 2:
            raise ValueError("max_pending must hold at least one note pair")
        if self.tick_quantum_ms <= 0:
            raise ValueError("tick_quantum_ms must be positive")


class EventState(Enum):
    PENDING = "pending"
    SENT = "sent"
    DROPPED = "dropped"


@dataclass
class ScheduledEvent:
    payload: MidiEvent  # timestamp carries the target sound time
    target_sound_ms: float
    send_ms: float
    seq: int
    state: EventState = EventState.PENDING
    pair: "ScheduledEvent | None" = field(default=None, repr=False)
    sent_ms: float | None = None
    tag: object = None  # caller's handle, e.g. which turn produced it

    @property
    def kind(self) -> EventKind:
        return self.payload.kind


_SEND_RANK = {EventKind.NOTE_OFF: 0, EventKind.CONTROL: 1, EventKind.NOTE_ON: 2}


class OutputScheduler:
    """Pending wire events ordered by send time.

    ``tick(now)`` sends everything due.  Emission order at equal send
    times is NoteOff, then controls, then NoteOn, then submission order,
    so a release and a re-strike scheduled for the same instant leave in
    the only mechanically valid order.
    """

    def __init__(
        self,
        table: CalibrationTable,
        config: SchedulerConfig | None = None,
        on_sent: Callable[[ScheduledEvent], None] | None = None,
        on_dropped: Callable[[ScheduledEvent], None] | None = None,
    ) -> None:
        self.table = table
        self.config = config or SchedulerConfig()
        # Assignable after construction; called outside the lock.
        self.on_sent = on_sent
        self.on_dropped = on_dropped
        self._lock = threading.Lock()
        self._pending: list[ScheduledEvent] = []
        self._seq = 0
        self._last_tick_ms = float("-inf")
        # Same-pitch notes must be scheduled in time order (generation and
        # replay both are); the retrigger constraint is then the newest
        # pending NoteOff per pitch, or the last one actually sent.
        self._pending_off: dict[int, ScheduledEvent] = {}
        self._last_sent_off: dict[int, float] = {}
        self.emitted: list[MidiEvent] = []
        self.dropped: list[ScheduledEvent] = []

    # -- submission ---------------------------------------------------------

    def schedule_note(
        self,
        pitch: int,
        velocity: int,
        target_on_ms: float,
        target_off_ms: float,
        tag: object = None,
    ) -> tuple[ScheduledEvent, ScheduledEvent]:
        """Queue a note so it sounds at target_on and damps at target_off."""
        if target_off_ms <= target_on_ms:
            raise ValueError("note must end after it starts")
        with self._lock:
            if self._pending_count() + 2 > self.config.max_pending:
                raise BackpressureError(f"queue full at {self.config.max_pending}")
            cfg = self.config
            on_send = target_on_ms - self.table.latency_for(velocity)
            off_send = target_off_ms
            if cfg.compensate_note_off:
                off_send -= self.table.latency_for(velocity)

            on_send = self._resolve_retrigger(pitch, on_send)
            # However the retrigger math moved things, this note keeps at
            # least one tick quantum of sounding time.
            off_send = max(off_send, on_send + cfg.tick_quantum_ms)

            on_ev = self._add(note_on(pitch, velocity, target_on_ms), target_on_ms, on_send, tag)
            off_ev = self._add(note_off(pitch, target_off_ms), target_off_ms, off_send, tag)
            on_ev.pair = off_ev
            off_ev.pair = on_ev
            self._pending_off[pitch] = off_ev
            return on_ev, off_ev

    def schedule_control(
        self, controller: int, value: int, target_ms: float, tag: object = None
    ) -> ScheduledEvent:
        """Queue a controller change; controls are sent uncompensated."""
        with self._lock:
            if self._pending_count() + 1 > self.config.max_pending:
                raise BackpressureError(f"queue full at {self.config.max_pending}")
            return self._add(control(controller, value, target_ms), target_ms, target_ms, tag)

    def _add(
        self, payload: MidiEvent, target_ms: float, send_ms: float, tag: object
    ) -> ScheduledEvent:
        ev = ScheduledEvent(payload, target_ms, send_ms, self._seq, tag=tag)
        self._seq += 1
        self._pending.append(ev)
        return ev

    def _resolve_retrigger(self, pitch: int, on_send: float) -> float:
        """Make room between this strike and the previous release of the key."""
        gap = self.config.retrigger_gap_ms
        quantum = self.config.tick_quantum_ms
        prev_off = self._pending_off.get(pitch)
        if prev_off is None or prev_off.state is not EventState.PENDING:
            # No release in flight; the only constraint is the last release
            # that actually went out the wire.
            sent_t = self._last_sent_off.get(pitch)
            if sent_t is not None:
                on_send = max(on_send, sent_t + gap)
            return on_send
        # Pending: pull the earlier release forward until the gap fits, but
        # never before its own NoteOn has had one quantum of sound.
        if prev_off.send_ms + gap > on_send:
            new_off_send = on_send - gap
            floor = None
            prev_on = prev_off.pair
            if prev_on is not None and prev_on.state is EventState.SENT:
                assert prev_on.sent_ms is not None
                floor = prev_on.sent_ms + quantum
            elif prev_on is not None:
                floor = prev_on.send_ms + quantum
            if floor is not None and new_off_send < floor:
                new_off_send = floor
            prev_off.send_ms = max(self._last_tick_ms, new_off_send)
            on_send = max(on_send, prev_off.send_ms + gap)
        return on_send

    # -- emission -----------------------------------------------------------

    def tick(self, now_ms: float) -> list[MidiEvent]:
        """Send every event due by now; returns them in wire order."""
        with self._lock:
            if now_ms < self._last_tick_ms:
                raise ValueError(f"tick time ran backwards: {now_ms}")
            self._last_tick_ms = now_ms
            due = [e for e in self._pending if e.send_ms <= now_ms]
            due.sort(key=lambda e: (e.send_ms, _SEND_RANK[e.kind], e.seq))
            sent: list[ScheduledEvent] = []
            dropped: list[ScheduledEvent] = []
            for ev in due:
                if ev.state is not EventState.PENDING:
                    continue
                lateness = now_ms - ev.send_ms
                if (
                    ev.kind is EventKind.NOTE_ON
                    and lateness > self.config.staleness_threshold_ms
                ):
                    self._drop(ev, dropped)
                    if ev.pair is not None and ev.pair.state is EventState.PENDING:
                        self._drop(ev.pair, dropped)
                    continue
                # The physical send happens now, not at the ideal send time;
                # with the documented one-quantum tick cadence the slip is
                # under one quantum.
                ev.state = EventState.SENT
                ev.sent_ms = now_ms
                if ev.kind is EventKind.NOTE_OFF:
                    self._last_sent_off[ev.payload.pitch] = now_ms
                sent.append(ev)
            self._pending = [e for e in self._pending if e.state is EventState.PENDING]
            wire = [
                MidiEvent(
                    e.payload.kind,
                    now_ms,
                    pitch=e.payload.pitch,
                    velocity=e.payload.velocity,
                    controller=e.payload.controller,
                    value=e.payload.value,
                )
                for e in sent
            ]
            self.emitted.extend(wire)
        for ev in sent:
            if self.on_sent is not None:
                self.on_sent(ev)
        for ev in dropped:
            if self.on_dropped is not None:
                self.on_dropped(ev)
        return wire

    def _drop(self, ev: ScheduledEvent, sink: list[ScheduledEvent]) -> None:
        ev.state = EventState.DROPPED
        self.dropped.append(ev)
        sink.append(ev)
        log.debug(
            "dropped %s pitch %d scheduled for %.1fms",
            ev.kind.value,
            ev.payload.pitch,
            ev.send_ms,
        )

    # -- cancellation -------------------------------------------------------

    def cancel(self, predicate: Callable[[ScheduledEvent], bool]) -> int:
        """Drop matching pending events; never orphans a sent NoteOn.

        A pending NoteOff whose NoteOn already went out survives any
        predicate.  Cancelling a pending NoteOn also cancels its pending
        NoteOff.
        """
        dropped: list[ScheduledEvent] = []
        with self._lock:
            for ev in self._pending:
                if ev.state is not EventState.PENDING or not predicate(ev):
                    continue
                if (
                    ev.kind is EventKind.NOTE_OFF
                    and ev.pair is not None
                    and ev.pair.state is EventState.SENT
                ):
                    continue
                self._drop(ev, dropped)
                if (
                    ev.kind is EventKind.NOTE_ON
                    and ev.pair is not None
                    and ev.pair.state is EventState.PENDING
                ):
                    self._drop(ev.pair, dropped)
            self._pending = [e for e in self._pending if e.state is EventState.PENDING]
        for ev in dropped:
            if self.on_dropped is not None:
                self.on_dropped(ev)
        return len(dropped)

    def expedite_offs(
        self, now_ms: float, predicate: Callable[[ScheduledEvent], bool]
    ) -> int:
        """Pull matching pending NoteOffs forward to now (cut the sound)."""
        moved = 0
        with self._lock:
            for ev in self._pending:
                if (
                    ev.kind is EventKind.NOTE_OFF
                    and ev.state is EventState.PENDING
                    and predicate(ev)
                    and ev.send_ms > now_ms
                ):
                    ev.send_ms = now_ms
                    moved += 1
        return moved

    # -- inspection ----------------------------------------------------------

    def _pending_count(self) -> int:
        return len(self._pending)

    @property
    def pending_count(self) -> int:
        with self._lock:
            return self._pending_count()

    def pending_events(self) -> list[ScheduledEvent]:
        with self._lock:
            return list(self._pending)

    def next_due_ms(self) -> float | None:
        with self._lock:
            if not self._pending:
                return None
            return min(e.send_ms for e in self._pending)

    def has_pending(self, predicate: Callable[[ScheduledEvent], bool]) -> bool:
        with self._lock:
            return any(predicate(e) for e in self._pending)


def scan_retrigger_violations(
    events: Iterable[MidiEvent], gap_ms: float
) -> list[tuple[int, float, float]]:
    """Find (pitch, off_time, on_time) pairs closer than the gap, plus
    double-strikes with no release between them, in a wire stream."""
    last_off: dict[int, float] = {}
    down: set[int] = set()
    violations = []
    for ev in events:
        if ev.kind is EventKind.NOTE_ON and ev.velocity > 0:
            if ev.pitch in down:
                violations.append((ev.pitch, ev.timestamp_ms, ev.timestamp_ms))
                continue
            off_t = last_off.get(ev.pitch)
            if off_t is not None and ev.timestamp_ms - off_t < gap_ms:
                violations.append((ev.pitch, off_t, ev.timestamp_ms))
            down.add(ev.pitch)
        elif ev.kind in (EventKind.NOTE_OFF, EventKind.NOTE_ON):
            if ev.pitch in down:
                down.discard(ev.pitch)
                last_off[ev.pitch] = ev.timestamp_ms
    return violations
