"""Shared strategies and builders for the test suite."""
from __future__ import annotations

import random

from pianoduet.midi import MidiEvent, Note, PedalEvent, Pedal, control, note_off, note_on


def make_events(
    notes: list[tuple[int, float, float, int]],
    pedals: list[tuple[int, int, float]] | None = None,
) -> list[MidiEvent]:
    """Flatten (pitch, onset, duration, velocity) notes plus raw
    (controller, value, time) controls into one time-sorted stream."""
    events: list[tuple[float, int, MidiEvent]] = []
    seq = 0
    for pitch, onset, duration, velocity in notes:
        events.append((onset, seq, note_on(pitch, velocity, onset)))
        seq += 1
        events.append((onset + duration, seq, note_off(pitch, onset + duration)))
        seq += 1
    for controller, value, t in pedals or []:
        events.append((t, seq, control(controller, value, t)))
        seq += 1
    events.sort(key=lambda e: (e[0], e[1]))
    return [e[2] for e in events]


def random_performance(
    rng: random.Random,
    n_notes: int,
    *,
    max_onset_ms: float = 20000.0,
    max_duration_ms: float = 3000.0,
    with_pedals: bool = False,
) -> tuple[list[Note], list[PedalEvent]]:
    """A random closed performance with non-overlapping same-pitch notes."""
    notes: list[Note] = []
    last_off: dict[int, float] = {}
    for _ in range(n_notes):
        pitch = rng.randint(21, 108)
        start_floor = last_off.get(pitch, 0.0)
        onset = round(start_floor + rng.uniform(1.0, max_onset_ms / max(n_notes, 1)), 1)
        duration = round(rng.uniform(10.0, max_duration_ms), 1)
        notes.append(Note(pitch, onset, duration, rng.randint(1, 127)))
        last_off[pitch] = onset + duration
    pedals: list[PedalEvent] = []
    if with_pedals:
        t = 0.0
        down = False
        for _ in range(rng.randint(0, 6)):
            t = round(t + rng.uniform(50.0, 4000.0), 1)
            down = not down
            pedals.append(PedalEvent(Pedal.SUSTAIN, down, t))
        if down:
            t = round(t + rng.uniform(50.0, 1000.0), 1)
            pedals.append(PedalEvent(Pedal.SUSTAIN, False, t))
    return sorted(notes, key=lambda n: n.onset_ms), pedals
