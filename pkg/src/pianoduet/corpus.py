"""Bundled fixture performances.

A handful of deterministic, hand-constructed phrases used to fit the
mock backend's transition tables and to seed tests.  They are built to
exercise the whole vocabulary: every velocity bucket, durations from a
single grid step to the clamp, sustain pedal changes, chords, and
performances long enough to span several segments.
"""
from __future__ import annotations

from .midi import Note, Pedal, PedalEvent

Performance = tuple[list[Note], list[PedalEvent]]

_C_MAJOR = [60, 62, 64, 65, 67, 69, 71, 72]
_A_MINOR_ARP = [57, 60, 64, 69, 72, 76]


def _scale_walk() -> Performance:
    notes = []
    t = 0.0
    for lap in range(4):
        row = _C_MAJOR if lap % 2 == 0 else list(reversed(_C_MAJOR))
        for i, pitch in enumerate(row):
            vel = 20 + ((lap * len(row) + i) * 9) % 100
            notes.append(Note(pitch, t, 180.0 + 20.0 * (i % 3), vel))
            t += 230.0
    pedals = [
        PedalEvent(Pedal.SUSTAIN, True, 0.0),
        PedalEvent(Pedal.SUSTAIN, False, t / 2),
        PedalEvent(Pedal.SUSTAIN, True, t / 2 + 400.0),
        PedalEvent(Pedal.SUSTAIN, False, t - 100.0),
    ]
    return notes, pedals


def _arpeggios() -> Performance:
    notes = []
    t = 100.0
    for lap in range(6):
        for i, pitch in enumerate(_A_MINOR_ARP):
            vel = 1 + (lap * 23 + i * 31) % 127
            notes.append(Note(pitch + (lap % 3) * 12 - 12, t, 140.0, vel))
            t += 150.0
        t += 300.0
    pedals = [
        PedalEvent(Pedal.SUSTAIN, True, 100.0),
        PedalEvent(Pedal.SUSTAIN, False, t - 50.0),
    ]
    return notes, pedals


def _chorale() -> Performance:
    chords = [
        (48, 55, 64, 72),
        (45, 57, 60, 69),
        (50, 57, 65, 74),
        (43, 55, 62, 71),
        (48, 52, 60, 67),
    ]
    notes = []
    t = 0.0
    for k, chord in enumerate(chords * 3):
        for j, pitch in enumerate(chord):
            notes.append(Note(pitch, t, 900.0 - 50.0 * j, 40 + (k * 13 + j * 29) % 80))
        t += 1000.0
    pedals = []
    for k in range(3):
        pedals.append(PedalEvent(Pedal.SUSTAIN, True, k * 5000.0 + 20.0))
        pedals.append(PedalEvent(Pedal.SUSTAIN, False, k * 5000.0 + 4800.0))
    return notes, pedals


def _staccato_run() -> Performance:
    notes = []
    t = 50.0
    pitch = 36
    step = 0
    while pitch <= 96:
        notes.append(Note(pitch, t, 10.0 + (step % 5) * 30.0, 1 + (step * 8) % 127))
        pitch += 1 + step % 3
        t += 90.0 + (step % 4) * 15.0
        step += 1
    return notes, []


def _held_melody() -> Performance:
    """Long overlapping tones, some at the duration clamp."""
    notes = []
    t = 0.0
    for i, pitch in enumerate([55, 59, 62, 67, 66, 62, 59, 55]):
        notes.append(Note(pitch, t, 9000.0 + 1500.0 * (i % 2), 64 + (i * 7) % 60))
        notes.append(Note(pitch + 24, t + 500.0, 400.0, 30 + i * 11))
        t += 2000.0
    pedals = [
        PedalEvent(Pedal.SUSTAIN, True, 0.0),
        PedalEvent(Pedal.SUSTAIN, False, t + 2000.0),
    ]
    return notes, pedals


def _syncopation() -> Performance:
    notes = []
    bass = [38, 45, 36, 43]
    lead = [62, 65, 69, 70, 72, 70, 69, 65]
    t = 0.0
    for bar in range(8):
        notes.append(Note(bass[bar % 4], t, 350.0, 90 + (bar * 5) % 35))
        for k in range(4):
            onset = t + 125.0 + k * 250.0
            notes.append(Note(lead[(bar * 4 + k) % 8], onset, 120.0, 8 + (bar * 17 + k * 43) % 119))
        t += 1000.0
    return notes, []


def fixture_performances() -> list[Performance]:
    return [
        _scale_walk(),
        _arpeggios(),
        _chorale(),
        _staccato_run(),
        _held_melody(),
        _syncopation(),
    ]
