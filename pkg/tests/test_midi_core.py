"""Note/pedal reconstruction checked against a batch oracle."""
from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pianoduet.midi import (
    MIN_NOTE_DURATION_MS,
    EventKind,
    MidiEvent,
    Note,
    NoteTracker,
    Pedal,
    PedalEvent,
    SequencingError,
    TakeoverSignal,
    control,
    note_off,
    note_on,
)

from conftest import make_events


def batch_reconstruct(events: list[MidiEvent]) -> tuple[list[Note], dict[int, Note]]:
    """Oracle: pair ons and offs per pitch in one pass over the stream.

    Independent of the tracker's incremental bookkeeping; returns closed
    notes in close order plus still-open notes.
    """
    opens: dict[int, tuple[float, int]] = {}
    closed: list[Note] = []
    for ev in events:
        if ev.kind is EventKind.NOTE_ON and ev.velocity > 0:
            if ev.pitch in opens:
                onset, velocity = opens.pop(ev.pitch)
                dur = max(ev.timestamp_ms - onset, MIN_NOTE_DURATION_MS)
                closed.append(Note(ev.pitch, onset, dur, velocity))
            opens[ev.pitch] = (ev.timestamp_ms, ev.velocity)
        elif ev.kind in (EventKind.NOTE_ON, EventKind.NOTE_OFF):
            if ev.pitch in opens:
                onset, velocity = opens.pop(ev.pitch)
                dur = max(ev.timestamp_ms - onset, MIN_NOTE_DURATION_MS)
                closed.append(Note(ev.pitch, onset, dur, velocity))
    hanging = {p: Note(p, t, None, v) for p, (t, v) in opens.items()}
    return closed, hanging


def ingest_all(tracker: NoteTracker, events: list[MidiEvent]):
    out = []
    for ev in events:
        out.extend(tracker.ingest(ev))
    return out


# -- basics ---------------------------------------------------------------------


def test_on_off_pair_produces_note():
    tracker = NoteTracker()
    assert tracker.ingest(note_on(60, 80, 100.0)) == []
    emitted = tracker.ingest(note_off(60, 350.0))
    assert emitted == [Note(60, 100.0, 250.0, 80)]
    assert tracker.finalized == [Note(60, 100.0, 250.0, 80)]
    assert tracker.notes_seen == 1


def test_velocity_zero_note_on_is_a_note_off():
    ev = note_on(60, 0, 5.0)
    assert ev.kind is EventKind.NOTE_OFF


def test_retrigger_closes_prior_at_new_onset():
    tracker = NoteTracker()
    tracker.ingest(note_on(72, 50, 0.0))
    emitted = tracker.ingest(note_on(72, 90, 400.0))
    assert emitted == [Note(72, 0.0, 400.0, 50)]
    assert tracker.hanging_notes() == [Note(72, 400.0, None, 90)]


def test_unmatched_off_is_counted_and_dropped():
    tracker = NoteTracker()
    assert tracker.ingest(note_off(61, 10.0)) == []
    assert tracker.state.dropped_note_offs == 1
    assert tracker.finalized == []


def test_same_timestamp_off_clamps_to_min_duration():
    tracker = NoteTracker()
    tracker.ingest(note_on(60, 64, 100.0))
    [note] = tracker.ingest(note_off(60, 100.0))
    assert note.duration_ms == MIN_NOTE_DURATION_MS


def test_backwards_time_raises():
    tracker = NoteTracker()
    tracker.ingest(note_on(60, 64, 100.0))
    with pytest.raises(SequencingError):
        tracker.ingest(note_off(60, 99.0))


def test_equal_timestamps_are_legal():
    tracker = NoteTracker()
    tracker.ingest(note_on(60, 64, 100.0))
    tracker.ingest(note_on(61, 64, 100.0))
    assert len(tracker.hanging_notes()) == 2


# -- pedals ---------------------------------------------------------------------


def test_sustain_edges_only():
    tracker = NoteTracker()
    assert tracker.ingest(control(64, 127, 0.0)) == [PedalEvent(Pedal.SUSTAIN, True, 0.0)]
    assert tracker.ingest(control(64, 100, 10.0)) == []  # still down
    assert tracker.ingest(control(64, 63, 20.0)) == [PedalEvent(Pedal.SUSTAIN, False, 20.0)]
    assert tracker.ingest(control(64, 0, 30.0)) == []  # still up
    assert tracker.sustain_down is False


def test_sustain_threshold_boundary():
    tracker = NoteTracker()
    assert tracker.ingest(control(64, 63, 0.0)) == []
    [pe] = tracker.ingest(control(64, 64, 1.0))
    assert pe.on is True


def test_soft_press_edge_emits_takeover_signal():
    tracker = NoteTracker()
    emitted = tracker.ingest(control(67, 127, 5.0))
    assert emitted == [PedalEvent(Pedal.SOFT, True, 5.0), TakeoverSignal(5.0)]
    # held down: no repeat
    assert tracker.ingest(control(67, 127, 6.0)) == []
    # release then press again: a fresh signal
    assert tracker.ingest(control(67, 0, 7.0)) == [PedalEvent(Pedal.SOFT, False, 7.0)]
    emitted = tracker.ingest(control(67, 80, 8.0))
    assert TakeoverSignal(8.0) in emitted


def test_unknown_controller_ignored():
    tracker = NoteTracker()
    assert tracker.ingest(control(1, 127, 0.0)) == []


def test_apply_pedal_filters_noops():
    tracker = NoteTracker()
    assert tracker.apply_pedal(Pedal.SUSTAIN, True, 1.0) == PedalEvent(Pedal.SUSTAIN, True, 1.0)
    assert tracker.apply_pedal(Pedal.SUSTAIN, True, 2.0) is None
    assert tracker.sustain_down is True


# -- takeover support --------------------------------------------------------------


def test_hanging_notes_sorted_by_onset():
    tracker = NoteTracker()
    tracker.ingest(note_on(70, 64, 0.0))
    tracker.ingest(note_on(65, 64, 50.0))
    tracker.ingest(note_on(60, 64, 100.0))
    assert [n.pitch for n in tracker.hanging_notes()] == [70, 65, 60]
    assert [n.pitch for n in tracker.hanging_notes(at_ms=60.0)] == [70, 65]


def test_finalize_open_then_real_off_is_dropped():
    tracker = NoteTracker()
    tracker.ingest(note_on(60, 90, 0.0))
    closed = tracker.finalize_open(60, 500.0)
    assert closed == Note(60, 0.0, 500.0, 90)
    assert tracker.hanging_notes() == []
    # the physical key release arrives later and must be ignored
    assert tracker.ingest(note_off(60, 800.0)) == []
    assert tracker.state.dropped_note_offs == 1
    assert tracker.finalized == [closed]


def test_add_note_keeps_finalized_sorted_by_onset():
    tracker = NoteTracker()
    tracker.ingest(note_on(60, 64, 100.0))
    tracker.ingest(note_off(60, 200.0))
    tracker.add_note(Note(72, 50.0, 20.0, 77))
    assert [n.onset_ms for n in tracker.finalized] == [50.0, 100.0]


def test_add_open_note_rejected():
    tracker = NoteTracker()
    with pytest.raises(ValueError):
        tracker.add_note(Note(60, 0.0, None, 64))


# -- note dataclass ---------------------------------------------------------------


def test_note_off_ms_and_clamps():
    note = Note(60, 100.0, 50.0, 64)
    assert note.off_ms == 150.0
    assert Note(60, 100.0, None, 64).is_open
    with pytest.raises(ValueError):
        _ = Note(60, 100.0, None, 64).off_ms
    assert Note(60, 100.0, None, 64).closed_at(100.0).duration_ms == MIN_NOTE_DURATION_MS
    assert Note(60, 100.0, None, 64).closed_with_duration(0.0).duration_ms == (
        MIN_NOTE_DURATION_MS
    )


def test_factory_range_checks():
    with pytest.raises(ValueError):
        note_on(128, 64, 0.0)
    with pytest.raises(ValueError):
        note_on(60, 128, 0.0)
    with pytest.raises(ValueError):
        control(64, 200, 0.0)


# -- oracle differential ---------------------------------------------------------


@given(st.integers(min_value=0, max_value=2**32 - 1), st.integers(min_value=0, max_value=60))
@settings(max_examples=200, deadline=None)
def test_tracker_matches_batch_oracle(seed: int, n_notes: int):
    rng = random.Random(seed)
    notes = [
        (rng.randint(21, 108), round(rng.uniform(0, 5000), 1),
         round(rng.uniform(0, 800), 1), rng.randint(1, 127))
        for _ in range(n_notes)
    ]
    events = make_events(notes)
    tracker = NoteTracker()
    ingest_all(tracker, events)
    oracle_closed, oracle_open = batch_reconstruct(events)

    # same multiset of closed notes; tracker keeps them onset-sorted
    assert sorted(tracker.finalized, key=lambda n: (n.onset_ms, n.pitch)) == sorted(
        oracle_closed, key=lambda n: (n.onset_ms, n.pitch)
    )
    assert [n.onset_ms for n in tracker.finalized] == sorted(
        n.onset_ms for n in tracker.finalized
    )
    assert {n.pitch: n for n in tracker.hanging_notes()} == oracle_open


@given(st.integers(min_value=0, max_value=2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_pedal_stream_reduces_to_edges(seed: int):
    rng = random.Random(seed)
    values = [rng.randint(0, 127) for _ in range(rng.randint(0, 40))]
    events = [control(64, v, float(i)) for i, v in enumerate(values)]
    tracker = NoteTracker()
    emitted = [e for e in ingest_all(tracker, events) if isinstance(e, PedalEvent)]

    # oracle: edges of the boolean sequence
    state = False
    expected = []
    for i, v in enumerate(values):
        on = v >= 64
        if on != state:
            expected.append(PedalEvent(Pedal.SUSTAIN, on, float(i)))
            state = on
    assert emitted == expected
    assert tracker.sustain_down == state
