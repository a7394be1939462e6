"""Output scheduler: send-time math, staleness, retrigger safety, cancel rules."""
from __future__ import annotations

import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pianoduet.calibration import CalibrationBucket, CalibrationTable, flat_table
from pianoduet.midi import EventKind, MidiEvent
from pianoduet.scheduler import (
    BackpressureError,
    EventState,
    OutputScheduler,
    SchedulerConfig,
    scan_retrigger_violations,
)

L = 100.0
GAP = 60.0
STALE = 30.0


def make(latency: float = L, **cfg_kw) -> OutputScheduler:
    return OutputScheduler(flat_table(latency), SchedulerConfig(**cfg_kw))


def sweep(s: OutputScheduler, until_ms: float, start_ms: float = 0.0) -> list[MidiEvent]:
    """Tick on the documented 1ms cadence and collect the wire stream."""
    out: list[MidiEvent] = []
    t = start_ms
    while t <= until_ms:
        out.extend(s.tick(t))
        t += 1.0
    return out


def wire_ons(events):
    return [e for e in events if e.kind is EventKind.NOTE_ON]


def wire_offs(events):
    return [e for e in events if e.kind is EventKind.NOTE_OFF]


# -- config validation ----------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        SchedulerConfig(staleness_threshold_ms=-1)
    with pytest.raises(ValueError):
        SchedulerConfig(retrigger_gap_ms=-1)
    with pytest.raises(ValueError):
        SchedulerConfig(max_pending=1)
    with pytest.raises(ValueError):
        SchedulerConfig(tick_quantum_ms=0)


# -- send time math ----------------------------------------------------------------


def test_noteon_sent_early_by_latency():
    s = make()
    s.schedule_note(60, 64, target_on_ms=500.0, target_off_ms=800.0)
    assert s.tick(399.0) == []
    out = s.tick(400.0)
    assert [(e.kind, e.pitch, e.timestamp_ms) for e in out] == [
        (EventKind.NOTE_ON, 60, 400.0)
    ]
    assert s.tick(799.0) == []
    out = s.tick(800.0)
    assert [(e.kind, e.timestamp_ms) for e in out] == [(EventKind.NOTE_OFF, 800.0)]


def test_velocity_dependent_compensation():
    table = CalibrationTable(
        buckets=[
            CalibrationBucket(1, 64, 120.0),
            CalibrationBucket(65, 127, 80.0),
        ]
    )
    s = OutputScheduler(table)
    soft_on, _ = s.schedule_note(60, 30, 500.0, 900.0)
    loud_on, _ = s.schedule_note(62, 100, 500.0, 900.0)
    assert soft_on.send_ms == 380.0
    assert loud_on.send_ms == 420.0


def test_note_off_compensation_optional():
    plain = make()
    _, off = plain.schedule_note(60, 64, 500.0, 800.0)
    assert off.send_ms == 800.0
    comp = make(compensate_note_off=True)
    _, off = comp.schedule_note(60, 64, 500.0, 800.0)
    assert off.send_ms == 700.0


def test_controls_uncompensated():
    s = make()
    ev = s.schedule_control(64, 127, 250.0)
    assert ev.send_ms == 250.0
    out = s.tick(250.0)
    assert out[0].controller == 64 and out[0].value == 127


def test_note_must_end_after_start():
    with pytest.raises(ValueError):
        make().schedule_note(60, 64, 500.0, 500.0)


def test_same_instant_order_off_control_on():
    s = make(latency=0.0)
    s.schedule_note(60, 64, 0.0, 100.0)
    s.tick(0.0)
    # all three land at t=100: release of 60, a pedal, strike of 62
    s.schedule_note(62, 64, 100.0, 200.0)
    s.schedule_control(64, 0, 100.0)
    out = s.tick(100.0)
    assert [e.kind for e in out] == [
        EventKind.NOTE_OFF,
        EventKind.CONTROL,
        EventKind.NOTE_ON,
    ]


def test_wire_events_stamped_at_tick_time():
    s = make()
    s.schedule_note(60, 64, 500.0, 800.0)
    out = s.tick(405.5)  # first tick after the ideal send time
    assert out[0].timestamp_ms == 405.5


# -- staleness ------------------------------------------------------------------------


def test_stale_noteon_dropped_with_its_off():
    s = make()
    on, off = s.schedule_note(60, 64, 500.0, 800.0)
    dropped_cb = []
    s.on_dropped = dropped_cb.append
    out = s.tick(400.0 + STALE + 0.5)
    assert out == []
    assert on.state is EventState.DROPPED and off.state is EventState.DROPPED
    assert {id(e) for e in dropped_cb} == {id(on), id(off)}
    assert s.pending_count == 0


def test_lateness_exactly_at_threshold_still_sends():
    s = make()
    s.schedule_note(60, 64, 500.0, 800.0)
    out = s.tick(400.0 + STALE)
    assert len(out) == 1 and out[0].kind is EventKind.NOTE_ON


def test_late_noteoff_never_dropped():
    s = make()
    s.schedule_note(60, 64, 500.0, 800.0)
    assert len(s.tick(400.0)) == 1
    out = s.tick(2000.0)  # off is 1200ms late but must still release the key
    assert [e.kind for e in out] == [EventKind.NOTE_OFF]


# -- retrigger handling ----------------------------------------------------------------


def test_retrigger_pulls_pending_release_forward():
    s = make(latency=0.0)
    _, off_a = s.schedule_note(60, 64, 100.0, 500.0)
    on_b, _ = s.schedule_note(60, 64, 520.0, 700.0)
    assert off_a.send_ms == 460.0  # pulled from 500 to make the 60ms gap
    assert on_b.send_ms == 520.0
    wire = sweep(s, 700.0)
    offs, ons = wire_offs(wire), wire_ons(wire)
    assert ons[1].timestamp_ms - offs[0].timestamp_ms >= GAP


def test_retrigger_pull_floors_at_one_quantum_of_sound():
    s = make(latency=0.0)
    on_a, off_a = s.schedule_note(60, 64, 100.0, 500.0)
    on_b, _ = s.schedule_note(60, 64, 120.0, 700.0)
    # release can come no earlier than the strike plus one quantum, so the
    # new strike is pushed back instead
    assert off_a.send_ms == 101.0
    assert on_b.send_ms == 161.0


def test_retrigger_push_keeps_min_sounding_time():
    s = make(latency=0.0)
    s.schedule_note(60, 64, 100.0, 500.0)
    on_b, off_b = s.schedule_note(60, 64, 120.0, 161.5)
    assert on_b.send_ms == 161.0
    assert off_b.send_ms == on_b.send_ms + 1.0


def test_retrigger_against_already_sent_release():
    s = make(latency=0.0)
    s.schedule_note(60, 64, 100.0, 500.0)
    sweep(s, 500.0)  # both out; release went at tick 500
    on_b, _ = s.schedule_note(60, 64, 510.0, 700.0)
    assert on_b.send_ms == 560.0


def test_retrigger_pull_never_moves_release_into_the_past():
    s = make(latency=0.0)
    _, off_a = s.schedule_note(60, 64, 100.0, 500.0)
    sweep(s, 450.0)  # strike sent, release still pending, clock at 450
    on_b, _ = s.schedule_note(60, 64, 480.0, 700.0)
    assert off_a.send_ms == 450.0  # clamped to the last tick, not 420
    assert on_b.send_ms == 510.0


def test_distinct_pitches_never_interact():
    s = make(latency=0.0)
    _, off_a = s.schedule_note(60, 64, 100.0, 500.0)
    on_b, _ = s.schedule_note(62, 64, 510.0, 700.0)
    assert off_a.send_ms == 500.0 and on_b.send_ms == 510.0


# -- cancellation ---------------------------------------------------------------------


def test_cancel_pending_pair():
    s = make()
    on, off = s.schedule_note(60, 64, 500.0, 800.0)
    got = []
    s.on_dropped = got.append
    n = s.cancel(lambda e: e.kind is EventKind.NOTE_ON)
    assert n == 2
    assert on.state is EventState.DROPPED and off.state is EventState.DROPPED
    assert len(got) == 2
    assert s.pending_count == 0


def test_cancel_never_orphans_sent_noteon():
    s = make()
    on, off = s.schedule_note(60, 64, 500.0, 800.0)
    s.tick(400.0)
    assert on.state is EventState.SENT
    n = s.cancel(lambda e: True)
    assert n == 0
    assert off.state is EventState.PENDING
    out = s.tick(800.0)
    assert [e.kind for e in out] == [EventKind.NOTE_OFF]


def test_cancel_by_tag():
    s = make()
    s.schedule_note(60, 64, 500.0, 800.0, tag="turn1")
    keep_on, keep_off = s.schedule_note(62, 64, 500.0, 800.0, tag="turn2")
    assert s.cancel(lambda e: e.tag == "turn1") == 2
    assert s.pending_count == 2
    assert keep_on.state is EventState.PENDING and keep_off.state is EventState.PENDING


def test_expedite_offs_cuts_sound_short():
    s = make()
    s.schedule_note(60, 64, 500.0, 2000.0)
    s.tick(400.0)
    moved = s.expedite_offs(600.0, lambda e: True)
    assert moved == 1
    out = s.tick(600.0)
    assert [e.kind for e in out] == [EventKind.NOTE_OFF]


def test_expedite_skips_already_due():
    s = make()
    s.schedule_note(60, 64, 500.0, 800.0)
    s.tick(400.0)
    assert s.expedite_offs(900.0, lambda e: True) == 0  # 800 <= 900 already due


# -- queue mechanics --------------------------------------------------------------------


def test_backpressure():
    s = make(max_pending=2)
    s.schedule_note(60, 64, 500.0, 800.0)
    with pytest.raises(BackpressureError):
        s.schedule_note(62, 64, 500.0, 800.0)
    with pytest.raises(BackpressureError):
        s.schedule_control(64, 127, 500.0)
    s.tick(400.0)  # strike out, release still pending: room for one control
    s.schedule_control(64, 127, 500.0)


def test_tick_time_must_not_run_backwards():
    s = make()
    s.tick(100.0)
    with pytest.raises(ValueError):
        s.tick(99.0)
    s.tick(100.0)  # equal is fine


def test_inspection_helpers():
    s = make()
    assert s.next_due_ms() is None
    on, off = s.schedule_note(60, 64, 500.0, 800.0)
    assert s.next_due_ms() == 400.0
    assert s.pending_count == 2
    assert s.has_pending(lambda e: e.kind is EventKind.NOTE_ON)
    s.tick(400.0)
    assert s.next_due_ms() == 800.0
    assert not s.has_pending(lambda e: e.kind is EventKind.NOTE_ON)
    assert [e.payload.pitch for e in s.pending_events()] == [60]


def test_callbacks_fire_outside_the_lock():
    s = make()
    seen = []

    def probe(ev):
        # would deadlock or report held if the scheduler called us locked
        assert not s._lock.locked()
        seen.append(ev.kind)

    s.on_sent = probe
    s.on_dropped = probe
    s.schedule_note(60, 64, 500.0, 800.0)
    s.tick(400.0)
    s.cancel(lambda e: False)
    s.schedule_note(62, 64, 100.0, 300.0)
    s.tick(400.0)  # stale: dropped pair
    assert EventKind.NOTE_ON in seen and EventKind.NOTE_OFF in seen


def test_emitted_log_accumulates_wire_stream():
    s = make()
    s.schedule_note(60, 64, 500.0, 800.0)
    sweep(s, 900.0)
    assert [e.kind for e in s.emitted] == [EventKind.NOTE_ON, EventKind.NOTE_OFF]


# -- wire stream scanner ------------------------------------------------------------


def _on(p, t, v=64):
    return MidiEvent(EventKind.NOTE_ON, t, pitch=p, velocity=v)


def _off(p, t):
    return MidiEvent(EventKind.NOTE_OFF, t, pitch=p)


def test_scan_clean_stream():
    events = [_on(60, 0), _off(60, 100), _on(60, 160), _off(60, 300)]
    assert scan_retrigger_violations(events, 60.0) == []


def test_scan_flags_tight_retrigger():
    events = [_on(60, 0), _off(60, 100), _on(60, 159.9)]
    assert scan_retrigger_violations(events, 60.0) == [(60, 100, 159.9)]


def test_scan_flags_double_strike():
    events = [_on(60, 0), _on(60, 50)]
    assert scan_retrigger_violations(events, 60.0) == [(60, 50, 50)]


def test_scan_velocity_zero_on_is_a_release():
    events = [_on(60, 0), _on(60, 100, v=0), _on(60, 200)]
    assert scan_retrigger_violations(events, 60.0) == []
    events = [_on(60, 0), _on(60, 100, v=0), _on(60, 120)]
    assert scan_retrigger_violations(events, 60.0) == [(60, 100, 120)]


def test_scan_pitches_independent():
    events = [_on(60, 0), _off(60, 100), _on(62, 110)]
    assert scan_retrigger_violations(events, 60.0) == []


# -- millisecond-grid oracle -----------------------------------------------------------


@given(st.integers(min_value=0, max_value=2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_distinct_pitch_send_times_match_oracle(seed):
    """Every event leaves on the first tick at or after target minus latency."""
    rng = random.Random(seed)
    s = make()
    jobs = []
    pitches = rng.sample(range(21, 109), rng.randint(1, 20))
    for pitch in pitches:
        velocity = rng.randint(1, 127)
        target_on = rng.uniform(L, 3000.0)
        duration = rng.uniform(1.0, 800.0)
        s.schedule_note(pitch, velocity, target_on, target_on + duration)
        jobs.append((pitch, velocity, target_on, target_on + duration))

    wire = sweep(s, 4100.0)
    assert not s.dropped

    want = []
    for pitch, velocity, on_t, off_t in jobs:
        on_send = on_t - L
        off_send = max(off_t, on_send + 1.0)
        want.append((EventKind.NOTE_ON, pitch, math.ceil(on_send)))
        want.append((EventKind.NOTE_OFF, pitch, math.ceil(off_send)))
    got = [(e.kind, e.pitch, e.timestamp_ms) for e in wire]
    key = lambda x: (x[2], 0 if x[0] is EventKind.NOTE_OFF else 2, x[1])
    assert sorted(got, key=key) == sorted(
        [(k, p, float(t)) for k, p, t in want], key=key
    )


@given(st.integers(min_value=0, max_value=2**32 - 1), st.integers(min_value=2, max_value=25))
@settings(max_examples=60, deadline=None)
def test_single_pitch_storm_never_violates_mechanics(seed, n):
    """Dense same-pitch scheduling: the wire stream stays mechanically valid."""
    rng = random.Random(seed)
    s = make(latency=0.0)
    t = 100.0
    for _ in range(n):
        dur = rng.uniform(1.0, 150.0)
        try:
            s.schedule_note(60, 64, t, t + dur)
        except BackpressureError:
            break
        t += rng.uniform(5.0, 180.0)  # often tighter than the 60ms gap

    wire = sweep(s, t + 1000.0)
    # quantization can delay a release by up to one tick, never more
    assert scan_retrigger_violations(wire, GAP - 1.0) == []
    down = False
    for ev in wire:
        if ev.kind is EventKind.NOTE_ON:
            assert not down, "double strike"
            down = True
        elif ev.kind is EventKind.NOTE_OFF:
            assert down, "release without strike"
            down = False
    assert not down, "stuck key at end"
    # every struck note got at least a quantum of sound
    ons = wire_ons(wire)
    offs = wire_offs(wire)
    for on_ev, off_ev in zip(ons, offs):
        assert off_ev.timestamp_ms - on_ev.timestamp_ms >= 1.0
