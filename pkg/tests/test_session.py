"""Simulated and live session runners, plus recorded-performance replay."""
from __future__ import annotations

import time

import pytest

from pianoduet.backend import CostModel, MarkovBackend, SamplingParams
from pianoduet.calibration import flat_table
from pianoduet.clock import SystemClock
from pianoduet.engine import DuetEngine, EngineConfig, Phase, SpeculativePolicy
from pianoduet.instrument import AcousticKind, InstrumentModel, export_acoustic_log
from pianoduet.midi import EventKind, Note, control, note_off, note_on
from pianoduet.scheduler import OutputScheduler, SchedulerConfig
from pianoduet.session import (
    LiveRunner,
    ReplayInvariantError,
    SimSession,
    VirtualProbeIo,
    replay_performance,
)
from pianoduet.smf import SmfSession
from pianoduet.tokenizer import TokenizerConfig

SOFT = 67


def quiet_model():
    return InstrumentModel(jitter_ms=0.0)


def delivered_rows(sess):
    return [
        (e.kind, e.pitch, e.velocity, e.controller, e.value, e.timestamp_ms)
        for e in sess.delivered
    ]


def log_names(sess, name):
    return [e for e in sess.log.entries if e.event == name]


# -- output pump ------------------------------------------------------------------


def test_pump_delivers_scheduled_events_on_advance():
    sess = SimSession(table=flat_table(50.0), instrument_model=quiet_model())
    sess.scheduler.schedule_note(60, 80, 200.0, 400.0)
    sess.clock.advance_to(1000.0)
    rows = [(e.kind, e.timestamp_ms) for e in sess.delivered]
    # send = target - 50, emitted on the next whole-ms tick
    assert rows == [(EventKind.NOTE_ON, 150.0), (EventKind.NOTE_OFF, 400.0)]
    sounded = [e for e in sess.acoustic_log() if e.kind is AcousticKind.SOUNDED]
    assert len(sounded) == 1
    # hammer lands a full action latency after the wire event
    assert sounded[0].time_ms == pytest.approx(150.0 + 120.0 - 0.6 * 79)


def test_pump_covers_every_due_moment_in_one_advance():
    sess = SimSession(table=flat_table(50.0), instrument_model=quiet_model())
    for pitch, on_t in [(60, 100.0), (64, 150.0), (67, 200.0)]:
        sess.scheduler.schedule_note(pitch, 64, on_t, on_t + 100.0)
    sess.clock.advance_to(500.0)
    rows = [(e.kind, e.pitch, e.timestamp_ms) for e in sess.delivered]
    assert rows == [
        (EventKind.NOTE_ON, 60, 50.0),
        (EventKind.NOTE_ON, 64, 100.0),
        (EventKind.NOTE_ON, 67, 150.0),
        (EventKind.NOTE_OFF, 60, 200.0),
        (EventKind.NOTE_OFF, 64, 250.0),
        (EventKind.NOTE_OFF, 67, 300.0),
    ]
    assert sess.instrument.engaged_pitches() == set()


# -- scripted duets ---------------------------------------------------------------


def duet_script():
    return [
        note_on(60, 70, 100.0),
        note_off(60, 380.0),
        note_on(64, 72, 500.0),
        note_off(64, 800.0),
        note_on(67, 74, 900.0),  # still held when the signal arrives
        control(SOFT, 127, 1200.0),
        control(SOFT, 0, 1230.0),
    ]


def make_session(seed=11, max_new_tokens=24, **eng_kw):
    eng_kw.setdefault("speculative_policy", SpeculativePolicy.ELAPSED)
    return SimSession(
        engine_config=EngineConfig(
            sampling=SamplingParams(seed=seed, max_new_tokens=max_new_tokens),
            **eng_kw,
        ),
        instrument_model=quiet_model(),
    )


def test_empty_script_settles_immediately():
    sess = make_session()
    sess.run_script([])
    assert sess.delivered == []
    assert sess.engine.phase is Phase.LISTEN


def test_duet_turn_plays_and_settles_clean():
    sess = make_session()
    sess.run_script(duet_script())
    assert sess.engine.phase is Phase.LISTEN
    assert len(sess.engine.reports) == 1
    report = sess.engine.reports[0]
    assert report.signal_ms == 1200.0
    assert report.finalize_ms >= report.signal_ms
    assert report.first_note_sound_ms is not None
    assert report.first_note_sound_ms > report.signal_ms
    assert sess.engine.generated_history, "turn produced no notes"
    ons = [e for e in sess.delivered if e.kind is EventKind.NOTE_ON]
    offs = [e for e in sess.delivered if e.kind is EventKind.NOTE_OFF]
    assert ons and len(ons) == len(offs)
    assert sess.instrument.engaged_pitches() == set()
    assert sess.retrigger_violations() == []
    assert sess.rejected_retriggers() == 0


def test_multi_turn_duet_with_mid_generation_reclaim():
    script = [
        note_on(60, 70, 100.0),
        note_off(60, 300.0),
        note_on(62, 72, 400.0),
        note_off(62, 600.0),
        control(SOFT, 127, 800.0),
        control(SOFT, 0, 820.0),
        control(SOFT, 127, 1600.0),  # lands mid-generation: reclaim
        control(SOFT, 0, 1620.0),
        note_on(64, 74, 1800.0),
        note_off(64, 2000.0),
        control(SOFT, 127, 2200.0),
        control(SOFT, 0, 2220.0),
    ]
    sess = make_session(seed=3, max_new_tokens=400)
    sess.run_script(script)
    assert sess.engine.phase is Phase.LISTEN
    assert len(log_names(sess, "reclaim")) == 1
    assert len(sess.engine.reports) == 2
    assert sess.engine.reports[0].turn_index < sess.engine.reports[1].turn_index
    assert sess.engine.reports[1].signal_ms == 2200.0
    assert sess.instrument.engaged_pitches() == set()
    assert sess.retrigger_violations() == []
    assert sess.rejected_retriggers() == 0


def test_identical_sessions_produce_identical_output():
    runs = []
    for _ in range(2):
        sess = make_session(seed=21)
        sess.run_script(duet_script())
        runs.append(
            (
                delivered_rows(sess),
                export_acoustic_log(sess.acoustic_log()),
                [
                    (r.signal_ms, r.finalize_ms, r.first_token_ms, r.first_note_sound_ms)
                    for r in sess.engine.reports
                ],
            )
        )
    assert runs[0] == runs[1]


def test_run_script_enforces_time_cap():
    sess = make_session()
    with pytest.raises(RuntimeError, match="time cap"):
        sess.run_script([note_on(60, 64, 10_000.0)], max_ms=5_000.0)


def test_probe_measures_exact_action_latency():
    io = VirtualProbeIo(quiet_model())
    assert io.probe(60, 64) == pytest.approx(120.0 - 0.6 * 63)
    assert io.probe(60, 127) == pytest.approx(120.0 - 0.6 * 126)


# -- live threads -----------------------------------------------------------------


def test_live_runner_plays_a_turn_on_real_threads():
    clock = SystemClock()
    tok = TokenizerConfig()
    sched = OutputScheduler(flat_table(0.0))
    backend = MarkovBackend(tok, CostModel(0.05, 0.1), clock)
    eng = DuetEngine(
        backend,
        tok,
        EngineConfig(
            sampling=SamplingParams(seed=7, max_new_tokens=32),
            speculative_policy=SpeculativePolicy.ELAPSED,
        ),
        sched,
        clock,
    )
    out: list = []
    runner = LiveRunner(eng, sched, clock, out.append)
    runner.start()
    try:
        eng.submit(note_on(60, 70, clock.now_ms()))
        time.sleep(0.05)
        eng.submit(note_off(60, clock.now_ms()))
        time.sleep(0.02)
        eng.submit(control(SOFT, 127, clock.now_ms()))
        eng.submit(control(SOFT, 0, clock.now_ms()))
        deadline = time.monotonic() + 10.0
        while time.monotonic() < deadline:
            if any(e.kind is EventKind.NOTE_ON for e in out):
                break
            time.sleep(0.005)
        else:
            pytest.fail("no generated note reached the output")
        # ask for the keyboard back; the cut should settle quickly
        eng.submit(control(SOFT, 127, clock.now_ms()))
        deadline = time.monotonic() + 5.0
        while time.monotonic() < deadline:
            if eng.phase is Phase.LISTEN and not sched.has_pending(lambda e: True):
                break
            time.sleep(0.005)
        else:
            pytest.fail("reclaim did not settle")
    finally:
        runner.stop()
    ons = [e for e in out if e.kind is EventKind.NOTE_ON]
    offs = [e for e in out if e.kind is EventKind.NOTE_OFF]
    assert ons and len(ons) == len(offs)
    assert eng.generated_history


# -- replay -----------------------------------------------------------------------


def scale_session(n=24):
    notes = [
        Note(52 + (i % 20), 250.0 * i, 180.0, 30 + (i * 7) % 90)
        for i in range(n)
    ]
    return SmfSession(notes=notes, generated=[False] * n, pedals=[])


def test_replay_reactuates_cleanly_with_matching_table():
    from pianoduet.session import calibrate_virtual

    model = quiet_model()
    table = calibrate_virtual(model)
    session = scale_session()
    result = replay_performance(session, table, instrument_model=model)
    assert result.scheduled_notes == result.sent_notes == 24
    assert result.dropped_note_ons == 0
    assert result.stuck_pitches == set()
    # only whole-ms tick rounding separates the strike from its target
    assert result.max_timing_error_ms < 1.0
    result.assert_clean()


def test_replay_flags_a_miscalibrated_table():
    model = quiet_model()
    session = scale_session()
    result = replay_performance(session, flat_table(20.0), instrument_model=model)
    assert result.max_timing_error_ms > 2.0
    with pytest.raises(ReplayInvariantError, match="timing error"):
        result.assert_clean()


def test_replay_flags_action_rejections_and_gap_violations():
    model = quiet_model()
    notes = [Note(60, 0.0, 15.0, 80), Note(60, 20.0, 20.0, 80)]
    session = SmfSession(notes=notes, generated=[False, False], pedals=[])
    result = replay_performance(
        session,
        flat_table(0.0),
        SchedulerConfig(retrigger_gap_ms=5.0),
        instrument_model=model,
    )
    assert result.retrigger_violations
    assert result.rejected_retriggers >= 1
    with pytest.raises(ReplayInvariantError):
        result.assert_clean()


def test_replay_survives_backpressure_without_dropping():
    from pianoduet.session import calibrate_virtual

    model = quiet_model()
    n = 16
    notes = [Note(60 + (i % 8), 100.0 * i, 50.0, 64) for i in range(n)]
    session = SmfSession(notes=notes, generated=[False] * n, pedals=[])
    result = replay_performance(
        session,
        calibrate_virtual(model),
        SchedulerConfig(max_pending=4),
        instrument_model=model,
    )
    assert result.scheduled_notes == result.sent_notes == n
    assert result.dropped_note_ons == 0
    result.assert_clean()
