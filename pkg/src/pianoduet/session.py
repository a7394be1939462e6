"""Session runners: simulated, live-threaded, calibration, and replay.

The simulated runner drives a whole duet on a virtual clock with
discrete-event advancement, so minutes of music and seconds of simulated
inference cost run in milliseconds of wall time while every timing rule
still applies.  The live runner is the same wiring with real threads.
"""
from __future__ import annotations

import logging
import math
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .backend import Backend, CostModel, MarkovBackend
from .calibration import CalibrationTable, run_calibration
from .clock import Clock, VirtualClock
from .engine import DuetEngine, EngineConfig, EventLog, Phase
from .instrument import AcousticKind, InstrumentModel, VirtualInstrument
from .midi import EventKind, MidiEvent, note_off, note_on
from .scheduler import (
    BackpressureError,
    EventState,
    OutputScheduler,
    ScheduledEvent,
    SchedulerConfig,
    scan_retrigger_violations,
)
from .smf import SmfSession
from .tokenizer import TokenizerConfig

log = logging.getLogger(__name__)


class VirtualProbeIo:
    """Calibration probes against a twin instrument on a private clock."""

    def __init__(self, model: InstrumentModel, settle_ms: float = 1000.0) -> None:
        self._instrument = VirtualInstrument(model)
        self._clock = VirtualClock()
        self._settle_ms = max(settle_ms, model.base_latency_ms + model.reset_time_ms + 50.0)

    def probe(self, pitch: int, velocity: int) -> float | None:
        now = self._clock.now_ms()
        events = self._instrument.receive(note_on(pitch, velocity, now))
        sounded = [e for e in events if e.kind is AcousticKind.SOUNDED]
        release = now + self._settle_ms / 2
        self._clock.advance_to(release)
        self._instrument.receive(note_off(pitch, release))
        self._clock.advance_to(now + self._settle_ms)
        if not sounded:
            return None
        return sounded[0].time_ms - now


def calibrate_virtual(
    model: InstrumentModel,
    velocities: Iterable[int] | None = None,
    repeats: int = 5,
    instrument_id: str = "virtual",
) -> CalibrationTable:
    io = VirtualProbeIo(model)
    return run_calibration(
        io,
        None if velocities is None else list(velocities),
        repeats,
        instrument_id=instrument_id,
    )


def _aligned(t_ms: float, quantum_ms: float) -> float:
    return math.ceil(t_ms / quantum_ms - 1e-9) * quantum_ms


@dataclass
class SimSession:
    """A fully wired duet on a virtual clock.

    Build one, then feed it a script of input events.  The script's
    timestamps are the human's playing times; the engine, scheduler, and
    instrument all run against the same virtual clock.
    """

    tok_config: TokenizerConfig = field(default_factory=TokenizerConfig)
    engine_config: EngineConfig = field(default_factory=EngineConfig)
    scheduler_config: SchedulerConfig = field(default_factory=SchedulerConfig)
    instrument_model: InstrumentModel = field(default_factory=InstrumentModel)
    cost: CostModel = field(default_factory=CostModel)
    table: CalibrationTable | None = None
    backend: Backend | None = None

    def __post_init__(self) -> None:
        self.clock = VirtualClock()
        self.instrument = VirtualInstrument(self.instrument_model)
        if self.table is None:
            self.table = calibrate_virtual(self.instrument_model)
        self.scheduler = OutputScheduler(self.table, self.scheduler_config)
        if self.backend is None:
            self.backend = MarkovBackend(self.tok_config, self.cost, self.clock)
        self.log = EventLog(self.clock)
        self.engine = DuetEngine(
            self.backend,
            self.tok_config,
            self.engine_config,
            self.scheduler,
            self.clock,
            event_log=self.log,
        )
        self.clock.on_advance = self._pump_output
        self.delivered: list[MidiEvent] = []

    # -- output pump -----------------------------------------------------------

    def _pump_output(self, old_ms: float, new_ms: float) -> None:
        """Tick the scheduler at quantum-aligned moments inside (old, new]."""
        q = self.scheduler.config.tick_quantum_ms
        guard = 0
        while True:
            due = self.scheduler.next_due_ms()
            if due is None or due > new_ms:
                return
            t = min(new_ms, max(old_ms, _aligned(due, q)))
            self._tick_at(t)
            if t >= new_ms:
                return
            old_ms = t
            guard += 1
            if guard > 1_000_000:
                raise RuntimeError("output pump failed to make progress")

    def _tick_at(self, t_ms: float) -> None:
        for ev in self.scheduler.tick(t_ms):
            self.instrument.receive(ev)
            self.delivered.append(ev)

    # -- driving -----------------------------------------------------------------

    def run_script(
        self,
        events: Iterable[MidiEvent],
        *,
        max_ms: float = 3_600_000.0,
    ) -> None:
        """Feed timestamped input events and run until the session settles."""
        script = deque(sorted(events, key=lambda e: e.timestamp_ms))
        iterations = 0
        while True:
            iterations += 1
            if iterations > 5_000_000:
                raise RuntimeError("simulation failed to settle")
            now = self.clock.now_ms()
            if now > max_ms:
                raise RuntimeError(f"simulation passed the {max_ms}ms time cap")
            while script and script[0].timestamp_ms <= now:
                self.engine.submit(script.popleft())
            worked = self.engine.poll()
            self._tick_at(self.clock.now_ms())
            if worked:
                continue
            candidates: list[float] = []
            if script:
                candidates.append(script[0].timestamp_ms)
            due = self.scheduler.next_due_ms()
            q = self.scheduler.config.tick_quantum_ms
            if due is not None:
                candidates.append(max(now, _aligned(due, q)))
            if self.engine.phase is not Phase.LISTEN:
                candidates.append(now + 25.0)
            if not candidates:
                break
            self.clock.advance_to(max(now, min(candidates)))
        self._tick_at(self.clock.now_ms())

    # -- results -------------------------------------------------------------------

    def acoustic_log(self):
        return self.instrument.acoustic_log

    def retrigger_violations(self) -> list[tuple[int, float, float]]:
        return scan_retrigger_violations(
            self.scheduler.emitted, self.instrument_model.reset_time_ms
        )

    def rejected_retriggers(self) -> int:
        return sum(
            1
            for e in self.instrument.acoustic_log
            if e.kind is AcousticKind.REJECTED_RETRIGGER
        )


class LiveRunner:
    """Inference and output pumps on real threads around one engine."""

    def __init__(
        self,
        engine: DuetEngine,
        scheduler: OutputScheduler,
        clock: Clock,
        output: Callable[[MidiEvent], None],
        idle_sleep_ms: float = 1.0,
    ) -> None:
        self.engine = engine
        self.scheduler = scheduler
        self.clock = clock
        self.output = output
        self.idle_sleep_ms = idle_sleep_ms
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    def start(self) -> None:
        self._threads = [
            threading.Thread(target=self._inference_loop, name="duet-inference", daemon=True),
            threading.Thread(target=self._output_loop, name="duet-output", daemon=True),
        ]
        for t in self._threads:
            t.start()

    def stop(self, timeout_s: float = 5.0) -> None:
        self._stop.set()
        for t in self._threads:
            t.join(timeout=timeout_s)

    def _inference_loop(self) -> None:
        while not self._stop.is_set():
            try:
                worked = self.engine.poll()
            except Exception:
                log.exception("engine poll failed")
                worked = False
            if not worked:
                self.clock.sleep_ms(self.idle_sleep_ms)

    def _output_loop(self) -> None:
        quantum = self.scheduler.config.tick_quantum_ms
        while not self._stop.is_set():
            try:
                for ev in self.scheduler.tick(self.clock.now_ms()):
                    self.output(ev)
            except Exception:
                log.exception("output tick failed")
            self.clock.sleep_ms(quantum)


# -- replay ---------------------------------------------------------------------


class ReplayInvariantError(Exception):
    pass


@dataclass
class ReplayResult:
    scheduled_notes: int
    sent_notes: int
    dropped_note_ons: int
    retrigger_violations: list[tuple[int, float, float]]
    rejected_retriggers: int
    stuck_pitches: set[int]
    max_timing_error_ms: float

    def assert_clean(self, timing_tolerance_ms: float = 2.0) -> None:
        problems = []
        if self.retrigger_violations:
            problems.append(f"{len(self.retrigger_violations)} retrigger gap violations")
        if self.rejected_retriggers:
            problems.append(f"{self.rejected_retriggers} strikes rejected by the instrument")
        if self.stuck_pitches:
            problems.append(f"keys left down: {sorted(self.stuck_pitches)}")
        if self.max_timing_error_ms > timing_tolerance_ms:
            problems.append(
                f"worst timing error {self.max_timing_error_ms:.3f}ms "
                f"exceeds {timing_tolerance_ms}ms"
            )
        if problems:
            raise ReplayInvariantError("; ".join(problems))


def replay_performance(
    session: SmfSession,
    table: CalibrationTable,
    scheduler_config: SchedulerConfig | None = None,
    instrument_model: InstrumentModel | None = None,
    *,
    lookahead_ms: float = 500.0,
) -> ReplayResult:
    """Re-actuate a recorded performance through the output path.

    Notes are fed to the scheduler just-in-time, the way live generation
    does, and the virtual instrument's log is checked against the same
    invariants the engine promises: no retrigger-gap violations, nothing
    rejected by the action, no stuck keys, and compensated timing.
    Times are shifted by the lookahead so the first note has a full
    actuation runway.
    """
    model = instrument_model or InstrumentModel()
    clock = VirtualClock()
    scheduler = OutputScheduler(table, scheduler_config)
    instrument = VirtualInstrument(model)
    quantum = scheduler.config.tick_quantum_ms

    notes = deque(
        sorted(
            ((n.pitch, n.onset_ms + lookahead_ms, n.off_ms + lookahead_ms, n.velocity)
             for n in session.notes),
            key=lambda r: r[1],
        )
    )
    scheduled_ons: list[ScheduledEvent] = []

    def drain_due() -> None:
        due = scheduler.next_due_ms()
        while due is not None:
            t = max(clock.now_ms(), _aligned(due, quantum))
            if notes and t > notes[0][1] - lookahead_ms:
                return  # feed more before ticking past the next admission
            clock.advance_to(t)
            for ev in scheduler.tick(t):
                instrument.receive(ev)
            due = scheduler.next_due_ms()

    while notes:
        now = clock.now_ms()
        blocked = False
        while notes and notes[0][1] - lookahead_ms <= now:
            pitch, on_t, off_t, vel = notes[0]
            try:
                on_ev, _ = scheduler.schedule_note(pitch, vel, on_t, off_t)
            except BackpressureError:
                blocked = True
                break
            scheduled_ons.append(on_ev)
            notes.popleft()
        if blocked:
            # Queue full: admission can only resume after the earliest send
            # goes out, so tick to it even past the next admission point.
            due = scheduler.next_due_ms()
            if due is None:
                raise RuntimeError("scheduler full with nothing due")
            t = max(now, _aligned(due, quantum))
            clock.advance_to(t)
            for ev in scheduler.tick(t):
                instrument.receive(ev)
            continue
        drain_due()
        if notes:
            next_admit = notes[0][1] - lookahead_ms
            if next_admit > clock.now_ms():
                clock.advance_to(next_admit)
    drain_due()
    due = scheduler.next_due_ms()
    while due is not None:
        t = max(clock.now_ms(), _aligned(due, quantum))
        clock.advance_to(t)
        for ev in scheduler.tick(t):
            instrument.receive(ev)
        due = scheduler.next_due_ms()

    # Pair each sent NoteOn with its acoustic outcome, per pitch in order.
    outcomes: dict[int, deque] = {}
    for e in instrument.raw_log:
        if e.kind in (AcousticKind.SOUNDED, AcousticKind.REJECTED_RETRIGGER):
            outcomes.setdefault(e.pitch, deque()).append(e)
    max_err = 0.0
    sent = 0
    for on_ev in sorted(
        (e for e in scheduled_ons if e.state is EventState.SENT),
        key=lambda e: (e.sent_ms, e.seq),
    ):
        sent += 1
        queue = outcomes.get(on_ev.payload.pitch)
        if not queue:
            continue
        outcome = queue.popleft()
        if outcome.kind is AcousticKind.SOUNDED:
            # Compare with where the resolved send should land the strike;
            # retrigger resolution moves sends on purpose, and that move is
            # policy, not timing error.
            ideal = on_ev.send_ms + table.latency_for(on_ev.payload.velocity)
            max_err = max(max_err, abs(outcome.time_ms - ideal))

    return ReplayResult(
        scheduled_notes=len(scheduled_ons),
        sent_notes=sent,
        dropped_note_ons=sum(
            1 for e in scheduler.dropped if e.kind is EventKind.NOTE_ON
        ),
        retrigger_violations=scan_retrigger_violations(
            scheduler.emitted, model.reset_time_ms
        ),
        rejected_retriggers=sum(
            1
            for e in instrument.acoustic_log
            if e.kind is AcousticKind.REJECTED_RETRIGGER
        ),
        stuck_pitches=instrument.engaged_pitches(),
        max_timing_error_ms=max_err,
    )
