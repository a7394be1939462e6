"""Turn-taking duet engine.

The engine owns the conversation between a human at the keyboard and a
generative backend.  While the human plays (Listen) it keeps the
backend's cache almost caught up by prefilling small chunks of newly
stable context, so that when the soft pedal hands the keyboard over
only a residual remains.  At takeover it speculatively finalizes still-
held notes, prefills the residual, and starts streaming decoded tokens
to the output scheduler.  A second soft-pedal press reclaims the
keyboard; whatever actually sounded is merged back into the tracked
performance so the next turn's context is faithful.

All engine state is owned by the single thread that calls ``poll``;
``submit`` is the only method other threads may call.
"""
from __future__ import annotations

import bisect
import logging
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable

from .backend import Backend, BackendError, SamplingParams
from .clock import Clock
from .midi import (
    EventKind,
    MidiEvent,
    Note,
    Pedal,
    PedalEvent,
    NoteTracker,
    SequencingError,
    SUSTAIN_CONTROLLER,
    TakeoverSignal,
    TrackerConfig,
)
from .scheduler import EventState, OutputScheduler, BackpressureError, ScheduledEvent
from .tokenizer import (
    SEGMENT,
    START,
    Token,
    TokenKind,
    TokenizerConfig,
    Vocabulary,
    bucket_velocity,
    dur_token,
    event_order_key,
    note_token,
    onset_token,
    pedal_token,
    quantize_duration,
    quantize_time,
    quantize_velocity,
)

log = logging.getLogger(__name__)


class Phase(Enum):
    LISTEN = "listen"
    FINALIZING = "finalizing"
    GENERATING = "generating"


class SpeculativePolicy(Enum):
    ELAPSED = "elapsed"
    ELAPSED_PLUS_EXTENSION = "elapsed_plus_extension"
    MODEL_PREDICTED = "model_predicted"


class ReclaimFlush(Enum):
    CUT_IMMEDIATELY = "cut_immediately"
    FINISH_SOUNDING_NOTES = "finish_sounding_notes"


@dataclass(frozen=True)
class EngineConfig:
    prefill_chunk_tokens: int = 64
    speculative_policy: SpeculativePolicy = SpeculativePolicy.MODEL_PREDICTED
    extension_ms: float = 500.0
    max_context_tokens: int = 8192
    sampling: SamplingParams = field(default_factory=SamplingParams)
    reclaim_flush: ReclaimFlush = ReclaimFlush.CUT_IMMEDIATELY
    continuous_prefill: bool = True  # off: nothing prefills until takeover
    key_press_reclaim: bool = False
    allow_empty_takeover: bool = False
    # Generated notes are anchored this far past the takeover instant so
    # their sends stay ahead of the worst actuation latency.
    schedule_headroom_ms: float = 150.0
    generation_horizon_ms: float = 2000.0

    def __post_init__(self) -> None:
        if self.prefill_chunk_tokens < 1:
            raise ValueError("prefill_chunk_tokens must be positive")
        if self.max_context_tokens < self.prefill_chunk_tokens:
            raise ValueError("max_context_tokens smaller than one chunk")
        if self.extension_ms < 0 or self.schedule_headroom_ms < 0:
            raise ValueError("durations must be non-negative")
        if self.generation_horizon_ms <= 0:
            raise ValueError("generation_horizon_ms must be positive")


@dataclass
class TakeoverReport:
    """Latency record for one takeover.  All times are absolute clock
    milliseconds; subtract ``signal_ms`` for latencies."""

    signal_ms: float
    hanging_count: int
    finalize_ms: float = 0.0
    first_token_ms: float | None = None
    first_note_sound_ms: float | None = None
    turn_index: int = 0


@dataclass(frozen=True)
class LogEntry:
    time_ms: float
    event: str
    fields: tuple[tuple[str, object], ...]

    def render(self) -> str:
        parts = [f"ts={self.time_ms:.3f}", f"event={self.event}"]
        for key, value in self.fields:
            if isinstance(value, float):
                parts.append(f"{key}={value:.3f}")
            elif isinstance(value, bool):
                parts.append(f"{key}={str(value).lower()}")
            else:
                parts.append(f"{key}={value}")
        return " ".join(parts)


class EventLog:
    """Structured, subscribable engine log; renders to stable text lines."""

    def __init__(self, clock: Clock) -> None:
        self._clock = clock
        self.entries: list[LogEntry] = []
        self.subscribers: list[Callable[[LogEntry], None]] = []

    def emit(self, event: str, **fields: object) -> LogEntry:
        entry = LogEntry(self._clock.now_ms(), event, tuple(fields.items()))
        self.entries.append(entry)
        for sub in list(self.subscribers):
            sub(entry)
        return entry

    def lines(self) -> list[str]:
        return [e.render() for e in self.entries]


class _TokenCursor:
    """Incremental tokenizer over the engine's growing event timeline.

    Emits, in order, exactly the tokens a one-shot tokenization of the
    final performance would contain, provided items are only ever
    inserted at or past the cursor (which the watermark rule and the
    merge rule guarantee).
    """

    def __init__(self, config: TokenizerConfig, base_ms: int = 0) -> None:
        self.config = config
        self.base_ms = base_ms
        self.position = 0
        self.segment = 0
        self.started = False

    def pull(
        self,
        timeline: list[Note | PedalEvent],
        *,
        up_to_q: int | None = None,
        stop_index: int | None = None,
    ) -> list[Token]:
        out: list[Token] = []
        if not self.started:
            out.append(START)
            self.started = True
        end = len(timeline) if stop_index is None else min(stop_index, len(timeline))
        cfg = self.config
        while self.position < end:
            item = timeline[self.position]
            t = event_order_key(item, cfg)[0]
            if up_to_q is not None and t >= up_to_q:
                break
            rel = t - self.base_ms
            if rel < 0:
                raise ValueError("event precedes the context base")
            target_segment = rel // cfg.segment_ms
            while self.segment < target_segment:
                out.append(SEGMENT)
                self.segment += 1
            offset = rel - self.segment * cfg.segment_ms
            if isinstance(item, PedalEvent):
                out.append(pedal_token(item.on, offset))
            else:
                out.append(note_token(item.pitch, quantize_velocity(item.velocity, cfg)))
                out.append(onset_token(offset))
                out.append(dur_token(quantize_duration(item.duration_ms, cfg)))
            self.position += 1
        return out

    def probe_tokens(self, pitch: int, velocity: int, onset_ms: float) -> list[Token]:
        """The segment advance plus NOTE and ONSET a note here would emit,
        without moving the cursor."""
        cfg = self.config
        rel = quantize_time(onset_ms, cfg) - self.base_ms
        target_segment = rel // cfg.segment_ms
        toks: list[Token] = [SEGMENT] * (target_segment - self.segment)
        toks.append(note_token(pitch, quantize_velocity(velocity, cfg)))
        toks.append(onset_token(rel - target_segment * cfg.segment_ms))
        return toks


@dataclass
class _GeneratedNote:
    note: Note  # target times; velocity is the bucket representative
    on_event: ScheduledEvent
    off_event: ScheduledEvent


@dataclass
class _GeneratedPedal:
    on: bool
    time_ms: float
    event: ScheduledEvent


class DuetEngine:
    def __init__(
        self,
        backend: Backend,
        tokenizer_config: TokenizerConfig,
        config: EngineConfig,
        scheduler: OutputScheduler,
        clock: Clock,
        tracker_config: TrackerConfig | None = None,
        event_log: EventLog | None = None,
    ) -> None:
        self.backend = backend
        self.tok_config = tokenizer_config
        self.config = config
        self.scheduler = scheduler
        self.clock = clock
        self.log = event_log or EventLog(clock)
        self.tracker = NoteTracker(tracker_config)

        self.phase = Phase.LISTEN
        self.reports: list[TakeoverReport] = []
        self.generated_history: list[Note] = []  # merged machine notes, all turns
        self.timeline: list[Note | PedalEvent] = []
        self._inbox: deque[MidiEvent] = deque()
        self._cursor = _TokenCursor(tokenizer_config)
        self._staged: list[Token] = []  # tokenized, stable, awaiting prefill
        self._context_tokens: list[Token] = []  # mirror of prefilled cache
        self.degraded = False
        self.notes_dropped_while_generating = 0

        self._signal_ms: float | None = None
        self._reclaim_requested = False
        self._turn_index = 0
        self._turn_mark: int | None = None
        self._anchor_ms = 0.0
        self._gen_shift_ms: float | None = None
        self._gen_segment = 0
        self._gen_tokens = 0
        self._gen_done = False
        self._gen_frontier_ms = 0.0
        self._gen_notes: list[_GeneratedNote] = []
        self._gen_pedals: list[_GeneratedPedal] = []
        self._gen_last_sustain: bool | None = None
        self._pending_note: tuple[int, int] | None = None
        self._pending_onset: int | None = None
        self._gen_backlog: Note | None = None  # completed note awaiting queue room
        self._sent_feedback: deque[tuple[str, ScheduledEvent]] = deque()

        scheduler.on_sent = self._feedback_sent
        scheduler.on_dropped = self._feedback_dropped

    # -- input (only method other threads may call) --------------------------

    def submit(self, ev: MidiEvent) -> None:
        self._inbox.append(ev)

    # -- main loop ------------------------------------------------------------

    def poll(self) -> bool:
        """One unit of engine work; returns whether anything happened."""
        now = self.clock.now_ms()
        self._drain_inbox()
        self._drain_feedback()
        if self.phase is Phase.FINALIZING:
            self._run_takeover()
            return True
        if self.phase is Phase.LISTEN:
            return self.maybe_prefill_chunk(now) > 0
        return self._generation_step(now)

    # -- inbox -----------------------------------------------------------------

    def _drain_inbox(self) -> None:
        while self._inbox:
            ev = self._inbox.popleft()
            if self.phase is Phase.LISTEN:
                self._ingest_listen(ev)
                if self.phase is Phase.FINALIZING:
                    # The rest of the queue belongs to the machine's turn.
                    break
            else:
                if not self._ingest_generating(ev):
                    break

    def _ingest_listen(self, ev: MidiEvent) -> None:
        try:
            emitted = self.tracker.ingest(ev)
        except SequencingError as e:
            self.log.emit("event_rejected", reason=str(e))
            return
        if ev.kind is EventKind.NOTE_ON and ev.velocity > 0:
            self.log.emit("human_note_on", pitch=ev.pitch, velocity=ev.velocity,
                          at=ev.timestamp_ms)
        for item in emitted:
            if isinstance(item, TakeoverSignal):
                self._signal_ms = item.time_ms
                self._set_phase(Phase.FINALIZING)
            elif isinstance(item, PedalEvent):
                if item.pedal is Pedal.SUSTAIN:
                    self._insert_timeline(item)
                    self.log.emit("human_pedal", on=item.on, at=item.time_ms)
            else:
                self._insert_timeline(item)
                self.log.emit("human_note", pitch=item.pitch, onset=item.onset_ms,
                              duration=item.duration_ms, velocity=item.velocity)

    def _ingest_generating(self, ev: MidiEvent) -> bool:
        """Returns False when the event was pushed back for the next phase."""
        if ev.kind is EventKind.CONTROL:
            try:
                emitted = self.tracker.ingest(ev)
            except SequencingError as e:
                self.log.emit("event_rejected", reason=str(e))
                return True
            for item in emitted:
                if isinstance(item, TakeoverSignal):
                    self._reclaim_requested = True
                    self.log.emit("reclaim_signal", at=item.time_ms)
                elif isinstance(item, PedalEvent) and item.pedal is Pedal.SUSTAIN:
                    self._insert_timeline(item)
                    self.log.emit("human_pedal", on=item.on, at=item.time_ms)
            return True
        if (
            self.config.key_press_reclaim
            and ev.kind is EventKind.NOTE_ON
            and ev.velocity > 0
        ):
            # Reclaim, and replay this key press once we are listening again.
            self._reclaim_requested = True
            self._inbox.appendleft(ev)
            self.log.emit("reclaim_signal", at=ev.timestamp_ms, by="key_press")
            return False
        self.notes_dropped_while_generating += 1
        self.log.emit("input_dropped", kind=ev.kind.value, pitch=ev.pitch,
                      at=ev.timestamp_ms)
        return True

    def _insert_timeline(self, item: Note | PedalEvent) -> None:
        key = event_order_key(item, self.tok_config)
        idx = bisect.bisect_right(
            self.timeline, key, key=lambda it: event_order_key(it, self.tok_config)
        )
        if idx < self._cursor.position:
            raise AssertionError(
                "timeline insertion behind the prefill cursor; watermark rule broken"
            )
        self.timeline.insert(idx, item)

    # -- feedback from the output path ----------------------------------------

    def _feedback_sent(self, ev: ScheduledEvent) -> None:
        self._sent_feedback.append(("sent", ev))

    def _feedback_dropped(self, ev: ScheduledEvent) -> None:
        self._sent_feedback.append(("dropped", ev))

    def _drain_feedback(self) -> None:
        while self._sent_feedback:
            what, ev = self._sent_feedback.popleft()
            if ev.kind is not EventKind.NOTE_ON:
                continue
            if what == "sent":
                self.log.emit("note_sent", pitch=ev.payload.pitch,
                              target=ev.target_sound_ms)
                report = self._current_report()
                if report is not None and report.first_note_sound_ms is None:
                    report.first_note_sound_ms = ev.target_sound_ms
                    self._emit_report(report)
            else:
                self.log.emit("note_dropped", pitch=ev.payload.pitch,
                              target=ev.target_sound_ms)

    def _current_report(self) -> TakeoverReport | None:
        return self.reports[-1] if self.reports else None

    def _emit_report(self, report: TakeoverReport) -> None:
        self.log.emit(
            "takeover_report",
            turn=report.turn_index,
            signal=report.signal_ms,
            hanging=report.hanging_count,
            finalize_ms=report.finalize_ms,
            first_token_ms=-1.0 if report.first_token_ms is None else report.first_token_ms,
            first_note_sound_ms=(
                -1.0 if report.first_note_sound_ms is None else report.first_note_sound_ms
            ),
        )

    # -- listen phase -----------------------------------------------------------

    def watermark_ms(self, now_ms: float) -> float:
        """Context before this instant is stable; held keys pin it down."""
        hanging = self.tracker.hanging_notes()
        if hanging:
            return min(hanging[0].onset_ms, now_ms)
        return now_ms

    def maybe_prefill_chunk(self, now_ms: float) -> int:
        """Stage newly stable tokens and push at most one chunk to the backend."""
        if not self.config.continuous_prefill or self.degraded:
            return 0
        wm_q = quantize_time(self.watermark_ms(now_ms), self.tok_config)
        self._staged.extend(self._cursor.pull(self.timeline, up_to_q=wm_q))
        self._maybe_trim_context()
        if not self._staged:
            return 0
        chunk = self._staged[: self.config.prefill_chunk_tokens]
        try:
            self.backend.prefill(chunk)
        except BackendError as e:
            self.degraded = True
            self.log.emit("backend_degraded", reason=str(e))
            return 0
        self._context_tokens.extend(chunk)
        del self._staged[: len(chunk)]
        self.log.emit("prefill_chunk", tokens=len(chunk), watermark=float(wm_q),
                      cache=len(self._context_tokens))
        return len(chunk)

    def _maybe_trim_context(self) -> None:
        """Drop the oldest whole segments once the cache would overflow."""
        cfg = self.config
        total = len(self._context_tokens) + len(self._staged)
        if total <= cfg.max_context_tokens:
            return
        keep_budget = int(cfg.max_context_tokens * 0.75)
        seg_ms = self.tok_config.segment_ms
        base = self._cursor.base_ms
        # Find the oldest segment boundary that fits the budget.
        while True:
            base += seg_ms
            kept = [
                it
                for it in self.timeline
                if event_order_key(it, self.tok_config)[0] >= base
            ]
            cost = 1 + sum(3 if isinstance(it, Note) else 1 for it in kept)
            cost += max(
                (event_order_key(it, self.tok_config)[0] - base) // seg_ms
                for it in kept
            ) if kept else 0
            if cost <= keep_budget or not kept:
                break
        dropped = len(self.timeline) - len(kept)
        self.timeline = kept
        try:
            self.backend.rollback(0)
        except BackendError as e:
            self.degraded = True
            self.log.emit("backend_degraded", reason=str(e))
            return
        self._cursor = _TokenCursor(self.tok_config, base_ms=base)
        self._staged = []
        self._context_tokens = []
        self.log.emit("context_trimmed", new_base=base, dropped_events=dropped)

    # -- takeover ----------------------------------------------------------------

    def _run_takeover(self) -> None:
        assert self._signal_ms is not None
        signal = self._signal_ms
        started = self.clock.now_ms()
        if self.tracker.notes_seen == 0 and not self.timeline:
            if not self.config.allow_empty_takeover:
                self.log.emit("takeover_declined", reason="empty_context")
                self._signal_ms = None
                self._set_phase(Phase.LISTEN)
                return
        hanging = self.tracker.hanging_notes()
        try:
            self.backend.checkpoint()  # speculation anchor
            for note in hanging:
                self._finalize_hanging(note, signal)
            rest = self._staged + self._cursor.pull(self.timeline)
            self._staged = []
            if rest:
                self.backend.prefill(rest)
                self._context_tokens.extend(rest)
            self._turn_mark = self.backend.checkpoint()
        except BackendError as e:
            self.degraded = True
            self.log.emit("takeover_abort", reason=str(e))
            self._signal_ms = None
            self._set_phase(Phase.LISTEN)
            return
        if self.degraded:
            self.degraded = False
            self.log.emit("backend_recovered")

        now = self.clock.now_ms()
        report = TakeoverReport(
            signal_ms=signal,
            hanging_count=len(hanging),
            finalize_ms=now,
            turn_index=self._turn_index,
        )
        self.reports.append(report)
        self.log.emit("takeover_finalized", hanging=len(hanging),
                      finalize_ms=now, took=now - started,
                      residual=len(self._context_tokens))

        self._anchor_ms = now + self.config.schedule_headroom_ms
        self._gen_shift_ms = None
        self._gen_segment = self._cursor.segment
        self._gen_tokens = 0
        self._gen_done = False
        self._gen_frontier_ms = self._anchor_ms
        self._gen_notes = []
        self._gen_pedals = []
        self._gen_last_sustain = None
        self._pending_note = None
        self._pending_onset = None
        self._gen_backlog = None
        self._reclaim_requested = False
        self._signal_ms = None
        self._set_phase(Phase.GENERATING)

    def _finalize_hanging(self, note: Note, signal_ms: float) -> None:
        """Close one held key with a speculative duration and log it.

        The closed note lands in the timeline at the cursor; the next
        probe's context pull, or the final residual pull, prefills it.
        """
        cfg = self.config
        tok_cfg = self.tok_config
        elapsed = max(signal_ms - note.onset_ms, float(tok_cfg.time_resolution_ms))
        policy = cfg.speculative_policy
        if policy is SpeculativePolicy.ELAPSED:
            dur_q = quantize_duration(elapsed, tok_cfg)
        elif policy is SpeculativePolicy.ELAPSED_PLUS_EXTENSION:
            dur_q = quantize_duration(elapsed + cfg.extension_ms, tok_cfg)
        else:
            dur_q = self._model_predicted_duration(note, elapsed)
        closed = self.tracker.finalize_open(note.pitch, float(dur_q))
        self._insert_timeline(closed)
        self.log.emit("hanging_finalized", pitch=note.pitch, elapsed=elapsed,
                      duration=float(dur_q), policy=policy.value)

    def _model_predicted_duration(self, note: Note, elapsed_ms: float) -> int:
        """Ask the model how long this held note should be, then clamp."""
        tok_cfg = self.tok_config
        # Everything ordered before the hanging note must be in the cache
        # before the probe so the model sees the real context.
        key = event_order_key(
            Note(note.pitch, note.onset_ms, note.duration_ms, note.velocity), tok_cfg
        )
        idx = bisect.bisect_right(
            self.timeline, key, key=lambda it: event_order_key(it, tok_cfg)
        )
        toks = self._staged + self._cursor.pull(self.timeline, stop_index=idx)
        self._staged = []
        if toks:
            self.backend.prefill(toks)
            self._context_tokens.extend(toks)
        probe = self._cursor.probe_tokens(note.pitch, note.velocity, note.onset_ms)
        mark = self.backend.checkpoint()
        self.backend.prefill(probe)
        decoded = self.backend.decode_next(self.config.sampling)
        self.backend.rollback(mark)
        elapsed_q = quantize_duration(elapsed_ms, tok_cfg)
        if decoded.kind is TokenKind.DUR:
            predicted = decoded.values[0]
        else:
            # The model declined to answer with a duration; fall back to
            # elapsed plus the fixed extension.
            predicted = quantize_duration(
                elapsed_ms + self.config.extension_ms, tok_cfg
            )
            self.log.emit("speculation_fallback", pitch=note.pitch,
                          got=decoded.kind.value)
        return min(max(predicted, elapsed_q), tok_cfg.max_duration_ms)

    # -- generating phase ----------------------------------------------------------

    def _generation_step(self, now_ms: float) -> bool:
        if self._reclaim_requested:
            self._finish_turn(now_ms, reclaimed=True)
            return True
        worked = self._flush_backlog()
        if not self._gen_done:
            worked = self._decode_some() or worked
        if self._gen_done and self._gen_backlog is None and not self._turn_pending():
            self._finish_turn(self.clock.now_ms(), reclaimed=False)
            return True
        return worked

    def _turn_pending(self) -> bool:
        turn = self._turn_index
        return self.scheduler.has_pending(lambda e: e.tag == turn)

    def _flush_backlog(self) -> bool:
        if self._gen_backlog is None:
            return False
        note = self._gen_backlog
        try:
            self._schedule_generated(note)
        except BackpressureError:
            return False
        self._gen_backlog = None
        return True

    def _decode_some(self) -> bool:
        """Decode ahead of real time up to the horizon, one token at a time."""
        params = self.config.sampling
        decoded_any = False
        while (
            not self._gen_done
            and self._gen_backlog is None
            and self._gen_tokens < params.max_new_tokens
            and self._gen_frontier_ms < self.clock.now_ms() + self.config.generation_horizon_ms
        ):
            try:
                tok = self.backend.decode_next(params)
            except BackendError as e:
                self.log.emit("generation_abort", reason=str(e))
                self._gen_done = True
                break
            self._gen_tokens += 1
            decoded_any = True
            report = self._current_report()
            if report is not None and report.first_token_ms is None:
                report.first_token_ms = self.clock.now_ms()
                self.log.emit("first_token", at=report.first_token_ms,
                              latency=report.first_token_ms - report.signal_ms)
            self._assemble(tok)
            if self._reclaim_requested:
                break
        if self._gen_tokens >= params.max_new_tokens and not self._gen_done:
            self._gen_done = True
            self.log.emit("generation_done", reason="token_budget",
                          tokens=self._gen_tokens)
        return decoded_any

    def _assemble(self, tok: Token) -> None:
        kind = tok.kind
        if kind is TokenKind.END:
            self._gen_done = True
            self.log.emit("generation_done", reason="end_token", tokens=self._gen_tokens)
            return
        if kind is TokenKind.SEGMENT:
            if self._pending_note is not None:
                self._malformed("SEGMENT inside a note")
            self._gen_segment += 1
            return
        if kind is TokenKind.NOTE:
            if self._pending_note is not None:
                self._malformed("NOTE while a note was open")
            self._pending_note = (tok.values[0], tok.values[1])
            self._pending_onset = None
            return
        if kind is TokenKind.ONSET:
            if self._pending_note is None or self._pending_onset is not None:
                self._malformed("stray ONSET")
                return
            self._pending_onset = tok.values[0]
            return
        if kind is TokenKind.DUR:
            if self._pending_note is None or self._pending_onset is None:
                self._malformed("stray DUR")
                return
            pitch, bucket = self._pending_note
            onset = self._pending_onset
            self._pending_note = None
            self._pending_onset = None
            self._complete_note(pitch, bucket, onset, tok.values[0])
            return
        if kind in (TokenKind.PEDAL_ON, TokenKind.PEDAL_OFF):
            if self._pending_note is not None:
                self._malformed(f"{kind.value} inside a note")
            self._complete_pedal(kind is TokenKind.PEDAL_ON, tok.values[0])
            return
        self._malformed(f"unexpected {kind.value}")

    def _malformed(self, what: str) -> None:
        self.log.emit("malformed_generation", detail=what)
        self._pending_note = None
        self._pending_onset = None

    def _generated_time(self, offset_ms: int) -> float:
        base = self._cursor.base_ms
        abs_ms = float(base + self._gen_segment * self.tok_config.segment_ms + offset_ms)
        if self._gen_shift_ms is None:
            # Lock the turn's time shift, in either direction, so its first
            # event lands exactly on the anchor; later events keep their
            # relative spacing but can never land before it.
            self._gen_shift_ms = self._anchor_ms - abs_ms
        return max(abs_ms + self._gen_shift_ms, self._anchor_ms)

    def _complete_note(self, pitch: int, bucket: int, onset: int, duration: int) -> None:
        velocity = bucket_velocity(bucket, self.tok_config)
        target_on = self._generated_time(onset)
        note = Note(pitch, target_on, float(duration), velocity)
        self._gen_backlog = note
        self._flush_backlog()

    def _schedule_generated(self, note: Note) -> None:
        on_ev, off_ev = self.scheduler.schedule_note(
            note.pitch, note.velocity, note.onset_ms, note.off_ms, tag=self._turn_index
        )
        self._gen_notes.append(_GeneratedNote(note, on_ev, off_ev))
        # Pace on onsets: a long held note must not stall decoding of the
        # notes that play under it.
        self._gen_frontier_ms = max(self._gen_frontier_ms, note.onset_ms)
        self.log.emit("generated_note", pitch=note.pitch, velocity=note.velocity,
                      target_on=note.onset_ms, target_off=note.off_ms)

    def _complete_pedal(self, on: bool, offset: int) -> None:
        target = self._generated_time(offset)
        ev = self.scheduler.schedule_control(
            SUSTAIN_CONTROLLER, 127 if on else 0, target, tag=self._turn_index
        )
        self._gen_pedals.append(_GeneratedPedal(on, target, ev))
        self._gen_frontier_ms = max(self._gen_frontier_ms, target)
        self._gen_last_sustain = on
        self.log.emit("generated_pedal", on=on, target=target)

    # -- turn end -------------------------------------------------------------------

    def _finish_turn(self, now_ms: float, *, reclaimed: bool) -> None:
        turn = self._turn_index
        if reclaimed:
            if self.config.reclaim_flush is ReclaimFlush.CUT_IMMEDIATELY:
                cancelled = self.scheduler.cancel(lambda e: e.tag == turn)
                self.scheduler.expedite_offs(now_ms, lambda e: e.tag == turn)
            else:
                cancelled = self.scheduler.cancel(
                    lambda e: e.tag == turn and e.kind is not EventKind.NOTE_OFF
                )
            self.log.emit("reclaim", cancelled=cancelled, turn=turn)
        self._drain_feedback()

        merged_notes = 0
        quantum = self.scheduler.config.tick_quantum_ms
        for gn in self._gen_notes:
            on_ev = gn.on_event
            if on_ev.state is not EventState.SENT:
                continue
            note = gn.note
            on_sent = on_ev.sent_ms if on_ev.sent_ms is not None else on_ev.send_ms
            sound_ms = on_sent + self.scheduler.table.latency_for(note.velocity)
            if abs(sound_ms - note.onset_ms) > quantum:
                # The send was displaced (same-pitch ordering, retrigger
                # gap, or a time token pointing into the past), so the
                # context keeps the moment the hammer actually lands,
                # not the claimed target.
                note = replace(note, onset_ms=sound_ms)
            off_ev = gn.off_event
            off_ms = off_ev.sent_ms if off_ev.sent_ms is not None else off_ev.send_ms
            merged = note.closed_at(off_ms) if off_ms > note.onset_ms else (
                note.closed_with_duration(1.0)
            )
            self.tracker.add_note(merged)
            self._insert_timeline(merged)
            self.generated_history.append(merged)
            merged_notes += 1
        for gp in self._gen_pedals:
            if gp.event.state is not EventState.SENT:
                continue
            pe = self.tracker.apply_pedal(Pedal.SUSTAIN, gp.on, gp.time_ms)
            if pe is not None:
                self._insert_timeline(pe)
        if self._gen_last_sustain and self.tracker.sustain_down:
            # Never leave the machine's sustain holding into the next turn.
            self.scheduler.schedule_control(SUSTAIN_CONTROLLER, 0, now_ms, tag=turn)
            pe = self.tracker.apply_pedal(Pedal.SUSTAIN, False, now_ms)
            if pe is not None:
                self._insert_timeline(pe)

        report = self._current_report()
        if report is not None and report.first_note_sound_ms is None:
            self._emit_report(report)

        if self._turn_mark is not None:
            try:
                self.backend.rollback(self._turn_mark)
            except BackendError as e:
                self.degraded = True
                self.log.emit("backend_degraded", reason=str(e))
        self._turn_mark = None
        self._turn_index += 1
        self.log.emit("turn_end", turn=turn, merged_notes=merged_notes,
                      reclaimed=reclaimed)
        self._set_phase(Phase.LISTEN)

    # -- misc --------------------------------------------------------------------

    def _set_phase(self, phase: Phase) -> None:
        if phase is self.phase:
            return
        self.log.emit("phase_change", phase=phase.value, prev=self.phase.value)
        self.phase = phase

    def context_token_ids(self) -> tuple[int, ...]:
        """Dense ids of everything this engine believes it prefilled."""
        vocab = getattr(self.backend, "vocab", None) or Vocabulary(self.tok_config)
        return tuple(vocab.encode(t) for t in self._context_tokens)
