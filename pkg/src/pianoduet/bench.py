"""Takeover-latency benchmark.

Replays a synthetic listening session on the virtual clock and measures,
per prefill strategy, how long the takeover pipeline stalls between the
pedal signal and (a) finalized hanging notes, (b) the first generated
token, (c) the first generated note actually sounding.  Inference cost is
charged per token so context length dominates exactly when nothing was
prefilled while listening.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

from .backend import CostModel, SamplingParams
from .engine import EngineConfig, SpeculativePolicy
from .instrument import InstrumentModel
from .midi import MidiEvent, control, note_off, note_on
from .scheduler import SchedulerConfig
from .session import SimSession
from .tokenizer import TokenizerConfig

#  1 ms per prefilled token makes the naive strategy's stall equal to the
#  context size in milliseconds, which is easy to read off a report.
DEFAULT_COST = CostModel(prefill_ms_per_token=1.0, decode_ms_per_token=0.0)

_NOTE_SPACING_MS = 100.0
_NOTE_LEN_MS = 80.0
_HANG_SPACING_MS = 120.0
_SIGNAL_GAP_MS = 300.0


def build_trace(
    context_tokens: int,
    hanging: int,
    config: TokenizerConfig | None = None,
) -> tuple[list[MidiEvent], float]:
    """Deterministic input script: closed notes sized to roughly
    ``context_tokens`` of prefillable history, then ``hanging`` still-open
    notes crowding the last second, then the takeover pedal.

    Returns the event list and the signal timestamp.
    """
    cfg = config or TokenizerConfig()
    if context_tokens < 4:
        raise ValueError("context_tokens too small to mean anything")
    if hanging < 0:
        raise ValueError("hanging must be non-negative")

    events: list[MidiEvent] = []
    count = 0
    tokens = 1  # START
    onset = 0.0
    while tokens + 3 <= context_tokens:
        pitch = 36 + (count * 7) % 48
        velocity = 40 + (count * 13) % 80
        events.append(note_on(pitch, velocity, onset))
        events.append(note_off(pitch, onset + _NOTE_LEN_MS))
        tokens += 3
        if count and onset % cfg.segment_ms < _NOTE_SPACING_MS:
            tokens += 1  # segment boundary crossed
        count += 1
        onset += _NOTE_SPACING_MS

    hang_start = onset + _NOTE_SPACING_MS
    for i in range(hanging):
        pitch = 60 + (i * 3) % 24
        events.append(note_on(pitch, 70, hang_start + i * _HANG_SPACING_MS))
    last = hang_start + (hanging - 1) * _HANG_SPACING_MS if hanging else onset
    signal_ms = last + _SIGNAL_GAP_MS
    events.append(control(67, 127, signal_ms))
    return events, signal_ms


@dataclass(frozen=True)
class BenchRow:
    strategy: str
    context_tokens: int
    hanging: int
    finalize_ms: float
    first_token_ms: float
    first_note_sound_ms: float


@dataclass(frozen=True)
class BenchReport:
    rows: tuple[BenchRow, ...]

    def render_text(self) -> str:
        out = io.StringIO()
        header = f"{'strategy':<12} {'context':>8} {'hanging':>8} {'finalize':>10} {'first_tok':>10} {'first_snd':>10}"
        out.write(header + "\n")
        out.write("-" * len(header) + "\n")
        for r in self.rows:
            out.write(
                f"{r.strategy:<12} {r.context_tokens:>8d} {r.hanging:>8d} "
                f"{r.finalize_ms:>10.3f} {r.first_token_ms:>10.3f} {r.first_note_sound_ms:>10.3f}\n"
            )
        return out.getvalue()

    def render_csv(self) -> str:
        lines = ["strategy,context_tokens,hanging,finalize_ms,first_token_ms,first_note_sound_ms"]
        for r in self.rows:
            lines.append(
                f"{r.strategy},{r.context_tokens},{r.hanging},"
                f"{r.finalize_ms:.3f},{r.first_token_ms:.3f},{r.first_note_sound_ms:.3f}"
            )
        return "\n".join(lines) + "\n"


def run_cell(
    strategy: str,
    context_tokens: int,
    hanging: int,
    seed: int = 0,
    max_new_tokens: int = 32,
    cost: CostModel | None = None,
) -> BenchRow:
    """One benchmark measurement.  ``strategy`` is ``continuous`` or
    ``naive`` (prefill everything only after the signal)."""
    if strategy not in ("continuous", "naive"):
        raise ValueError(f"unknown strategy {strategy!r}")
    tok_config = TokenizerConfig()
    engine_config = EngineConfig(
        continuous_prefill=(strategy == "continuous"),
        speculative_policy=SpeculativePolicy.MODEL_PREDICTED,
        sampling=SamplingParams(seed=seed, max_new_tokens=max_new_tokens),
        max_context_tokens=max(8192, context_tokens * 2),
    )
    session = SimSession(
        tok_config=tok_config,
        engine_config=engine_config,
        scheduler_config=SchedulerConfig(),
        instrument_model=InstrumentModel(jitter_ms=0.0),
        cost=DEFAULT_COST if cost is None else cost,
    )
    events, signal_ms = build_trace(context_tokens, hanging, tok_config)
    session.run_script(events)
    if not session.engine.reports:
        raise RuntimeError("benchmark run produced no takeover")
    report = session.engine.reports[0]

    def rel(value: float | None) -> float:
        return value - signal_ms if value is not None else -1.0

    return BenchRow(
        strategy=strategy,
        context_tokens=context_tokens,
        hanging=hanging,
        finalize_ms=rel(report.finalize_ms),
        first_token_ms=rel(report.first_token_ms),
        first_note_sound_ms=rel(report.first_note_sound_ms),
    )


def run_bench(
    context_sizes: tuple[int, ...] = (500, 2000),
    hanging_counts: tuple[int, ...] = (0, 8),
    seed: int = 0,
    cost: CostModel | None = None,
) -> BenchReport:
    rows = []
    for strategy in ("naive", "continuous"):
        for context in context_sizes:
            for hang in hanging_counts:
                rows.append(run_cell(strategy, context, hang, seed=seed, cost=cost))
    return BenchReport(rows=tuple(rows))
