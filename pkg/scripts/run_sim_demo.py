#!/usr/bin/env python3
"""Play a scripted two-turn duet on the simulated piano and print what happened.

Shows the full loop: a human phrase with one held note, a soft-pedal
takeover, machine generation streamed through the latency-compensating
scheduler, a reclaim mid-generation, and a second exchange.
"""
import argparse
import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from pianoduet.backend import CostModel, SamplingParams
from pianoduet.engine import EngineConfig, SpeculativePolicy
from pianoduet.instrument import InstrumentModel, export_acoustic_log
from pianoduet.midi import control, note_off, note_on
from pianoduet.session import SimSession

SOFT_PEDAL = 67


def phrase(start_ms: float):
    t = start_ms
    events = []
    for pitch, dur in [(60, 220.0), (64, 220.0), (67, 400.0), (72, None)]:
        events.append(note_on(pitch, 80, t))
        if dur is not None:
            events.append(note_off(pitch, t + dur))
        t += 250.0
    return events, t  # the last note is left hanging on purpose


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--prefill-ms", type=float, default=0.5)
    ap.add_argument("--decode-ms", type=float, default=2.0)
    ap.add_argument("--acoustic-out", type=pathlib.Path, default=None)
    args = ap.parse_args()

    session = SimSession(
        engine_config=EngineConfig(
            speculative_policy=SpeculativePolicy.MODEL_PREDICTED,
            sampling=SamplingParams(seed=args.seed, max_new_tokens=64),
        ),
        instrument_model=InstrumentModel(jitter_ms=0.0),
        cost=CostModel(prefill_ms_per_token=args.prefill_ms,
                       decode_ms_per_token=args.decode_ms),
    )

    events, t = phrase(100.0)
    takeover_1 = t + 300.0
    events += [control(SOFT_PEDAL, 127, takeover_1),
               control(SOFT_PEDAL, 0, takeover_1 + 20.0)]
    reclaim = takeover_1 + 1500.0
    events += [control(SOFT_PEDAL, 127, reclaim),
               control(SOFT_PEDAL, 0, reclaim + 20.0)]
    more, t = phrase(reclaim + 200.0)
    events += more
    takeover_2 = t + 300.0
    events += [control(SOFT_PEDAL, 127, takeover_2),
               control(SOFT_PEDAL, 0, takeover_2 + 20.0)]
    session.run_script(sorted(events, key=lambda e: e.timestamp_ms))

    for r in session.engine.reports:
        print(
            f"turn {r.turn_index}: signal {r.signal_ms:.0f}ms, "
            f"{r.hanging_count} hanging finalized in "
            f"{r.finalize_ms - r.signal_ms:.1f}ms, first token "
            f"+{r.first_token_ms - r.signal_ms:.1f}ms, first sound "
            f"+{(r.first_note_sound_ms or r.signal_ms) - r.signal_ms:.1f}ms"
        )
    print(f"machine notes played: {len(session.engine.generated_history)}")
    print(f"acoustic events: {len(session.acoustic_log())}")
    print(f"retrigger violations: {len(session.retrigger_violations())}")
    if args.acoustic_out is not None:
        args.acoustic_out.write_text(export_acoustic_log(session.acoustic_log()))
        print(f"wrote {args.acoustic_out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
