#!/usr/bin/env python3
"""Calibrate against the virtual instrument and print the latency table.

Useful for seeing how actuation jitter and repeat count trade off
against the residual timing error the scheduler will carry.
"""
import argparse
import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from pianoduet.calibration import save_table
from pianoduet.instrument import InstrumentModel
from pianoduet.session import calibrate_virtual


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--jitter-ms", type=float, default=0.0)
    ap.add_argument("--jitter-seed", type=int, default=0)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--step", type=int, default=8,
                    help="velocity spacing between probe points")
    ap.add_argument("--out", type=pathlib.Path, default=None)
    args = ap.parse_args()

    model = InstrumentModel(jitter_ms=args.jitter_ms, jitter_seed=args.jitter_seed)
    table = calibrate_virtual(
        model,
        velocities=list(range(1, 128, args.step)),
        repeats=args.repeats,
    )
    text = save_table(table)
    print(text, end="")
    worst = max(
        abs(table.latency_for(v) - model.latency_for(v)) for v in range(1, 128)
    )
    print(f"# worst interpolation error vs true model: {worst:.3f}ms")
    if args.out is not None:
        args.out.write_text(text)
        print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
