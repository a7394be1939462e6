"""Command-line harness: live duet, simulation, calibration, bench, replay.

Exit codes: 0 success, 2 bad configuration or arguments, 3 MIDI device
problems, 4 replay invariant violations.
"""
from __future__ import annotations

import argparse
import os
import sys

from .backend import MarkovBackend
from .bench import build_trace, run_bench
from .calibration import CalibrationError, load_table, save_table
from .config import AppConfig, ConfigError, dump_config, load_config
from .engine import DuetEngine, EventLog
from .midi import MidiEvent, control, note_off, note_on
from .remote import RemoteBackend, RemoteError
from .scheduler import OutputScheduler
from .session import (
    LiveRunner,
    ReplayInvariantError,
    SimSession,
    calibrate_virtual,
    replay_performance,
)
from .smf import load_smf, save_smf
from .tokenizer import Vocabulary

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEVICE = 3
EXIT_REPLAY = 4


def _load(args: argparse.Namespace) -> AppConfig:
    return load_config(getattr(args, "config", None))


def _write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)


def _table_for(args: argparse.Namespace, cfg: AppConfig):
    path = getattr(args, "table", None)
    if path:
        with open(path, "r", encoding="utf-8") as f:
            return load_table(f.read())
    # No table given: measure the configured instrument model.  A flat
    # guess would be off by the velocity-dependent part of the curve.
    return calibrate_virtual(cfg.instrument, repeats=cfg.calibration_repeats)


def _backend_for(args: argparse.Namespace, cfg: AppConfig, clock):
    address = getattr(args, "backend", None)
    if address:
        host, _, port = address.rpartition(":")
        vocab = Vocabulary(cfg.tokenizer)
        return RemoteBackend((host or "127.0.0.1", int(port)), vocab)
    return MarkovBackend(cfg.tokenizer, cfg.cost, clock)


# -- subcommands -------------------------------------------------------------


def cmd_run(args: argparse.Namespace) -> int:
    try:
        import mido
    except ImportError:
        print("live mode needs the 'mido' package (pip install pianoduet[live])",
              file=sys.stderr)
        return EXIT_DEVICE

    if args.list_ports:
        print("inputs:")
        for name in mido.get_input_names():
            print(f"  {name}")
        print("outputs:")
        for name in mido.get_output_names():
            print(f"  {name}")
        return EXIT_OK

    cfg = _load(args)
    from .clock import SystemClock

    clock = SystemClock()
    table = _table_for(args, cfg)
    scheduler = OutputScheduler(table, cfg.scheduler)
    backend = _backend_for(args, cfg, clock)
    log = EventLog(clock)
    engine = DuetEngine(backend, cfg.tokenizer, cfg.engine, scheduler, clock,
                        tracker_config=cfg.tracker, event_log=log)

    try:
        in_port = mido.open_input(args.input) if args.input else mido.open_input()
        out_port = mido.open_output(args.output) if args.output else mido.open_output()
    except (OSError, ValueError) as e:
        print(f"cannot open MIDI port: {e}", file=sys.stderr)
        return EXIT_DEVICE

    def send(ev: MidiEvent) -> None:
        from .midi import EventKind

        if ev.kind is EventKind.NOTE_ON:
            out_port.send(mido.Message("note_on", note=ev.pitch, velocity=ev.velocity))
        elif ev.kind is EventKind.NOTE_OFF:
            out_port.send(mido.Message("note_off", note=ev.pitch, velocity=0))
        else:
            out_port.send(mido.Message("control_change", control=ev.controller,
                                       value=ev.value))

    runner = LiveRunner(engine, scheduler, clock, send)
    runner.start()
    print("listening; soft pedal hands the keyboard over (ctrl-c quits)")
    try:
        for msg in in_port:
            now = clock.now_ms()
            if msg.type == "note_on":
                engine.submit(note_on(msg.note, msg.velocity, now))
            elif msg.type == "note_off":
                engine.submit(note_off(msg.note, now))
            elif msg.type == "control_change":
                engine.submit(control(msg.control, msg.value, now))
    except KeyboardInterrupt:
        pass
    finally:
        runner.stop()
        in_port.close()
        out_port.close()
        if args.log:
            _write(args.log, "\n".join(log.lines()) + "\n")
    return EXIT_OK


def _script_from_smf(path: str) -> list[MidiEvent]:
    with open(path, "rb") as f:
        session = load_smf(f.read())
    events: list[MidiEvent] = []
    for note in session.notes:
        events.append(note_on(note.pitch, note.velocity, note.onset_ms))
        events.append(note_off(note.pitch, note.off_ms))
    for pe in session.pedals:
        from .midi import Pedal

        controller = 64 if pe.pedal is Pedal.SUSTAIN else 67
        events.append(control(controller, 127 if pe.on else 0, pe.time_ms))
    events.sort(key=lambda e: e.timestamp_ms)
    return events


def cmd_sim(args: argparse.Namespace) -> int:
    cfg = _load(args)
    if args.demo:
        events, _ = build_trace(150, 3, cfg.tokenizer)
    elif args.input:
        events = _script_from_smf(args.input)
        if args.takeover_at is not None:
            events.append(control(67, 127, args.takeover_at))
            events.sort(key=lambda e: e.timestamp_ms)
        elif not any(e.controller == 67 and e.value >= 64 for e in events
                     if e.controller is not None):
            last = events[-1].timestamp_ms if events else 0.0
            events.append(control(67, 127, last + 300.0))
    else:
        print("sim needs an input file or --demo", file=sys.stderr)
        return EXIT_CONFIG

    from dataclasses import replace

    sampling = replace(cfg.engine.sampling, seed=args.seed)
    session = SimSession(
        tok_config=cfg.tokenizer,
        engine_config=replace(cfg.engine, sampling=sampling),
        scheduler_config=cfg.scheduler,
        instrument_model=cfg.instrument,
        cost=cfg.cost,
    )
    session.run_script(events)

    out_dir = args.out or "sim_out"
    os.makedirs(out_dir, exist_ok=True)
    _write(os.path.join(out_dir, "session.log"),
           "\n".join(session.log.lines()) + "\n")
    from .instrument import export_acoustic_log

    _write(os.path.join(out_dir, "acoustic.log"),
           export_acoustic_log(session.acoustic_log()))
    tracker = session.engine.tracker
    generated_ids = {id(n) for n in session.engine.generated_history}
    notes = list(tracker.state.finalized)
    flags = [id(n) in generated_ids for n in notes]
    smf_bytes = save_smf(notes, tracker.state.pedal_log, flags)
    with open(os.path.join(out_dir, "duet.mid"), "wb") as f:
        f.write(smf_bytes)

    reports = session.engine.reports
    print(f"turns: {len(reports)}  notes: {len(notes)} "
          f"({sum(flags)} generated)  output: {out_dir}/")
    for r in reports:
        first_tok = (r.first_token_ms - r.signal_ms) if r.first_token_ms else -1.0
        print(f"  turn {r.turn_index}: hanging={r.hanging_count} "
              f"finalize={r.finalize_ms - r.signal_ms:.3f}ms "
              f"first_token={first_tok:.3f}ms")
    violations = session.retrigger_violations()
    rejected = session.rejected_retriggers()
    if violations or rejected:
        print(f"WARNING: {len(violations)} retrigger violations, "
              f"{rejected} rejected strikes", file=sys.stderr)
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    cfg = _load(args)
    velocities = None
    if args.step > 1:
        velocities = list(range(1, 128, args.step))
        if velocities[-1] != 127:
            velocities.append(127)
    table = calibrate_virtual(cfg.instrument, velocities=velocities,
                              repeats=args.repeats)
    text = save_table(table)
    if args.out:
        _write(args.out, text)
        print(f"wrote {args.out} ({len(table.buckets)} buckets, "
              f"max latency {table.max_latency_ms:.3f}ms)")
    else:
        print(text, end="")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    contexts = tuple(int(x) for x in args.contexts.split(","))
    hanging = tuple(int(x) for x in args.hanging.split(","))
    report = run_bench(context_sizes=contexts, hanging_counts=hanging,
                       seed=args.seed)
    print(report.render_text(), end="")
    if args.csv:
        _write(args.csv, report.render_csv())
        print(f"wrote {args.csv}")
    return EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    cfg = _load(args)
    with open(args.input, "rb") as f:
        session = load_smf(f.read())
    table = _table_for(args, cfg)
    result = replay_performance(session, table,
                                scheduler_config=cfg.scheduler,
                                instrument_model=cfg.instrument)
    print(f"notes: {result.scheduled_notes} scheduled, {result.sent_notes} sent, "
          f"{result.dropped_note_ons} dropped")
    print(f"max timing error: {result.max_timing_error_ms:.3f}ms")
    try:
        result.assert_clean(timing_tolerance_ms=args.tolerance)
    except ReplayInvariantError as e:
        print(f"REPLAY VIOLATION: {e}", file=sys.stderr)
        return EXIT_REPLAY
    print("clean")
    return EXIT_OK


def cmd_config(args: argparse.Namespace) -> int:
    cfg = _load(args)
    print(dump_config(cfg), end="")
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    from .gateway import serve

    cfg = _load(args)
    serve(cfg, host=args.host, port=args.port, seed=args.seed)
    return EXIT_OK


# -- argument plumbing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pianoduet",
                                description="turn-taking piano duet engine")
    p.add_argument("--config", help="path to a key = value config file")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="live duet on real MIDI ports")
    run.add_argument("--input", help="MIDI input port name")
    run.add_argument("--output", help="MIDI output port name")
    run.add_argument("--table", help="calibration table file")
    run.add_argument("--backend", help="remote backend host:port")
    run.add_argument("--log", help="write the event log here on exit")
    run.add_argument("--list-ports", action="store_true")
    run.set_defaults(func=cmd_run)

    sim = sub.add_parser("sim", help="scripted duet on the virtual clock")
    sim.add_argument("input", nargs="?", help="input performance (.mid)")
    sim.add_argument("--demo", action="store_true", help="use a built-in script")
    sim.add_argument("--takeover-at", type=float, default=None,
                     help="inject the takeover pedal at this ms")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", help="output directory (default sim_out)")
    sim.set_defaults(func=cmd_sim)

    cal = sub.add_parser("calibrate", help="measure per-velocity latency")
    cal.add_argument("--out", help="write the table here")
    cal.add_argument("--repeats", type=int, default=5)
    cal.add_argument("--step", type=int, default=1,
                     help="probe every Nth velocity")
    cal.set_defaults(func=cmd_calibrate)

    bench = sub.add_parser("bench", help="takeover latency benchmark")
    bench.add_argument("--contexts", default="500,2000")
    bench.add_argument("--hanging", default="0,8")
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--csv", help="also write rows as CSV")
    bench.set_defaults(func=cmd_bench)

    rep = sub.add_parser("replay", help="re-actuate a recording and check invariants")
    rep.add_argument("input", help="recording to replay (.mid)")
    rep.add_argument("--table", help="calibration table file")
    rep.add_argument("--tolerance", type=float, default=2.0)
    rep.set_defaults(func=cmd_replay)

    cfgp = sub.add_parser("config", help="print the effective configuration")
    cfgp.set_defaults(func=cmd_config)

    serve = sub.add_parser("serve", help="WebSocket gateway for browser clients")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8765)
    serve.add_argument("--seed", type=int, default=0)
    serve.set_defaults(func=cmd_serve)

    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CalibrationError as e:
        print(f"calibration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"missing file: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except RemoteError as e:
        print(f"backend error: {e}", file=sys.stderr)
        return EXIT_DEVICE


if __name__ == "__main__":
    sys.exit(main())
