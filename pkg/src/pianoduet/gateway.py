"""WebSocket gateway bridging browser clients to a duet engine.

Wire format is line-oriented text, one space-separated record per
message.  Clients open with ``hello performer`` or ``hello observer``;
exactly one performer slot exists and later askers are demoted to
observer.  Performer records::

    note_on <pitch> <velocity>
    note_off <pitch>
    pedal <controller> <value>
    takeover            (synthesized soft-pedal press and release)
    reclaim             (same gesture; meaningful while generating)
    ping

Server records::

    role <performer|observer>
    state <listen|finalizing|generating>
    human_note_on <pitch> <velocity> <t>
    human_note <pitch> <velocity> <onset> <duration>
    human_pedal <0|1> <t>
    ai_note <pitch> <velocity> <on> <off>
    dropped_note <pitch> <t>
    wire <on|off|cc> <a> <b> <t>
    takeover_report <turn> <signal> <hanging> <finalize> <first_token> <first_sound>
    notice <event>
    pong <t> / hb <t>
    gap <n>             (n older records were dropped from this outbox)
    error <code> <detail...>

All times are engine-clock milliseconds with three decimals.  Each
client has a bounded outbox; a slow reader loses oldest records first
and is told how many via ``gap``.
"""
from __future__ import annotations

import asyncio
import itertools
import os
import threading
from collections import deque
from dataclasses import replace

#  Module-scope on purpose: endpoint annotations are strings under
#  deferred evaluation and must resolve against module globals.
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from .clock import Clock, SystemClock
from .engine import DuetEngine, EventLog, LogEntry
from .midi import EventKind, MidiEvent, control, note_off, note_on
from .scheduler import OutputScheduler

_OUTBOX_LIMIT = 1024


def _fmt(value: object) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return f"{value:.3f}"
    return str(value)


class ClientHandle:
    """One connected client: role plus a bounded, gap-marking outbox."""

    def __init__(self, client_id: int, role: str, limit: int = _OUTBOX_LIMIT) -> None:
        self.id = client_id
        self.role = role
        self._records: deque[str] = deque()
        self._limit = limit
        self._dropped = 0
        self._lock = threading.Lock()

    def push(self, record: str) -> None:
        with self._lock:
            if len(self._records) >= self._limit:
                self._records.popleft()
                self._dropped += 1
            self._records.append(record)

    def drain(self) -> list[str]:
        with self._lock:
            out = list(self._records)
            self._records.clear()
            if self._dropped:
                out.insert(0, f"gap {self._dropped}")
                self._dropped = 0
            return out


class DuetGateway:
    """Fans engine events out to clients and feeds performer input in.

    Thread-safe on the boundaries the engine promises: ``handle_text``
    only calls ``engine.submit``; everything else is log fan-out behind
    per-client locks.  Driving the engine is the caller's job (LiveRunner
    threads in production, explicit ``pump`` calls in tests).
    """

    def __init__(self, engine: DuetEngine, scheduler: OutputScheduler, clock: Clock) -> None:
        self.engine = engine
        self.scheduler = scheduler
        self.clock = clock
        self._clients: dict[int, ClientHandle] = {}
        self._ids = itertools.count(1)
        self._lock = threading.Lock()
        self._performer: int | None = None
        engine.log.subscribers.append(self._on_log)

    # -- client lifecycle ------------------------------------------------------

    def attach(self, wanted_role: str) -> ClientHandle:
        with self._lock:
            cid = next(self._ids)
            role = "observer"
            if wanted_role == "performer" and self._performer is None:
                role = "performer"
                self._performer = cid
            handle = ClientHandle(cid, role)
            self._clients[cid] = handle
        handle.push(f"state {self.engine.phase.value}")
        return handle

    def detach(self, handle: ClientHandle) -> None:
        with self._lock:
            self._clients.pop(handle.id, None)
            if self._performer == handle.id:
                self._performer = None

    def client_count(self) -> int:
        with self._lock:
            return len(self._clients)

    # -- input -------------------------------------------------------------------

    def handle_text(self, handle: ClientHandle, text: str) -> None:
        parts = text.split()
        if not parts:
            return
        kind = parts[0]
        if kind == "ping":
            handle.push(f"pong {self.clock.now_ms():.3f}")
            return
        if handle.role != "performer":
            handle.push(f"error not-performer {kind} needs the performer role")
            return
        now = self.clock.now_ms()
        try:
            if kind == "note_on" and len(parts) == 3:
                self.engine.submit(note_on(int(parts[1]), int(parts[2]), now))
            elif kind == "note_off" and len(parts) == 2:
                self.engine.submit(note_off(int(parts[1]), now))
            elif kind == "pedal" and len(parts) == 3:
                self.engine.submit(control(int(parts[1]), int(parts[2]), now))
            elif kind in ("takeover", "reclaim") and len(parts) == 1:
                # Edge-triggered gesture: press then release so the next
                # press is a fresh edge.
                soft = self.engine.tracker.config.soft_pedal_controller
                self.engine.submit(control(soft, 127, now))
                self.engine.submit(control(soft, 0, now))
            else:
                handle.push(f"error bad-record {text[:80]}")
        except ValueError as e:
            handle.push(f"error bad-record {e}")

    # -- output -------------------------------------------------------------------

    def broadcast(self, record: str) -> None:
        with self._lock:
            clients = list(self._clients.values())
        for c in clients:
            c.push(record)

    def wire_out(self, ev: MidiEvent) -> None:
        """Output-path sink: forward scheduled MIDI to every client."""
        if ev.kind is EventKind.NOTE_ON:
            rec = f"wire on {ev.pitch} {ev.velocity} {ev.timestamp_ms:.3f}"
        elif ev.kind is EventKind.NOTE_OFF:
            rec = f"wire off {ev.pitch} 0 {ev.timestamp_ms:.3f}"
        else:
            rec = f"wire cc {ev.controller} {ev.value} {ev.timestamp_ms:.3f}"
        self.broadcast(rec)

    def pump(self) -> bool:
        """Single-step the engine and output path (test/sim driving)."""
        worked = self.engine.poll()
        for ev in self.scheduler.tick(self.clock.now_ms()):
            self.wire_out(ev)
        return worked

    # -- engine log fan-out ----------------------------------------------------

    _NOTICES = frozenset(
        ["takeover_declined", "backend_degraded", "backend_recovered",
         "generation_abort", "takeover_abort"]
    )

    def _on_log(self, entry: LogEntry) -> None:
        fields = dict(entry.fields)
        name = entry.event
        if name == "phase_change":
            self.broadcast(f"state {fields['phase']}")
        elif name == "human_note_on":
            self.broadcast(
                f"human_note_on {fields['pitch']} {fields['velocity']} "
                f"{_fmt(fields['at'])}"
            )
        elif name == "human_note":
            self.broadcast(
                f"human_note {fields['pitch']} {fields['velocity']} "
                f"{_fmt(fields['onset'])} {_fmt(fields['duration'])}"
            )
        elif name == "human_pedal":
            self.broadcast(f"human_pedal {_fmt(fields['on'])} {_fmt(fields['at'])}")
        elif name == "generated_note":
            self.broadcast(
                f"ai_note {fields['pitch']} {fields['velocity']} "
                f"{_fmt(fields['target_on'])} {_fmt(fields['target_off'])}"
            )
        elif name == "note_dropped":
            self.broadcast(f"dropped_note {fields['pitch']} {_fmt(fields['target'])}")
        elif name == "takeover_report":
            self.broadcast(
                f"takeover_report {fields['turn']} {_fmt(fields['signal'])} "
                f"{fields['hanging']} {_fmt(fields['finalize_ms'])} "
                f"{_fmt(fields['first_token_ms'])} {_fmt(fields['first_note_sound_ms'])}"
            )
        elif name in self._NOTICES:
            self.broadcast(f"notice {name}")


# -- ASGI app -------------------------------------------------------------------


def create_app(
    gateway: DuetGateway,
    heartbeat_s: float = 2.0,
    poll_s: float = 0.01,
    static_dir: str | None = None,
) -> FastAPI:
    app = FastAPI(title="pianoduet gateway")

    @app.get("/healthz")
    async def healthz():  # pragma: no cover - trivial
        return {"ok": True, "phase": gateway.engine.phase.value,
                "clients": gateway.client_count()}

    @app.websocket("/ws")
    async def ws_endpoint(websocket: WebSocket) -> None:
        await websocket.accept()
        try:
            hello = await websocket.receive_text()
        except WebSocketDisconnect:
            return
        parts = hello.split()
        if len(parts) != 2 or parts[0] != "hello" or parts[1] not in (
            "performer", "observer",
        ):
            await websocket.send_text("error bad-hello expected 'hello performer|observer'")
            await websocket.close()
            return
        handle = gateway.attach(parts[1])
        await websocket.send_text(f"role {handle.role}")

        async def reader() -> None:
            while True:
                text = await websocket.receive_text()
                gateway.handle_text(handle, text)

        async def writer() -> None:
            idle = 0.0
            while True:
                records = handle.drain()
                for record in records:
                    await websocket.send_text(record)
                if records:
                    idle = 0.0
                else:
                    idle += poll_s
                    if idle >= heartbeat_s:
                        await websocket.send_text(f"hb {gateway.clock.now_ms():.3f}")
                        idle = 0.0
                await asyncio.sleep(poll_s)

        tasks = [asyncio.create_task(reader()), asyncio.create_task(writer())]
        try:
            await asyncio.wait(tasks, return_when=asyncio.FIRST_COMPLETED)
        except WebSocketDisconnect:
            pass
        finally:
            for t in tasks:
                t.cancel()
            gateway.detach(handle)

    if static_dir and os.path.isdir(static_dir):
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")

    return app


def serve(cfg, host: str = "127.0.0.1", port: int = 8765, seed: int = 0,
          static_dir: str | None = None) -> None:  # pragma: no cover - live path
    """Run a live gateway: engine threads plus uvicorn."""
    import uvicorn

    from .backend import MarkovBackend
    from .session import LiveRunner, calibrate_virtual

    clock = SystemClock()
    table = calibrate_virtual(cfg.instrument)
    scheduler = OutputScheduler(table, cfg.scheduler)
    backend = MarkovBackend(cfg.tokenizer, cfg.cost, clock)
    sampling = replace(cfg.engine.sampling, seed=seed)
    engine = DuetEngine(
        backend,
        cfg.tokenizer,
        replace(cfg.engine, sampling=sampling),
        scheduler,
        clock,
        tracker_config=cfg.tracker,
        event_log=EventLog(clock),
    )
    gateway = DuetGateway(engine, scheduler, clock)
    runner = LiveRunner(engine, scheduler, clock, gateway.wire_out)
    if static_dir is None:
        candidate = os.path.join(os.getcwd(), "frontend", "dist")
        static_dir = candidate if os.path.isdir(candidate) else None
    app = create_app(gateway, static_dir=static_dir)
    runner.start()
    try:
        uvicorn.run(app, host=host, port=port, log_level="warning")
    finally:
        runner.stop()
