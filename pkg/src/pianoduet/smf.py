"""Standard MIDI File reading and writing for session scripts and records.

Files we write use 480 ticks per quarter and a fixed tempo of 480000
microseconds per quarter, which makes one tick exactly one millisecond.
Human notes go on channel 0, generated notes on channel 1, pedal
controllers on channel 0.  The reader accepts format 0 and format 1
files from any writer: running status, NoteOn-velocity-0 releases, and
tempo changes anywhere in the file are all handled.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .midi import (
    MIN_NOTE_DURATION_MS,
    Note,
    Pedal,
    PedalEvent,
    PEDAL_ON_THRESHOLD,
    SOFT_PEDAL_CONTROLLER,
    SUSTAIN_CONTROLLER,
)

log = logging.getLogger(__name__)

TICKS_PER_QUARTER = 480
TEMPO_US_PER_QUARTER = 480_000  # 1 tick == 1 ms at 480 tpq
DEFAULT_TEMPO_US = 500_000

HUMAN_CHANNEL = 0
GENERATED_CHANNEL = 1


class SmfError(Exception):
    """Malformed file; carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int | None = None) -> None:
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass
class SmfSession:
    """Notes and pedal changes recovered from one file, in onset order."""

    notes: list[Note] = field(default_factory=list)
    generated: list[bool] = field(default_factory=list)  # parallel to notes
    pedals: list[PedalEvent] = field(default_factory=list)

    def human_notes(self) -> list[Note]:
        return [n for n, g in zip(self.notes, self.generated) if not g]

    def generated_notes(self) -> list[Note]:
        return [n for n, g in zip(self.notes, self.generated) if g]


# -- writing ---------------------------------------------------------------


def _varint(value: int) -> bytes:
    if value < 0:
        raise ValueError("negative delta time")
    out = bytearray([value & 0x7F])
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return tag + len(payload).to_bytes(4, "big") + payload


def _track_bytes(events: list[tuple[int, int, bytes]]) -> bytes:
    """Encode (tick, order, message-bytes) triples plus end-of-track."""
    events = sorted(events, key=lambda e: (e[0], e[1]))
    out = bytearray()
    prev = 0
    for tick, _, msg in events:
        out += _varint(tick - prev)
        out += msg
        prev = tick
    out += _varint(0) + b"\xff\x2f\x00"
    return bytes(out)


_ORDER_OFF, _ORDER_CONTROL, _ORDER_ON = 0, 1, 2


def save_smf(
    notes: list[Note],
    pedals: list[PedalEvent] | None = None,
    generated: list[bool] | None = None,
) -> bytes:
    """Serialize a performance to format-1 SMF bytes at 1ms per tick."""
    pedals = pedals or []
    if generated is None:
        generated = [False] * len(notes)
    if len(generated) != len(notes):
        raise ValueError("generated flags must align with notes")

    human: list[tuple[int, int, bytes]] = []
    ai: list[tuple[int, int, bytes]] = []
    for note, gen in zip(notes, generated):
        if note.is_open:
            raise ValueError(f"cannot save open note at pitch {note.pitch}")
        ch = GENERATED_CHANNEL if gen else HUMAN_CHANNEL
        dest = ai if gen else human
        on_tick = round(note.onset_ms)
        off_tick = max(round(note.off_ms), on_tick + 1)
        dest.append((on_tick, _ORDER_ON, bytes([0x90 | ch, note.pitch, note.velocity])))
        dest.append((off_tick, _ORDER_OFF, bytes([0x80 | ch, note.pitch, 0])))
    for pe in pedals:
        controller = SUSTAIN_CONTROLLER if pe.pedal is Pedal.SUSTAIN else SOFT_PEDAL_CONTROLLER
        value = 127 if pe.on else 0
        human.append(
            (round(pe.time_ms), _ORDER_CONTROL, bytes([0xB0 | HUMAN_CHANNEL, controller, value]))
        )

    tempo_track = _track_bytes(
        [(0, 0, b"\xff\x51\x03" + TEMPO_US_PER_QUARTER.to_bytes(3, "big"))]
    )
    tracks = [tempo_track, _track_bytes(human)]
    if ai:
        tracks.append(_track_bytes(ai))

    header = (
        (1).to_bytes(2, "big")
        + len(tracks).to_bytes(2, "big")
        + TICKS_PER_QUARTER.to_bytes(2, "big")
    )
    return _chunk(b"MThd", header) + b"".join(_chunk(b"MTrk", t) for t in tracks)


# -- reading ---------------------------------------------------------------


class _Reader:
    def __init__(self, data: bytes, pos: int = 0) -> None:
        self.data = data
        self.pos = pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise SmfError("truncated file", self.pos)
        b = self.data[self.pos : self.pos + n]
        self.pos += n
        return b

    def byte(self) -> int:
        return self.take(1)[0]

    def varint(self) -> int:
        value = 0
        for _ in range(4):
            b = self.byte()
            value = (value << 7) | (b & 0x7F)
            if not b & 0x80:
                return value
        raise SmfError("variable-length quantity longer than 4 bytes", self.pos)


@dataclass(frozen=True)
class _RawEvent:
    tick: int
    track: int
    seq: int
    status: int  # upper nibble, e.g. 0x90
    channel: int
    data1: int
    data2: int


_DATA_BYTES = {0x80: 2, 0x90: 2, 0xA0: 2, 0xB0: 2, 0xC0: 1, 0xD0: 1, 0xE0: 2}


def _parse_track(r: _Reader, track_idx: int, length: int, events: list[_RawEvent],
                 tempos: list[tuple[int, int]]) -> None:
    end = r.pos + length
    tick = 0
    seq = 0
    running: int | None = None
    while r.pos < end:
        tick += r.varint()
        first = r.byte()
        if first == 0xFF:
            meta_type = r.byte()
            meta_len = r.varint()
            payload = r.take(meta_len)
            if meta_type == 0x51:
                if meta_len != 3:
                    raise SmfError("bad tempo meta length", r.pos)
                tempos.append((tick, int.from_bytes(payload, "big")))
            if meta_type == 0x2F:
                r.pos = end
                return
            continue
        if first in (0xF0, 0xF7):
            r.take(r.varint())
            running = None
            continue
        if first >= 0xF0:
            raise SmfError(f"unsupported system message 0x{first:02x}", r.pos - 1)
        if first & 0x80:
            status = first
            running = status
            data1 = r.byte()
        else:
            if running is None:
                raise SmfError("running status with no prior status byte", r.pos - 1)
            status = running
            data1 = first
        kind = status & 0xF0
        n = _DATA_BYTES[kind]
        data2 = r.byte() if n == 2 else 0
        if data1 > 127 or data2 > 127:
            raise SmfError("data byte out of range", r.pos - 1)
        events.append(_RawEvent(tick, track_idx, seq, kind, status & 0x0F, data1, data2))
        seq += 1
    if r.pos != end:
        raise SmfError("event ran past declared track length", r.pos)


def _tick_to_ms(tempos: list[tuple[int, int]], division: int):
    """Build a piecewise-linear tick-to-milliseconds map."""
    segs: list[tuple[int, float, int]] = [(0, 0.0, DEFAULT_TEMPO_US)]
    for tick, new_tempo in sorted(tempos):
        start_tick, start_ms, tempo = segs[-1]
        ms = start_ms + (tick - start_tick) * tempo / (division * 1000.0)
        segs.append((tick, ms, new_tempo))

    def convert(tick: int) -> float:
        lo = segs[0]
        for s in segs:
            if s[0] <= tick:
                lo = s
            else:
                break
        start_tick, start_ms, seg_tempo = lo
        return start_ms + (tick - start_tick) * seg_tempo / (division * 1000.0)

    return convert


def load_smf(data: bytes) -> SmfSession:
    """Parse SMF bytes into notes, generated flags, and pedal changes."""
    r = _Reader(data)
    if r.take(4) != b"MThd":
        raise SmfError("not a standard MIDI file", 0)
    if int.from_bytes(r.take(4), "big") != 6:
        raise SmfError("bad header length", 4)
    fmt = int.from_bytes(r.take(2), "big")
    if fmt not in (0, 1):
        raise SmfError(f"unsupported format {fmt}", 8)
    n_tracks = int.from_bytes(r.take(2), "big")
    division = int.from_bytes(r.take(2), "big")
    if division & 0x8000:
        raise SmfError("SMPTE time division is not supported", 12)
    if division == 0:
        raise SmfError("zero time division", 12)

    events: list[_RawEvent] = []
    tempos: list[tuple[int, int]] = []
    for track_idx in range(n_tracks):
        if r.take(4) != b"MTrk":
            raise SmfError("expected track chunk", r.pos - 4)
        length = int.from_bytes(r.take(4), "big")
        _parse_track(r, track_idx, length, events, tempos)

    convert = _tick_to_ms(tempos, division)
    events.sort(key=lambda e: (e.tick, e.track, e.seq))

    session = SmfSession()
    open_notes: dict[tuple[int, int], tuple[Note, bool]] = {}  # (ch, pitch)
    pedal_state = {Pedal.SUSTAIN: False, Pedal.SOFT: False}

    def close(key: tuple[int, int], off_ms: float) -> None:
        note, gen = open_notes.pop(key)
        closed = note.closed_at(off_ms)
        idx = len(session.notes)
        while idx > 0 and session.notes[idx - 1].onset_ms > closed.onset_ms:
            idx -= 1
        session.notes.insert(idx, closed)
        session.generated.insert(idx, gen)

    for ev in events:
        t_ms = convert(ev.tick)
        key = (ev.channel, ev.data1)
        if ev.status == 0x90 and ev.data2 > 0:
            if key in open_notes:
                close(key, t_ms)
            open_notes[key] = (
                Note(ev.data1, t_ms, None, ev.data2),
                ev.channel == GENERATED_CHANNEL,
            )
        elif ev.status == 0x80 or (ev.status == 0x90 and ev.data2 == 0):
            if key in open_notes:
                close(key, t_ms)
            else:
                log.debug("unmatched note-off for pitch %d", ev.data1)
        elif ev.status == 0xB0 and ev.data1 in (SUSTAIN_CONTROLLER, SOFT_PEDAL_CONTROLLER):
            pedal = Pedal.SUSTAIN if ev.data1 == SUSTAIN_CONTROLLER else Pedal.SOFT
            on = ev.data2 >= PEDAL_ON_THRESHOLD
            if on != pedal_state[pedal]:
                pedal_state[pedal] = on
                session.pedals.append(PedalEvent(pedal, on, t_ms))

    for key in sorted(open_notes, key=lambda k: open_notes[k][0].onset_ms):
        note, _ = open_notes[key]
        log.debug("closing dangling note at pitch %d with minimum duration", note.pitch)
        close(key, note.onset_ms + MIN_NOTE_DURATION_MS)
    return session
