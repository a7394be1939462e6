"""Note-centric token vocabulary for piano performances.

Each note becomes a NOTE(pitch, velocity bucket) / ONSET(offset) /
DUR(duration) triple; sustain pedal changes become single PEDAL_ON /
PEDAL_OFF(offset) tokens.  Time is quantized to a fixed grid and onsets
are expressed as offsets inside fixed-length segments, with a SEGMENT
token advancing the window.  The layout is chosen so that a performance
can be tokenized incrementally: tokens for events before a watermark
never change when later events arrive.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

from .midi import Note, Pedal, PedalEvent


@dataclass(frozen=True)
class TokenizerConfig:
    time_resolution_ms: int = 10
    segment_ms: int = 5000
    velocity_buckets: int = 16
    max_duration_ms: int = 10000

    def __post_init__(self) -> None:
        if self.time_resolution_ms <= 0:
            raise ValueError("time_resolution_ms must be positive")
        if self.segment_ms % self.time_resolution_ms:
            raise ValueError("segment_ms must be a multiple of time_resolution_ms")
        if self.max_duration_ms % self.time_resolution_ms:
            raise ValueError("max_duration_ms must be a multiple of time_resolution_ms")
        if not 1 <= self.velocity_buckets <= 127:
            raise ValueError("velocity_buckets must be in 1..127")

    @property
    def offsets_per_segment(self) -> int:
        return self.segment_ms // self.time_resolution_ms

    @property
    def duration_steps(self) -> int:
        return self.max_duration_ms // self.time_resolution_ms


class TokenKind(Enum):
    START = "START"
    END = "END"
    SEGMENT = "SEGMENT"
    NOTE = "NOTE"
    ONSET = "ONSET"
    DUR = "DUR"
    PEDAL_ON = "PEDAL_ON"
    PEDAL_OFF = "PEDAL_OFF"


@dataclass(frozen=True)
class Token:
    kind: TokenKind
    values: tuple[int, ...] = ()


START = Token(TokenKind.START)
END = Token(TokenKind.END)
SEGMENT = Token(TokenKind.SEGMENT)


def note_token(pitch: int, bucket: int) -> Token:
    return Token(TokenKind.NOTE, (pitch, bucket))


def onset_token(offset_ms: int) -> Token:
    return Token(TokenKind.ONSET, (offset_ms,))


def dur_token(duration_ms: int) -> Token:
    return Token(TokenKind.DUR, (duration_ms,))


def pedal_token(on: bool, offset_ms: int) -> Token:
    return Token(TokenKind.PEDAL_ON if on else TokenKind.PEDAL_OFF, (offset_ms,))


class TokenError(Exception):
    pass


class TokenStructureError(TokenError):
    """A token stream breaks the NOTE/ONSET/DUR grammar; names the index."""

    def __init__(self, index: int, message: str) -> None:
        super().__init__(f"token {index}: {message}")
        self.index = index


# -- quantization -----------------------------------------------------------


def quantize_time(t_ms: float, config: TokenizerConfig) -> int:
    """Round to the nearest grid point; exact midpoints round up."""
    res = config.time_resolution_ms
    return int(math.floor(t_ms / res + 0.5)) * res


def quantize_velocity(velocity: int, config: TokenizerConfig) -> int:
    if not 1 <= velocity <= 127:
        raise ValueError(f"velocity out of range 1..127: {velocity}")
    return (velocity - 1) * config.velocity_buckets // 127


def bucket_bounds(bucket: int, config: TokenizerConfig) -> tuple[int, int]:
    """Inclusive velocity range [lo, hi] mapping to this bucket."""
    if not 0 <= bucket < config.velocity_buckets:
        raise ValueError(f"bucket out of range: {bucket}")
    b = config.velocity_buckets
    lo = 1 + math.ceil(127 * bucket / b)
    hi = math.ceil(127 * (bucket + 1) / b)
    return lo, hi


def bucket_velocity(bucket: int, config: TokenizerConfig) -> int:
    """Canonical playback velocity for a bucket: its range midpoint."""
    lo, hi = bucket_bounds(bucket, config)
    return (lo + hi) // 2


def quantize_duration(dur_ms: float, config: TokenizerConfig) -> int:
    q = quantize_time(dur_ms, config)
    return min(max(q, config.time_resolution_ms), config.max_duration_ms)


# -- canonical event order ---------------------------------------------------

# At equal quantized times pedal releases come first, then pedal presses,
# then notes ordered by pitch then bucket.  Full ties keep input order,
# which both the batch path and the incremental path derive from the
# tracker's onset-sorted insertion order.
_RANK_PEDAL_OFF, _RANK_PEDAL_ON, _RANK_NOTE = 0, 1, 2


def event_order_key(item: Note | PedalEvent, config: TokenizerConfig) -> tuple[int, int, int, int]:
    if isinstance(item, PedalEvent):
        rank = _RANK_PEDAL_ON if item.on else _RANK_PEDAL_OFF
        return (quantize_time(item.time_ms, config), rank, 0, 0)
    return (
        quantize_time(item.onset_ms, config),
        _RANK_NOTE,
        item.pitch,
        quantize_velocity(item.velocity, config),
    )


def _check_tokenizable(notes: list[Note], pedals: list[PedalEvent]) -> None:
    for n in notes:
        if n.is_open:
            raise ValueError(f"open note at pitch {n.pitch} must be finalized before tokenizing")
        if n.onset_ms < 0:
            raise ValueError(f"negative onset: {n.onset_ms}")
    for p in pedals:
        if p.pedal is not Pedal.SUSTAIN:
            raise ValueError("only sustain pedal changes belong in the token stream")
        if p.time_ms < 0:
            raise ValueError(f"negative pedal time: {p.time_ms}")


# -- tokenize / detokenize ---------------------------------------------------


def tokenize(
    notes: list[Note],
    pedals: list[PedalEvent],
    config: TokenizerConfig,
    *,
    base_ms: int = 0,
) -> list[Token]:
    """Serialize a finalized performance to tokens.

    ``base_ms`` rebases times (used after trimming old context); it must
    be a multiple of the segment length and no event may precede it.
    """
    if base_ms % config.segment_ms:
        raise ValueError("base_ms must fall on a segment boundary")
    _check_tokenizable(notes, pedals)

    items = sorted([*notes, *pedals], key=lambda it: event_order_key(it, config))
    out = [START]
    segment = 0
    for item in items:
        t = event_order_key(item, config)[0] - base_ms
        if t < 0:
            raise ValueError("event precedes base_ms")
        target_segment = t // config.segment_ms
        while segment < target_segment:
            out.append(SEGMENT)
            segment += 1
        offset = t - segment * config.segment_ms
        if isinstance(item, PedalEvent):
            out.append(pedal_token(item.on, offset))
        else:
            out.append(note_token(item.pitch, quantize_velocity(item.velocity, config)))
            out.append(onset_token(offset))
            out.append(dur_token(quantize_duration(item.duration_ms, config)))
    return out


def detokenize(
    tokens: list[Token],
    config: TokenizerConfig,
    *,
    base_ms: int = 0,
) -> tuple[list[Note], list[PedalEvent]]:
    """Reconstruct the quantized performance a token stream describes."""
    if not tokens or tokens[0].kind is not TokenKind.START:
        raise TokenStructureError(0, "stream must begin with START")
    notes: list[Note] = []
    pedals: list[PedalEvent] = []
    segment = 0
    i = 1
    while i < len(tokens):
        tok = tokens[i]
        if tok.kind is TokenKind.END:
            if i != len(tokens) - 1:
                raise TokenStructureError(i, "END before end of stream")
            break
        if tok.kind is TokenKind.START:
            raise TokenStructureError(i, "START inside stream")
        if tok.kind is TokenKind.SEGMENT:
            segment += 1
            i += 1
            continue
        if tok.kind in (TokenKind.PEDAL_ON, TokenKind.PEDAL_OFF):
            t = base_ms + segment * config.segment_ms + _offset_value(tok, i, config)
            pedals.append(PedalEvent(Pedal.SUSTAIN, tok.kind is TokenKind.PEDAL_ON, float(t)))
            i += 1
            continue
        if tok.kind is TokenKind.NOTE:
            if i + 2 >= len(tokens):
                raise TokenStructureError(i, "NOTE without ONSET and DUR")
            onset = tokens[i + 1]
            dur = tokens[i + 2]
            if onset.kind is not TokenKind.ONSET:
                raise TokenStructureError(i + 1, f"expected ONSET, got {onset.kind.value}")
            if dur.kind is not TokenKind.DUR:
                raise TokenStructureError(i + 2, f"expected DUR, got {dur.kind.value}")
            pitch, bucket = tok.values
            t = base_ms + segment * config.segment_ms + _offset_value(onset, i + 1, config)
            notes.append(
                Note(pitch, float(t), float(dur.values[0]), bucket_velocity(bucket, config))
            )
            i += 3
            continue
        raise TokenStructureError(i, f"unexpected {tok.kind.value}")
    return notes, pedals


def _offset_value(tok: Token, index: int, config: TokenizerConfig) -> int:
    off = tok.values[0]
    if not 0 <= off < config.segment_ms:
        raise TokenStructureError(index, f"offset out of segment range: {off}")
    return off


def quantize_performance(
    notes: list[Note],
    pedals: list[PedalEvent],
    config: TokenizerConfig,
) -> tuple[list[Note], list[PedalEvent]]:
    """The performance as the vocabulary represents it.

    ``detokenize(tokenize(p)) == quantize_performance(p)`` exactly.
    """
    _check_tokenizable(notes, pedals)
    items = sorted([*notes, *pedals], key=lambda it: event_order_key(it, config))
    out_notes: list[Note] = []
    out_pedals: list[PedalEvent] = []
    for item in items:
        if isinstance(item, PedalEvent):
            out_pedals.append(
                PedalEvent(item.pedal, item.on, float(quantize_time(item.time_ms, config)))
            )
        else:
            out_notes.append(
                Note(
                    item.pitch,
                    float(quantize_time(item.onset_ms, config)),
                    float(quantize_duration(item.duration_ms, config)),
                    bucket_velocity(quantize_velocity(item.velocity, config), config),
                )
            )
    return out_notes, out_pedals


# -- text dump ----------------------------------------------------------------


def dump_tokens(tokens: list[Token]) -> str:
    """One token per line: the kind followed by its integer fields."""
    lines = []
    for tok in tokens:
        if tok.values:
            lines.append(tok.kind.value + " " + " ".join(str(v) for v in tok.values))
        else:
            lines.append(tok.kind.value)
    return "\n".join(lines) + ("\n" if lines else "")


_ARITY = {
    TokenKind.START: 0,
    TokenKind.END: 0,
    TokenKind.SEGMENT: 0,
    TokenKind.NOTE: 2,
    TokenKind.ONSET: 1,
    TokenKind.DUR: 1,
    TokenKind.PEDAL_ON: 1,
    TokenKind.PEDAL_OFF: 1,
}


def parse_token_dump(text: str) -> list[Token]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            kind = TokenKind(parts[0])
        except ValueError:
            raise TokenError(f"line {lineno}: unknown token kind {parts[0]!r}") from None
        values = parts[1:]
        if len(values) != _ARITY[kind]:
            raise TokenError(
                f"line {lineno}: {kind.value} takes {_ARITY[kind]} fields, got {len(values)}"
            )
        try:
            out.append(Token(kind, tuple(int(v) for v in values)))
        except ValueError:
            raise TokenError(f"line {lineno}: non-integer field") from None
    return out


# -- dense integer ids ---------------------------------------------------------


class Vocabulary:
    """Dense contiguous integer ids for every token a config can produce."""

    def __init__(self, config: TokenizerConfig) -> None:
        self.config = config
        spg = config.offsets_per_segment
        sizes = [
            (TokenKind.START, 1),
            (TokenKind.END, 1),
            (TokenKind.SEGMENT, 1),
            (TokenKind.NOTE, 128 * config.velocity_buckets),
            (TokenKind.ONSET, spg),
            (TokenKind.DUR, config.duration_steps),
            (TokenKind.PEDAL_ON, spg),
            (TokenKind.PEDAL_OFF, spg),
        ]
        self._base: dict[TokenKind, int] = {}
        self._span: dict[TokenKind, int] = {}
        at = 0
        for kind, size in sizes:
            self._base[kind] = at
            self._span[kind] = size
            at += size
        self.size = at
        c = config
        self.descriptor = (
            f"note-triplet/r{c.time_resolution_ms}"
            f"s{c.segment_ms}v{c.velocity_buckets}d{c.max_duration_ms}"
        )

    def encode(self, tok: Token) -> int:
        base = self._base[tok.kind]
        c = self.config
        if tok.kind is TokenKind.NOTE:
            pitch, bucket = tok.values
            if not 0 <= pitch <= 127:
                raise ValueError(f"pitch out of range: {pitch}")
            if not 0 <= bucket < c.velocity_buckets:
                raise ValueError(f"velocity bucket out of range: {bucket}")
            return base + pitch * c.velocity_buckets + bucket
        if tok.kind in (TokenKind.ONSET, TokenKind.PEDAL_ON, TokenKind.PEDAL_OFF):
            off = tok.values[0]
            if off % c.time_resolution_ms or not 0 <= off < c.segment_ms:
                raise ValueError(f"offset not on grid or out of range: {off}")
            return base + off // c.time_resolution_ms
        if tok.kind is TokenKind.DUR:
            d = tok.values[0]
            if d % c.time_resolution_ms or not c.time_resolution_ms <= d <= c.max_duration_ms:
                raise ValueError(f"duration not on grid or out of range: {d}")
            return base + d // c.time_resolution_ms - 1
        return base

    def decode(self, token_id: int) -> Token:
        if not 0 <= token_id < self.size:
            raise ValueError(f"token id out of range: {token_id}")
        c = self.config
        for kind in _ARITY:
            base, span = self._base[kind], self._span[kind]
            if base <= token_id < base + span:
                rel = token_id - base
                if kind is TokenKind.NOTE:
                    return note_token(rel // c.velocity_buckets, rel % c.velocity_buckets)
                if kind in (TokenKind.ONSET, TokenKind.PEDAL_ON, TokenKind.PEDAL_OFF):
                    return Token(kind, (rel * c.time_resolution_ms,))
                if kind is TokenKind.DUR:
                    return dur_token((rel + 1) * c.time_resolution_ms)
                return Token(kind)
        raise AssertionError("unreachable")
