"""Actuation-latency calibration for player pianos.

A calibration table partitions the velocity range 1..127 into buckets,
each holding the measured delay between sending a NoteOn and hearing the
hammer land.  ``run_calibration`` builds one by sending probe notes and
averaging the observed delays; the table serializes to a line-oriented
text file so it can be measured once per instrument and reused.
"""
from __future__ import annotations

import bisect
import statistics
from dataclasses import dataclass, field
from typing import Protocol, Sequence


class CalibrationError(Exception):
    pass


class IncompleteCalibrationError(CalibrationError):
    """A lookup hit a bucket that no probe ever measured."""


@dataclass(frozen=True)
class CalibrationBucket:
    velocity_lo: int
    velocity_hi: int  # inclusive
    latency_ms: float | None  # None: unmeasured


@dataclass
class CalibrationTable:
    buckets: list[CalibrationBucket]
    instrument_id: str = "unknown"
    measured_at: str = ""
    repeats: int = 0
    _los: list[int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not self.buckets:
            raise CalibrationError("empty calibration table")
        expect = 1
        for b in self.buckets:
            if b.velocity_lo != expect or b.velocity_hi < b.velocity_lo:
                raise CalibrationError(
                    f"buckets must partition 1..127; got [{b.velocity_lo},{b.velocity_hi}] "
                    f"where {expect} was expected"
                )
            if b.latency_ms is not None and b.latency_ms < 0:
                raise CalibrationError("negative latency")
            expect = b.velocity_hi + 1
        if expect != 128:
            raise CalibrationError(f"buckets end at {expect - 1}, not 127")
        self._los = [b.velocity_lo for b in self.buckets]

    @property
    def is_complete(self) -> bool:
        return all(b.latency_ms is not None for b in self.buckets)

    @property
    def max_latency_ms(self) -> float:
        known = [b.latency_ms for b in self.buckets if b.latency_ms is not None]
        if not known:
            raise IncompleteCalibrationError("no measured buckets")
        return max(known)

    def latency_for(self, velocity: int) -> float:
        if not 1 <= velocity <= 127:
            raise ValueError(f"velocity out of range 1..127: {velocity}")
        bucket = self.buckets[bisect.bisect_right(self._los, velocity) - 1]
        if bucket.latency_ms is None:
            raise IncompleteCalibrationError(
                f"velocity {velocity} falls in unmeasured bucket "
                f"[{bucket.velocity_lo},{bucket.velocity_hi}]"
            )
        return bucket.latency_ms


def flat_table(latency_ms: float, instrument_id: str = "flat") -> CalibrationTable:
    return CalibrationTable(
        [CalibrationBucket(1, 127, latency_ms)], instrument_id=instrument_id
    )


# -- serialization -------------------------------------------------------------


def save_table(table: CalibrationTable) -> str:
    lines = [
        f"# meta instrument {table.instrument_id}",
        f"# meta measured_at {table.measured_at or 'unknown'}",
        f"# meta repeats {table.repeats}",
    ]
    for b in table.buckets:
        latency = "unmeasured" if b.latency_ms is None else f"{b.latency_ms:.3f}"
        lines.append(f"bucket {b.velocity_lo} {b.velocity_hi} {latency}")
    return "\n".join(lines) + "\n"


def load_table(text: str) -> CalibrationTable:
    buckets: list[CalibrationBucket] = []
    meta = {"instrument": "unknown", "measured_at": "", "repeats": "0"}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "#":
            if len(parts) >= 4 and parts[1] == "meta":
                meta[parts[2]] = " ".join(parts[3:])
            continue
        if parts[0] != "bucket" or len(parts) != 4:
            raise CalibrationError(f"line {lineno}: expected 'bucket <lo> <hi> <latency>'")
        try:
            lo, hi = int(parts[1]), int(parts[2])
            latency = None if parts[3] == "unmeasured" else float(parts[3])
        except ValueError:
            raise CalibrationError(f"line {lineno}: bad field") from None
        buckets.append(CalibrationBucket(lo, hi, latency))
    try:
        repeats = int(meta["repeats"])
    except ValueError:
        raise CalibrationError("bad repeats metadata") from None
    return CalibrationTable(
        buckets,
        instrument_id=meta["instrument"],
        measured_at=meta["measured_at"],
        repeats=repeats,
    )


# -- measurement ---------------------------------------------------------------


class ProbeIo(Protocol):
    """One calibration probe: strike a key, report observed delay.

    Returns acoustic-onset minus send-time in milliseconds, or None if
    the instrument gave no confirmation.  Implementations are in charge
    of spacing probes far enough apart for the action to reset.
    """

    def probe(self, pitch: int, velocity: int) -> float | None: ...


def run_calibration(
    io: ProbeIo,
    velocities: Sequence[int] | None = None,
    repeats: int = 5,
    *,
    probe_pitch: int = 60,
    instrument_id: str = "unknown",
    measured_at: str = "",
) -> CalibrationTable:
    """Probe each velocity ``repeats`` times and average the delays.

    Bucket edges fall halfway between the probed velocities, so probing
    every velocity yields per-velocity buckets and sparse probes yield
    coarser ones.  Velocities with no confirmed probe produce unmeasured
    buckets; the table is still returned so a partial run is inspectable.
    """
    if repeats < 1:
        raise ValueError("repeats must be positive")
    if velocities is None:
        velocities = range(1, 128)
    velocities = sorted(set(velocities))
    if not velocities or velocities[0] < 1 or velocities[-1] > 127:
        raise ValueError("probe velocities must lie in 1..127")

    means: list[float | None] = []
    for velocity in velocities:
        samples = []
        for _ in range(repeats):
            delay = io.probe(probe_pitch, velocity)
            if delay is not None:
                samples.append(delay)
        means.append(statistics.fmean(samples) if samples else None)

    buckets = []
    for i, velocity in enumerate(velocities):
        lo = 1 if i == 0 else (velocities[i - 1] + velocity) // 2 + 1
        hi = 127 if i == len(velocities) - 1 else (velocity + velocities[i + 1]) // 2
        buckets.append(CalibrationBucket(lo, hi, means[i]))
    return CalibrationTable(
        buckets, instrument_id=instrument_id, measured_at=measured_at, repeats=repeats
    )
