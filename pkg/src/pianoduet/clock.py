"""Session clocks.

All musical time in the engine is a float millisecond count on a session
clock that starts near zero when the session begins.  Components never
call ``time`` directly; they hold a clock so that simulations and
benchmarks can substitute a manually advanced one and run instantly
while still exercising every timing rule.
"""
from __future__ import annotations

import time
from typing import Callable, Protocol


class Clock(Protocol):
    def now_ms(self) -> float: ...

    def sleep_ms(self, duration_ms: float) -> None: ...


class SystemClock:
    """Monotonic wall clock, zeroed at construction."""

    def __init__(self) -> None:
        self._t0 = time.monotonic()

    def now_ms(self) -> float:
        return (time.monotonic() - self._t0) * 1000.0

    def sleep_ms(self, duration_ms: float) -> None:
        if duration_ms > 0:
            time.sleep(duration_ms / 1000.0)


class VirtualClock:
    """Simulated clock: ``sleep_ms`` advances time instead of blocking.

    ``on_advance(old_ms, new_ms)`` fires after every forward move.  A
    simulation hangs its output pump there, so work that would happen
    concurrently in live mode (scheduler ticks during a long inference
    sleep) still happens at the right simulated moments.  The hook must
    not sleep on this clock.
    """

    def __init__(self, start_ms: float = 0.0) -> None:
        self._now = float(start_ms)
        self.on_advance: "Callable[[float, float], None] | None" = None

    def now_ms(self) -> float:
        return self._now

    def sleep_ms(self, duration_ms: float) -> None:
        if duration_ms > 0:
            self._move(self._now + duration_ms)

    def advance_to(self, t_ms: float) -> None:
        if t_ms < self._now:
            raise ValueError(f"clock cannot run backwards: {t_ms} < {self._now}")
        self._move(float(t_ms))

    def _move(self, new_ms: float) -> None:
        old = self._now
        self._now = new_ms
        if self.on_advance is not None and new_ms > old:
            self.on_advance(old, new_ms)
