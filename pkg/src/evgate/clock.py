"""Injectable millisecond clocks.

All timing logic reads time through one of these so that latency budgets,
timeouts and sliding windows are testable without real delays.
"""

from __future__ import annotations

import time
from typing import Iterable


class SystemClock:
    def now_ms(self) -> int:
        return int(time.monotonic() * 1000)

    def sleep(self, ms: int) -> None:
        time.sleep(ms / 1000)


class SimClock:
    """Manually advanced clock; ``sleep`` just moves time forward."""

    def __init__(self, start_ms: int = 0):
        self._now = int(start_ms)

    def now_ms(self) -> int:
        return self._now

    def advance(self, ms: int) -> int:
        if ms < 0:
            raise ValueError("clock cannot go backwards")
        self._now += int(ms)
        return self._now

    def sleep(self, ms: int) -> None:
        self.advance(ms)

    def set(self, ms: int) -> None:
        if ms < self._now:
            raise ValueError("clock cannot go backwards")
        self._now = int(ms)


class ScriptedClock(SimClock):
    """Returns a fixed sequence of readings, then keeps the last one.

    ``ScriptedClock([0, 350])`` makes any start/stop measurement see 350 ms.
    """

    def __init__(self, readings: Iterable[int]):
        self._readings = [int(r) for r in readings]
        if not self._readings:
            raise ValueError("need at least one reading")
        super().__init__(self._readings[0])
        self._i = 0

    def now_ms(self) -> int:
        value = self._readings[min(self._i, len(self._readings) - 1)]
        self._i += 1
        self._now = max(self._now, value)
        return self._now
