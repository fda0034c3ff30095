"""Injectable clocks. All timestamps are whole milliseconds UTC."""

from __future__ import annotations

import threading
import time


def now_ms() -> int:
    return time.time_ns() // 1_000_000


class Clock:
    """Real clock; subclass or replace in tests."""

    def now_ms(self) -> int:
        return now_ms()

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)


class ManualClock(Clock):
    """Test clock advanced explicitly; sleep() advances it."""

    def __init__(self, start_ms: int = 0):
        self._now = start_ms
        self._lock = threading.Lock()

    def now_ms(self) -> int:
        with self._lock:
            return self._now

    def advance_ms(self, delta: int) -> None:
        with self._lock:
            self._now += delta

    def sleep(self, seconds: float) -> None:
        self.advance_ms(int(seconds * 1000))


SYSTEM_CLOCK = Clock()
