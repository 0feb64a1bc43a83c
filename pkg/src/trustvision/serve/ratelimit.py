"""Exact sliding-window request limiter."""

from __future__ import annotations

import threading
import time
from collections import deque
from dataclasses import dataclass


@dataclass(frozen=True)
class Admission:
    admitted: bool
    retry_after: float = 0.0


class SlidingWindowLimiter:
    """Admit a request iff fewer than ``limit`` admitted requests lie in ``(now - window, now]``.

    Rejected requests are not recorded.  ``retry_after`` is the time until
    the oldest in-window request leaves the window.
    """

    def __init__(self, limit: int = 30, window: float = 60.0, clock=time.monotonic):
        if limit < 1 or window <= 0:
            raise ValueError("limit and window must be positive")
        self.limit, self.window, self.clock = limit, float(window), clock
        self._hits: dict[str, deque] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._registry = threading.Lock()

    def _slot(self, key: str):
        with self._registry:
            if key not in self._hits:
                self._hits[key] = deque()
                self._locks[key] = threading.Lock()
            return self._hits[key], self._locks[key]

    def admit(self, client_id: str, now: float | None = None) -> Admission:
        hits, lock = self._slot(client_id)
        with lock:
            now = self.clock() if now is None else now
            while hits and hits[0] <= now - self.window:
                hits.popleft()
            if len(hits) < self.limit:
                hits.append(now)
                return Admission(True, 0.0)
            return Admission(False, hits[0] + self.window - now)

    def in_window(self, client_id: str, now: float) -> int:
        hits, lock = self._slot(client_id)
        with lock:
            return sum(1 for t in hits if t > now - self.window)
