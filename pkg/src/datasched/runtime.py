"""Event loops behind one small interface.

The service's periodic tasks, the node agents and the push baseline are all
written against ``loop.time()`` / ``loop.call_later()``.  Under
:class:`VirtualLoop` time only moves when the next event is due, which makes
whole-cluster runs deterministic and fast; :class:`RealTimeLoop` runs the same
callbacks against the wall clock for the multi-process mode.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import threading
import time
from typing import Any, Callable, Optional

log = logging.getLogger(__name__)


class Handle:
    __slots__ = ("when", "fn", "args", "cancelled")

    def __init__(self, when: float, fn: Callable, args: tuple):
        self.when = when
        self.fn = fn
        self.args = args
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class VirtualLoop:
    """Discrete-event loop over a virtual clock.

    Events at equal times run in scheduling order.
    """

    def __init__(self, start: float = 0.0):
        self._now = start
        self._heap: list[tuple[float, int, Handle]] = []
        self._seq = itertools.count()
        self._stopped = False
        self.events_run = 0

    def time(self) -> float:
        return self._now

    def call_at(self, when: float, fn: Callable, *args: Any) -> Handle:
        h = Handle(max(when, self._now), fn, args)
        heapq.heappush(self._heap, (h.when, next(self._seq), h))
        return h

    def call_later(self, delay: float, fn: Callable, *args: Any) -> Handle:
        return self.call_at(self._now + max(0.0, delay), fn, *args)

    def call_soon(self, fn: Callable, *args: Any) -> Handle:
        return self.call_at(self._now, fn, *args)

    call_soon_threadsafe = call_soon

    def stop(self) -> None:
        self._stopped = True

    def pending(self) -> int:
        return sum(1 for _, _, h in self._heap if not h.cancelled)

    def run(
        self,
        until: Optional[float] = None,
        stop_when: Optional[Callable[[], bool]] = None,
        max_events: Optional[int] = None,
    ) -> None:
        """Run events in time order.

        Stops when the heap is empty, the next event lies beyond ``until``,
        ``stop_when()`` turns true after an event, or :meth:`stop` is called.
        """
        self._stopped = False
        count = 0
        heap = self._heap
        while heap and not self._stopped:
            when, _, h = heap[0]
            if until is not None and when > until:
                self._now = until
                return
            heapq.heappop(heap)
            if h.cancelled:
                continue
            self._now = when
            h.fn(*h.args)
            self.events_run += 1
            count += 1
            if stop_when is not None and stop_when():
                return
            if max_events is not None and count >= max_events:
                return
        if until is not None and not self._stopped and self._now < until:
            self._now = until


class RealTimeLoop:
    """Single-threaded callback loop on the wall clock.

    Callbacks always run on the thread that called :meth:`run`; other threads
    hand work in with :meth:`call_soon_threadsafe` or :meth:`submit`.
    """

    def __init__(self, clock: Callable[[], float] = time.time):
        self._clock = clock
        self._heap: list[tuple[float, int, Handle]] = []
        self._seq = itertools.count()
        self._cv = threading.Condition()
        self._stopped = False
        self._thread: Optional[threading.Thread] = None

    def time(self) -> float:
        return self._clock()

    def call_at(self, when: float, fn: Callable, *args: Any) -> Handle:
        h = Handle(when, fn, args)
        with self._cv:
            heapq.heappush(self._heap, (when, next(self._seq), h))
            self._cv.notify()
        return h

    def call_later(self, delay: float, fn: Callable, *args: Any) -> Handle:
        return self.call_at(self._clock() + max(0.0, delay), fn, *args)

    def call_soon(self, fn: Callable, *args: Any) -> Handle:
        return self.call_at(self._clock(), fn, *args)

    call_soon_threadsafe = call_soon

    def submit(self, fn: Callable, *args: Any, timeout: Optional[float] = None) -> Any:
        """Run ``fn`` on the loop thread and wait for its result."""
        if threading.current_thread() is self._thread:
            return fn(*args)
        done = threading.Event()
        box: dict[str, Any] = {}

        def run():
            try:
                box["value"] = fn(*args)
            except BaseException as exc:  # re-raised in the caller
                box["error"] = exc
            finally:
                done.set()

        self.call_soon(run)
        if not done.wait(timeout):
            raise TimeoutError("loop did not run the call in time")
        if "error" in box:
            raise box["error"]
        return box.get("value")

    def stop(self) -> None:
        with self._cv:
            self._stopped = True
            self._cv.notify_all()

    @property
    def stopped(self) -> bool:
        return self._stopped

    def run(self, until: Optional[float] = None, stop_when: Optional[Callable[[], bool]] = None) -> None:
        self._thread = threading.current_thread()
        while True:
            with self._cv:
                while True:
                    if self._stopped:
                        return
                    now = self._clock()
                    if until is not None and now >= until:
                        return
                    if self._heap and self._heap[0][0] <= now:
                        _, _, h = heapq.heappop(self._heap)
                        break
                    wait = None if not self._heap else self._heap[0][0] - now
                    if until is not None:
                        wait = until - now if wait is None else min(wait, until - now)
                    self._cv.wait(wait)
            if h.cancelled:
                continue
            try:
                h.fn(*h.args)
            except Exception:
                log.exception("loop callback %r failed", h.fn)
            if stop_when is not None and stop_when():
                return

    def start_thread(self, name: str = "loop") -> threading.Thread:
        t = threading.Thread(target=self.run, name=name, daemon=True)
        t.start()
        self._thread = t
        return t
