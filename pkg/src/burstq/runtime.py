"""Clock and scheduling abstraction shared by live and simulated modes.

Components never call ``time.time`` or ``time.sleep`` directly; they read
``runtime.now()`` and arrange future work with ``runtime.schedule(delay,
fn)``. Periodic loops are written as self-rescheduling callbacks, which
guarantees a loop is never re-entered while a previous iteration is still
running.

``ThreadRuntime`` backs callbacks with daemon timer threads and the wall
clock. ``SimRuntime`` is a deterministic discrete-event loop on a virtual
clock: callbacks fire in (time, schedule-order) sequence on the caller's
thread, so identical inputs produce identical executions. An acceleration
factor only paces the virtual clock against the wall clock; it never
changes what happens at which virtual time.
"""

from __future__ import annotations

import heapq
import itertools
import threading
import time
from typing import Callable, Optional


class Scheduled:
    """Handle for a scheduled callback; ``cancel()`` is idempotent."""

    def __init__(self) -> None:
        self._cancelled = False
        self._timer: Optional[threading.Timer] = None

    def cancel(self) -> None:
        self._cancelled = True
        if self._timer is not None:
            self._timer.cancel()

    @property
    def cancelled(self) -> bool:
        return self._cancelled


class Runtime:
    def now(self) -> float:
        raise NotImplementedError

    def schedule(self, delay: float, fn: Callable[[], None]) -> Scheduled:
        raise NotImplementedError


class ThreadRuntime(Runtime):
    """Wall-clock runtime; each callback runs on its own daemon thread."""

    def now(self) -> float:
        return time.time()

    def schedule(self, delay: float, fn: Callable[[], None]) -> Scheduled:
        handle = Scheduled()

        def run() -> None:
            if not handle.cancelled:
                fn()

        timer = threading.Timer(max(0.0, delay), run)
        timer.daemon = True
        handle._timer = timer
        timer.start()
        return handle


class SimRuntime(Runtime):
    """Deterministic virtual-clock event loop.

    ``acceleration`` ≥ 1 paces virtual time at that multiple of real time
    (1000 means one virtual second per real millisecond); ``None`` runs as
    fast as possible. Policy decisions only ever see virtual time.
    """

    def __init__(self, start: float = 0.0, acceleration: Optional[float] = None):
        self._now = start
        self._seq = itertools.count()
        self._heap: list[tuple[float, int, Scheduled, Callable[[], None]]] = []
        self._accel = acceleration

    def now(self) -> float:
        return self._now

    def schedule(self, delay: float, fn: Callable[[], None]) -> Scheduled:
        handle = Scheduled()
        heapq.heappush(
            self._heap, (self._now + max(0.0, delay), next(self._seq), handle, fn)
        )
        return handle

    def _pace(self, virtual_dt: float) -> None:
        if self._accel and virtual_dt > 0:
            real = virtual_dt / self._accel
            if real >= 1e-4:
                time.sleep(real)

    def step(self) -> bool:
        """Run the next event; returns False when the queue is empty."""
        while self._heap:
            t, _, handle, fn = heapq.heappop(self._heap)
            if handle.cancelled:
                continue
            self._pace(t - self._now)
            self._now = max(self._now, t)
            fn()
            return True
        return False

    def run_until(self, t_end: float) -> None:
        """Process every event scheduled at or before ``t_end``."""
        while self._heap:
            t, _, handle, _ = self._heap[0]
            if t > t_end:
                break
            if handle.cancelled:
                heapq.heappop(self._heap)
                continue
            self.step()
        self._pace(t_end - self._now)
        self._now = max(self._now, t_end)

    def run(
        self,
        until_idle: Callable[[], bool] | None = None,
        max_time: float = float("inf"),
    ) -> None:
        """Drain events until the queue empties, ``until_idle`` returns
        True, or the virtual clock would pass ``max_time``."""
        while self._heap:
            if until_idle is not None and until_idle():
                return
            t, _, handle, _ = self._heap[0]
            if t > max_time:
                return
            if handle.cancelled:
                heapq.heappop(self._heap)
                continue
            self.step()

    def pending(self) -> int:
        return sum(1 for (_, _, h, _) in self._heap if not h.cancelled)


class PeriodicTask:
    """Self-rescheduling loop: runs ``fn(now)`` every ``interval`` seconds.

    The next iteration is scheduled only after the current one returns, so
    two iterations are never in flight simultaneously; a slow iteration
    delays the next.
    """

    def __init__(
        self,
        runtime: Runtime,
        interval: float,
        fn: Callable[[float], None],
        initial_delay: float = 0.0,
    ) -> None:
        self._runtime = runtime
        self._interval = interval
        self._fn = fn
        self._stopped = False
        self._handle: Optional[Scheduled] = None
        self._initial_delay = initial_delay

    def start(self) -> "PeriodicTask":
        self._handle = self._runtime.schedule(self._initial_delay, self._iterate)
        return self

    def poke(self) -> None:
        """Run one extra iteration as soon as possible."""
        if not self._stopped:
            self._runtime.schedule(0.0, self._iterate_once)

    def _iterate_once(self) -> None:
        if not self._stopped:
            self._fn(self._runtime.now())

    def _iterate(self) -> None:
        if self._stopped:
            return
        try:
            self._fn(self._runtime.now())
        finally:
            if not self._stopped:
                self._handle = self._runtime.schedule(self._interval, self._iterate)

    def stop(self) -> None:
        self._stopped = True
        if self._handle is not None:
            self._handle.cancel()
