"""Single-threaded event loop serializing all master state mutations.

Callers from network threads submit closures and (usually) await the result;
the loop thread is the only thread that touches scheduler/directory state, so
snapshots taken inside a closure are consistent by construction.
"""

from __future__ import annotations

import queue
import threading
from concurrent.futures import Future
from typing import Any, Callable


class EventLoop:
    def __init__(self, name: str = "event-loop"):
        self._queue: "queue.Queue" = queue.Queue()
        self._thread = threading.Thread(target=self._run, name=name, daemon=True)
        self._stopped = threading.Event()
        self._started = False

    def start(self) -> None:
        if not self._started:
            self._started = True
            self._thread.start()

    def _run(self) -> None:
        while True:
            item = self._queue.get()
            if item is None:
                return
            fn, future = item
            if future.set_running_or_notify_cancel():
                try:
                    future.set_result(fn())
                except BaseException as exc:
                    future.set_exception(exc)

    def submit(self, fn: Callable[[], Any]) -> Future:
        if self._stopped.is_set():
            raise RuntimeError("event loop stopped")
        future: Future = Future()
        self._queue.put((fn, future))
        return future

    def call(self, fn: Callable[[], Any], timeout: float = 30.0) -> Any:
        """Run ``fn`` on the loop thread and return its result."""
        if threading.current_thread() is self._thread:
            return fn()  # re-entrant call from inside the loop
        return self.submit(fn).result(timeout=timeout)

    def stop(self, timeout: float = 5.0) -> None:
        if self._stopped.is_set():
            return
        self._stopped.set()
        self._queue.put(None)
        if self._started:
            self._thread.join(timeout=timeout)
