"""Named function catalog.

Executable payloads name catalog functions registered on both master and
workers; nothing serialized or binary crosses the wire. Functions receive an
ExecutionContext (attempt ordinal, cancel flag, storage access) followed by
their JSON-typed keyword arguments.

Catalog functions must not touch shared mutable state; they communicate only
through arguments and results.
"""

from __future__ import annotations

import inspect
import subprocess
import time
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from ..errors import UnknownFunction


class CancelledExecution(Exception):
    """Raised inside a catalog function when its unit was cancelled."""


@dataclass
class ExecutionContext:
    unit_id: str = ""
    app_id: str = ""
    node_id: str = ""
    attempt: int = 1  # 1-based ordinal of this try
    cancelled: threading.Event = field(default_factory=threading.Event)
    storage: Any = None  # stage_in/stage_out provider

    def check_cancelled(self) -> None:
        if self.cancelled.is_set():
            raise CancelledExecution(self.unit_id)


@dataclass
class CatalogEntry:
    name: str
    fn: Callable
    doc: str
    params: list

    def to_doc(self) -> dict:
        return {"name": self.name, "params": self.params, "doc": self.doc}


class FunctionCatalog:
    def __init__(self):
        self._entries: dict[str, CatalogEntry] = {}

    def register(self, name: str, fn: Callable, doc: str = "") -> None:
        params = [p for p in inspect.signature(fn).parameters if p != "ctx"]
        self._entries[name] = CatalogEntry(name=name, fn=fn,
                                           doc=doc or (fn.__doc__ or "").strip(),
                                           params=params)

    def resolve(self, name: str) -> CatalogEntry:
        entry = self._entries.get(name)
        if entry is None:
            raise UnknownFunction(f"no catalog function named {name!r}")
        return entry

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def invoke(self, name: str, ctx: ExecutionContext, args: dict) -> Any:
        return self.resolve(name).fn(ctx, **args)

    def listing(self) -> list[dict]:
        return [self._entries[n].to_doc() for n in sorted(self._entries)]


# -- built-in functions -------------------------------------------------------

def _identity(ctx, value=None):
    """Return the argument unchanged."""
    return value


def _occupy_slot(ctx, seconds: float):
    # Hold the execution slot until the monotonic deadline, staying
    # responsive to cancellation. Deliberately does not burn CPU so that
    # slot-level parallelism is observable regardless of core count.
    deadline = time.monotonic() + seconds
    while True:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            return
        ctx.check_cancelled()
        time.sleep(min(0.005, remaining))


def _busy_wait(ctx, millis: float, echo=None):
    """Occupy one execution slot for ``millis`` milliseconds."""
    _occupy_slot(ctx, float(millis) / 1000.0)
    return echo if echo is not None else millis


def _sleep(ctx, seconds: float, echo=None):
    """Occupy one execution slot for ``seconds`` seconds."""
    _occupy_slot(ctx, float(seconds))
    return echo if echo is not None else seconds


def _square(ctx, x):
    """x squared."""
    return x * x


def _poly(ctx, x, a=1, b=0, c=0):
    """a*x^2 + b*x + c."""
    return a * x * x + b * x + c


def _flaky(ctx, fail_times: int, value=None):
    """Fail the first ``fail_times`` attempts, then return ``value``."""
    if ctx.attempt <= int(fail_times):
        raise RuntimeError(f"flaky failure on attempt {ctx.attempt}")
    return value


def _fail(ctx, message: str = "deliberate failure"):
    """Always fail."""
    raise RuntimeError(message)


def _shell_exec(ctx, argv: list, stdin: Optional[str] = None, timeout: float = 60.0):
    """Run an external program; returns its stdout. Nonzero exit fails the unit."""
    argv = [str(a) for a in argv]
    proc = subprocess.Popen(argv, stdin=subprocess.PIPE if stdin is not None else None,
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    try:
        deadline = time.monotonic() + timeout
        while True:
            try:
                out, err = proc.communicate(input=stdin, timeout=0.05)
                break
            except subprocess.TimeoutExpired:
                stdin = None  # only feed stdin once
                if ctx.cancelled.is_set():
                    proc.kill()
                    proc.wait()
                    raise CancelledExecution(ctx.unit_id)
                if time.monotonic() > deadline:
                    proc.kill()
                    proc.wait()
                    raise RuntimeError(f"command timed out after {timeout}s: {argv}")
    finally:
        if proc.poll() is None:
            proc.kill()
    if proc.returncode != 0:
        raise RuntimeError(f"command exited {proc.returncode}: {err.strip()}")
    return {"stdout": out, "returncode": proc.returncode}


def _wc_map(ctx, text: str):
    """Map phase of wordcount: emit (word, 1) per whitespace-separated word."""
    return [(word, 1) for word in text.split()]


def _wc_reduce(ctx, key: str, values: list):
    """Reduce phase of wordcount: sum the counts."""
    return sum(values)


def builtin_catalog() -> FunctionCatalog:
    catalog = FunctionCatalog()
    catalog.register("identity", _identity)
    catalog.register("busy-wait", _busy_wait)
    catalog.register("sleep", _sleep)
    catalog.register("square", _square)
    catalog.register("poly", _poly)
    catalog.register("flaky", _flaky)
    catalog.register("fail", _fail)
    catalog.register("shell-exec", _shell_exec)
    catalog.register("wc-map", _wc_map)
    catalog.register("wc-reduce", _wc_reduce)
    return catalog
