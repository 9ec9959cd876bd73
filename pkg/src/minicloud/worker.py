"""Worker container: registers with the master, heartbeats, and executes
dispatched units in a fixed pool of execution slots.

Execution is cooperative with cancellation: catalog functions observe the
context's cancel flag. File staging goes through the master's storage API,
never through envelopes.
"""

from __future__ import annotations

import json
import socket
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

from . import messaging as msg
from .client import RemoteStorage
from .errors import PlatformError
from .models.catalog import CancelledExecution, ExecutionContext, builtin_catalog
from .models.mapreduce import decode_pairs, encode_pairs, run_map, run_reduce

INLINE_RESULT_CAP = 64 * 1024


class WorkerAgent:
    def __init__(self, master_host: str, master_port: int, api_url: str, token: str,
                 node_id: Optional[str] = None, capacity: int = 1,
                 labels: tuple = (), pool_id: Optional[str] = None):
        self.master_host = master_host
        self.master_port = master_port
        self.token = token
        self.proposed_node_id = node_id
        self.node_id = node_id or ""
        self.node_epoch = 0
        self.capacity = max(1, capacity)
        self.labels = tuple(labels)
        self.pool_id = pool_id
        self.catalog = builtin_catalog()
        self.storage = RemoteStorage(api_url, token)
        self.heartbeat_period = 1.0

        self._executor = ThreadPoolExecutor(max_workers=self.capacity,
                                            thread_name_prefix="slot")
        self._lock = threading.Lock()
        self._active: dict[str, ExecutionContext] = {}
        self._cancelled: set = set()
        self._started_at: dict[str, float] = {}
        self._busy_closed = 0.0  # busy seconds of units finished in this window
        self._completed_window = 0
        self._window_start = time.monotonic()
        self._conn: Optional[msg.FrameConnection] = None
        self.stopping = threading.Event()

    # -- lifecycle ------------------------------------------------------------

    def run(self) -> int:
        backoff = 0.2
        while not self.stopping.is_set():
            try:
                self._session()
                backoff = 0.2
            except (OSError, PlatformError):
                pass
            if self.stopping.is_set():
                break
            self.stopping.wait(backoff)
            backoff = min(backoff * 2, 5.0)
        self._executor.shutdown(wait=False, cancel_futures=True)
        return 0

    def stop(self) -> None:
        self.stopping.set()
        conn = self._conn
        if conn is not None:
            conn.close()

    def _session(self) -> None:
        conn = msg.FrameConnection.connect(self.master_host, self.master_port)
        self._conn = conn
        try:
            conn.send(msg.Envelope(sender=self.node_id or "new-node", kind=msg.REGISTER,
                                   payload={
                                       "node_id": self.proposed_node_id,
                                       "address": f"{socket.gethostname()}:{conn.sock.getsockname()[1]}",
                                       "capacity": self.capacity,
                                       "labels": list(self.labels),
                                       "pool_id": self.pool_id,
                                       "token": self.token,
                                   }))
            envelopes = conn.envelopes()
            first = next(envelopes, None)
            if first is None or first.kind != msg.REGISTER_ACK:
                raise PlatformError(f"registration rejected: {first.payload if first else 'closed'}")
            self.node_id = first.payload["node_id"]
            self.node_epoch = int(first.payload.get("epoch", 1))
            self.heartbeat_period = float(first.payload.get("heartbeat_period", 1.0))

            hb_stop = threading.Event()
            hb = threading.Thread(target=self._heartbeat_loop, args=(conn, hb_stop),
                                  name="heartbeat", daemon=True)
            self._window_start = time.monotonic()
            hb.start()
            try:
                for env in envelopes:
                    if env.kind == msg.DISPATCH:
                        self._on_dispatch(conn, env.payload)
                    elif env.kind == msg.CANCEL:
                        self._on_cancel(env.payload.get("unit_id", ""))
                    elif env.kind == msg.STOP:
                        self.stopping.set()
                        return
                    elif env.kind == msg.ERROR:
                        if env.payload.get("error") == "UnknownNode":
                            return  # reconnect and re-register
            finally:
                hb_stop.set()
        finally:
            conn.close()
            if self._conn is conn:
                self._conn = None

    # -- heartbeats -------------------------------------------------------------

    def _heartbeat_loop(self, conn: msg.FrameConnection, stop: threading.Event) -> None:
        while not stop.is_set() and not self.stopping.is_set():
            stop.wait(self.heartbeat_period)
            if stop.is_set() or self.stopping.is_set():
                return
            try:
                conn.send(msg.Envelope(sender=self.node_id, kind=msg.HEARTBEAT,
                                       payload={"node_id": self.node_id,
                                                "metrics": self._window_metrics()}))
            except Exception:
                return

    def _window_metrics(self) -> dict:
        now = time.monotonic()
        with self._lock:
            window = max(1e-6, now - self._window_start)
            busy = self._busy_closed
            for unit_id, started in self._started_at.items():
                busy += now - max(started, self._window_start)
            slots_busy = len(self._active)
            completed = self._completed_window
            self._busy_closed = 0.0
            self._completed_window = 0
            self._window_start = now
        fraction = min(1.0, max(0.0, busy / (self.capacity * window)))
        return {"node_id": self.node_id, "window": window,
                "cpu_busy_fraction": fraction, "slots_busy": slots_busy,
                "units_completed": completed}

    # -- unit execution ------------------------------------------------------------

    def _on_dispatch(self, conn: msg.FrameConnection, payload: dict) -> None:
        self._executor.submit(self._run_unit, conn, payload)

    def _on_cancel(self, unit_id: str) -> None:
        with self._lock:
            self._cancelled.add(unit_id)
            ctx = self._active.get(unit_id)
        if ctx is not None:
            ctx.cancelled.set()

    def _report(self, conn: msg.FrameConnection, payload: dict, status: str,
                result=None, error: Optional[str] = None, runtime: float = 0.0) -> None:
        doc = {
            "node_id": self.node_id,
            "node_epoch": payload["node_epoch"],
            "unit_id": payload["unit_id"],
            "attempt": payload["attempt"],
            "status": status,
            "result": result,
            "error": error,
            "runtime": runtime,
        }
        try:
            conn.send(msg.Envelope(sender=self.node_id, kind=msg.UNIT_RESULT, payload=doc))
        except Exception:
            pass  # connection lost; the master requeues via failure sweep

    def _run_unit(self, conn: msg.FrameConnection, payload: dict) -> None:
        unit_id = payload["unit_id"]
        with self._lock:
            if unit_id in self._cancelled:
                self._cancelled.discard(unit_id)
                cancelled_early = True
            else:
                cancelled_early = False
        if cancelled_early:
            self._report(conn, payload, "aborted", runtime=0.0)
            return

        ctx = ExecutionContext(unit_id=unit_id, app_id=payload.get("app_id", ""),
                               node_id=self.node_id,
                               attempt=int(payload.get("attempt", 1)),
                               storage=self.storage)
        started = time.monotonic()
        with self._lock:
            self._active[unit_id] = ctx
            self._started_at[unit_id] = started
        try:
            conn.send(msg.Envelope(sender=self.node_id, kind=msg.UNIT_START, payload={
                "node_id": self.node_id, "node_epoch": payload["node_epoch"],
                "unit_id": unit_id, "attempt": payload["attempt"]}))
        except Exception:
            pass

        status, result, error = "success", None, None
        try:
            result = self._execute(ctx, payload)
        except CancelledExecution:
            status = "aborted"
        except PlatformError as exc:
            status, error = "failure", f"{exc.code}: {exc.message}"
        except Exception as exc:
            status, error = "failure", f"{type(exc).__name__}: {exc}"
        runtime = time.monotonic() - started

        with self._lock:
            self._active.pop(unit_id, None)
            start_ts = self._started_at.pop(unit_id, started)
            self._busy_closed += time.monotonic() - max(start_ts, self._window_start)
            self._cancelled.discard(unit_id)
            if status == "success":
                self._completed_window += 1

        if status == "success":
            result = self._externalize(result, unit_id)
        self._report(conn, payload, status, result=result, error=error, runtime=runtime)

    def _externalize(self, result, unit_id: str):
        """Keep envelopes small: bulky inline results go through storage."""
        try:
            encoded = json.dumps(result)
        except (TypeError, ValueError):
            return {"repr": repr(result)}
        if len(encoded) <= INLINE_RESULT_CAP:
            return result
        ref = self.storage.stage_in(encoded.encode("utf-8"), name=f"{unit_id}.result.json")
        return {"file": ref.to_doc()}

    def _execute(self, ctx: ExecutionContext, payload: dict):
        kind = payload.get("kind", "Task")
        fn_name = payload["payload"].get("function", "")
        args = payload["payload"].get("args", {})
        entry = self.catalog.resolve(fn_name)
        if kind == "Map":
            reducers = int(args["reducers"])
            split = payload["inputs"][0]
            text = self.storage.stage_out(split["digest"]).decode("utf-8")
            partitions, emitted = run_map(entry.fn, ctx, text, reducers)
            out = {}
            for partition in sorted(partitions):
                pairs = partitions[partition]
                ref = self.storage.stage_in(encode_pairs(pairs),
                                            name=f"{ctx.unit_id}.part{partition}")
                out[str(partition)] = {"ref": ref.to_doc(), "pairs": len(pairs)}
            return {"partitions": out, "emitted": emitted}
        if kind == "Reduce":
            inputs = []
            for item in args.get("inputs", []):
                data = self.storage.stage_out(item["ref"]["digest"])
                inputs.append((int(item["split_index"]), decode_pairs(data)))
            text = run_reduce(entry.fn, ctx, inputs)
            ref = self.storage.stage_in(text.encode("utf-8"),
                                        name=f"part-{int(args.get('partition', 0)):05d}.txt")
            return {"output": ref.to_doc(), "partition": args.get("partition"),
                    "keys": text.count("\n")}
        return self.catalog.invoke(fn_name, ctx, args)
