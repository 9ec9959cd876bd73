"""The master container: composition root for fabric, foundation, scheduling,
provisioning, and the node-facing TCP endpoint.

Concurrency model: every state mutation runs as a closure on one event loop
thread. Network threads (per-node frame readers, HTTP handlers, the periodic
ticker) submit closures and perform the returned network effects (dispatch
envelopes, cancels, worker spawns/stops) outside the loop, so the loop never
blocks on I/O.
"""

from __future__ import annotations

import json
import socket
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import events as ev
from . import messaging as msg
from .config import PlatformConfig, Role, UserAccount, new_token
from .errors import (
    NodeBusy,
    NotAuthorized,
    NotFound,
    NotPoolMember,
    PlatformError,
    PoolExhausted,
    UnknownCommand,
    UnknownNode,
    ValidationFailed,
)
from .fabric import NodeDescriptor, NodeDirectory, NodeMetrics, NodeState, aggregate_metrics
from .foundation.accounting import AccountingLedger, PoolUsageLedger, PriceSheet, build_usage_report, compute_bill
from .foundation.journal import Journal
from .foundation.reservation import ReservationCalendar, ReservationSlot
from .foundation.storage import BlobStore
from .loop import EventLoop
from .models.catalog import builtin_catalog
from .models.mapreduce import MapReduceController, MapReduceParams
from .models.sweep import ParameterSweepSpec, expand_sweep
from .models.units import UnitKind, UnitState, WorkUnit
from .provisioning import PoolConfig, PoolManager, evaluate_policy
from .scheduler import (
    ApplicationDescriptor,
    ModelKind,
    QoSSpec,
    SchedulerCore,
)

WORKER_USER_ID = "__worker__"


@dataclass
class TickEffects:
    sends: list = field(default_factory=list)    # (node_id, Envelope)
    spawns: list = field(default_factory=list)   # SpinupTickets due now
    stops: list = field(default_factory=list)    # node ids whose process to stop


class Master:
    def __init__(self, config: PlatformConfig, state_dir: Optional[Path] = None):
        config.validate()
        self.config = config
        self.clock = time.time
        self.started_at = self.clock()
        self.state_dir = Path(state_dir or config.master.state_dir)
        self.state_dir.mkdir(parents=True, exist_ok=True)

        self.loop = EventLoop("master-loop")
        self.event_log = ev.EventLog(self.state_dir / "events.jsonl", clock=self.clock)
        self.journal = Journal(self.state_dir / "journal.jsonl")
        self.store = BlobStore(self.state_dir / "storage", config.master.storage_cap)
        self.directory = NodeDirectory(observer=self._on_node_state)
        self.calendar = ReservationCalendar()
        self.ledger = AccountingLedger()
        self.pool_usage = PoolUsageLedger()
        self.catalog = builtin_catalog()
        self.price_sheet = config.price_sheet
        self.scheduler = SchedulerCore(
            directory=self.directory, calendar=self.calendar, ledger=self.ledger,
            event_log=self.event_log, catalog=self.catalog,
            max_attempts=config.master.max_attempts, clock=self.clock)
        self.pool_manager = PoolManager(list(config.pools),
                                        command_builder=self._worker_command,
                                        clock=self.clock)
        self.provisioning_enabled = config.provisioning.policy.enabled

        self.users: dict[str, UserAccount] = {}
        self.tokens: dict[str, UserAccount] = {}
        for account in config.users:
            self._add_account(account)
        if not config.worker_token:
            config.worker_token = new_token()
        self.worker_account = UserAccount(user_id=WORKER_USER_ID, role=Role.WORKER,
                                          api_token=config.worker_token)
        self.tokens[config.worker_token] = self.worker_account

        self.connections: dict[str, msg.FrameConnection] = {}
        self._conn_lock = threading.Lock()
        self._app_seq = 0
        self._node_seq = 0
        self._tick_due: dict[str, float] = {}
        self._last_sla: list = []
        self._registered_at: dict[str, float] = {}
        self.stop_requested = threading.Event()

        self._tcp_server: Optional[socket.socket] = None
        self.tcp_address: Optional[tuple[str, int]] = None
        self.api_url: Optional[str] = None
        self._api_server = None
        self._threads: list[threading.Thread] = []
        self._stopping = False

        self._replay_journal()

    # -- lifecycle ----------------------------------------------------------------

    def start(self) -> None:
        from .api import ManagementApi  # late import: api imports this module's types
        self.loop.start()
        self._tcp_server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._tcp_server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._tcp_server.bind((self.config.master.bind_host, self.config.master.tcp_port))
        self._tcp_server.listen(64)
        self.tcp_address = self._tcp_server.getsockname()

        self._api_server = ManagementApi(self, self.config.master.bind_host,
                                         self.config.master.api_port,
                                         dashboard_root=self.config.dashboard_root)
        self.api_url = f"http://{self.config.master.bind_host}:{self._api_server.port}"

        accept_thread = threading.Thread(target=self._accept_loop, name="tcp-accept", daemon=True)
        ticker_thread = threading.Thread(target=self._ticker, name="master-ticker", daemon=True)
        self._threads += [accept_thread, ticker_thread]
        accept_thread.start()
        self._api_server.start()
        ticker_thread.start()
        self._write_endpoints()

    def _write_endpoints(self) -> None:
        doc = {"tcp_host": self.tcp_address[0], "tcp_port": self.tcp_address[1],
               "api_url": self.api_url, "pid": None}
        import os
        doc["pid"] = os.getpid()
        (self.state_dir / "endpoints.json").write_text(json.dumps(doc, indent=2))

    def stop(self) -> None:
        if self._stopping:
            return
        self._stopping = True
        self.stop_requested.set()
        if self._api_server is not None:
            self._api_server.stop()
        if self._tcp_server is not None:
            try:
                self._tcp_server.close()
            except OSError:
                pass
        with self._conn_lock:
            conns = list(self.connections.items())
            self.connections.clear()
        for node_id, conn in conns:
            try:
                conn.send(msg.Envelope(sender="master", kind=msg.STOP,
                                       payload={"reason": "shutdown"}))
            except Exception:
                pass
            conn.close()
        self.pool_manager.shutdown()
        self.loop.stop()
        self.event_log.close()
        self.journal.close()

    # -- journal -------------------------------------------------------------------

    def _replay_journal(self) -> None:
        node_docs: dict[str, dict] = {}

        def on_node_registered(data):
            node_docs[data["node_id"]] = data

        def on_node_state(data):
            doc = node_docs.get(data["node_id"])
            if doc is not None:
                doc["state"] = data["state"]

        def on_reservation(data):
            self.calendar.restore(ReservationSlot.from_doc(data))

        def on_accrual(data):
            self.ledger.accrue(data["user"], data["app_id"], data["node_id"],
                               data["seconds"], completed=data.get("completed", False))

        def on_pool_open(data):
            self.pool_usage.open(data["node_id"], data["pool_id"], data["acquired_at"])

        def on_pool_close(data):
            self.pool_usage.close(data["node_id"], data["released_at"])

        def on_user_added(data):
            account = UserAccount(user_id=data["user_id"], role=Role(data["role"]),
                                  api_token=data["api_token"],
                                  display_name=data.get("display_name", ""))
            self._add_account(account, replace=True)

        def on_user_removed(data):
            account = self.users.pop(data["user_id"], None)
            if account is not None:
                self.tokens.pop(account.api_token, None)

        def on_price_set(data):
            self.price_sheet = PriceSheet.make(data["rate_per_node_second"],
                                               data.get("currency_label", "credits"))

        self.journal.replay_into({
            "node_registered": on_node_registered,
            "node_state": on_node_state,
            "reservation_granted": on_reservation,
            "accrual": on_accrual,
            "pool_open": on_pool_open,
            "pool_close": on_pool_close,
            "user_added": on_user_added,
            "user_removed": on_user_removed,
            "price_set": on_price_set,
        })
        # nodes come back in their last journaled state; live ones re-register
        for doc in node_docs.values():
            desc = NodeDescriptor(
                node_id=doc["node_id"], address=doc["address"],
                capacity=int(doc["capacity"]),
                labels=frozenset(doc.get("labels", [])),
                state=NodeState(doc.get("state", "Alive")),
                epoch=int(doc.get("epoch", 1)),
                last_seen=float(doc.get("last_seen", 0.0)),
                pool_id=doc.get("pool_id"))
            self.directory_restore(desc)

    def directory_restore(self, desc: NodeDescriptor) -> None:
        self.directory._nodes[desc.node_id] = desc
        self.directory._metrics.setdefault(desc.node_id, [])

    # -- observers -------------------------------------------------------------------

    def _on_node_state(self, node_id: str, old, new, epoch: int) -> None:
        if old is None:
            node = self.directory.get(node_id)
            self.event_log.append(ev.NODE_REGISTERED, node_id=node_id, epoch=epoch,
                                  capacity=node.capacity if node else None,
                                  address=node.address if node else None,
                                  pool_id=node.pool_id if node else None)
            if node is not None:
                self.journal.append("node_registered", node.to_doc())
        else:
            self.event_log.append(ev.NODE_STATE, node_id=node_id,
                                  **{"from": old.value}, to=new.value, epoch=epoch)
            self.journal.append("node_state", {"node_id": node_id,
                                               "state": new.value, "epoch": epoch})

    # -- accounts ----------------------------------------------------------------------

    def _add_account(self, account: UserAccount, replace: bool = False) -> None:
        if not replace and account.user_id in self.users:
            raise ValidationFailed(f"user {account.user_id} already exists")
        self.users[account.user_id] = account
        self.tokens[account.api_token] = account

    def authenticate(self, token: Optional[str]) -> Optional[UserAccount]:
        if not token:
            return None
        return self.tokens.get(token)

    # -- worker TCP endpoint --------------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self.stop_requested.is_set():
            try:
                sock, _ = self._tcp_server.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = msg.FrameConnection(sock, self.config.master.frame_limit)
            thread = threading.Thread(target=self._serve_connection, args=(conn,),
                                      name="node-conn", daemon=True)
            thread.start()

    def _serve_connection(self, conn: msg.FrameConnection) -> None:
        node_id: Optional[str] = None
        try:
            for env in conn.envelopes():
                if env.kind == msg.REGISTER:
                    reply, accepted, assigned = self.loop.call(
                        lambda: self._core_register(env))
                    if accepted:
                        node_id = assigned
                        with self._conn_lock:
                            old = self.connections.get(node_id)
                            self.connections[node_id] = conn
                        if old is not None and old is not conn:
                            old.close()
                    conn.send(reply)
                    if not accepted:
                        return
                    self._run_sends(self.loop.call(self._core_dispatch))
                elif env.kind == msg.HEARTBEAT:
                    self.loop.call(lambda: self._core_heartbeat(env.payload))
                elif env.kind == msg.UNIT_START:
                    keep = self.loop.call(lambda: self.scheduler.mark_running(
                        env.payload["node_id"], env.payload["node_epoch"],
                        env.payload["unit_id"], env.payload["attempt"]))
                    if not keep:
                        conn.send(msg.Envelope(sender="master", kind=msg.CANCEL,
                                               payload={"unit_id": env.payload["unit_id"]}))
                elif env.kind == msg.UNIT_RESULT:
                    sends = self.loop.call(lambda: self._core_unit_result(env.payload))
                    self._run_sends(sends)
                else:
                    conn.send(msg.Envelope(sender="master", kind=msg.ERROR,
                                           payload={"error": "UnknownKind",
                                                    "kind": env.kind}))
        except PlatformError:
            pass
        except OSError:
            pass
        finally:
            conn.close()
            if node_id is not None:
                with self._conn_lock:
                    if self.connections.get(node_id) is conn:
                        del self.connections[node_id]

    def _core_register(self, env: msg.Envelope):
        payload = env.payload
        if payload.get("token") != self.config.worker_token:
            return (env.reply("master", msg.ERROR,
                              {"error": "Unauthorized", "message": "bad worker token"}),
                    False, None)
        node_id = payload.get("node_id") or self._next_node_id()
        try:
            desc = NodeDescriptor(
                node_id=node_id,
                address=payload.get("address", ""),
                capacity=int(payload.get("capacity", 1)),
                labels=frozenset(payload.get("labels", [])),
                pool_id=payload.get("pool_id") or None)
            entry = self.directory.register(desc, now=self.clock())
        except PlatformError as exc:
            return env.reply("master", msg.ERROR, exc.to_doc()), False, None
        if entry.epoch > 1:
            # fast restart: anything assigned to the previous epoch is gone
            self.scheduler.on_node_dead(node_id)
        if entry.pool_id:
            self.pool_manager.adopt(node_id, entry.pool_id)
        self.scheduler.idle_since.setdefault(node_id, self.clock())
        self._registered_at[node_id] = self.clock()
        reply = env.reply("master", msg.REGISTER_ACK, {
            "node_id": node_id,
            "epoch": entry.epoch,
            "heartbeat_period": self.config.master.heartbeat_period,
            "frame_limit": self.config.master.frame_limit,
        })
        return reply, True, node_id

    def _next_node_id(self) -> str:
        while True:
            self._node_seq += 1
            node_id = f"w{self._node_seq:03d}"
            if self.directory.get(node_id) is None:
                return node_id

    def _core_heartbeat(self, payload: dict) -> None:
        node_id = payload.get("node_id", "")
        metrics_doc = payload.get("metrics")
        metrics = None
        if metrics_doc:
            metrics_doc.setdefault("node_id", node_id)
            metrics_doc.setdefault("ts", self.clock())
            metrics = NodeMetrics.from_doc(metrics_doc)
        try:
            self.directory.process_heartbeat(node_id, metrics, now=self.clock())
        except UnknownNode:
            # stale node (dead epoch or never registered): tell it to re-register
            conn = self.connections.get(node_id)
            if conn is not None:
                try:
                    conn.send(msg.Envelope(sender="master", kind=msg.ERROR,
                                           payload={"error": "UnknownNode",
                                                    "message": "re-register required"}))
                except Exception:
                    pass

    def _core_unit_result(self, payload: dict) -> list:
        effects = self.scheduler.on_unit_result(
            node_id=payload["node_id"], node_epoch=payload["node_epoch"],
            unit_id=payload["unit_id"], attempt=payload["attempt"],
            status=payload["status"], result=payload.get("result"),
            error=payload.get("error"), runtime=float(payload.get("runtime", 0.0)))
        if effects.accrued is not None:
            self.journal.append("accrual", effects.accrued)
        sends = [(node, msg.Envelope(sender="master", kind=msg.CANCEL,
                                     payload={"unit_id": uid}))
                 for node, uid in effects.cancels]
        sends.extend(self._core_dispatch())
        return sends

    def _core_dispatch(self) -> list:
        decisions = self.scheduler.dispatch_next(self.clock())
        sends = []
        for decision in decisions:
            unit = self.scheduler.units[decision.unit_id]
            sends.append((decision.node_id, msg.Envelope(
                sender="master", kind=msg.DISPATCH, payload={
                    "unit_id": unit.unit_id,
                    "app_id": unit.app_id,
                    "kind": unit.kind.value,
                    "payload": unit.payload,
                    "inputs": list(unit.inputs),
                    "attempt": decision.attempt,
                    "node_epoch": decision.node_epoch,
                    "slot": decision.slot,
                })))
        return sends

    def _run_sends(self, sends: list) -> None:
        for node_id, envelope in sends:
            with self._conn_lock:
                conn = self.connections.get(node_id)
            if conn is None:
                self._send_failed(node_id, envelope)
                continue
            try:
                conn.send(envelope)
            except Exception:
                self._send_failed(node_id, envelope)

    def _send_failed(self, node_id: str, envelope: msg.Envelope) -> None:
        if envelope.kind != msg.DISPATCH:
            return
        unit_id = envelope.payload["unit_id"]

        def undo():
            unit = self.scheduler.units.get(unit_id)
            a = self.scheduler.assignments.get(unit_id)
            if unit is None or a is None or a.node_id != node_id:
                return []
            self.scheduler._release_assignment(unit_id)
            if unit.state is UnitState.SCHEDULED:
                self.scheduler._set_unit_state(unit, UnitState.PENDING)
                unit.assigned_node = None
                self.scheduler.pending.append(unit_id)
                self.event_log.append(ev.REQUEUE, unit_id=unit_id,
                                      app_id=unit.app_id, reason="send_failed",
                                      node_id=node_id, attempts=unit.attempts)
            return []

        self.loop.call(undo)

    # -- periodic work ---------------------------------------------------------------------

    def _ticker(self) -> None:
        base = min(self.config.master.dispatch_interval,
                   self.config.master.sweep_interval, 0.1)
        while not self.stop_requested.is_set():
            effects = self.loop.call(self._core_tick)
            self._run_sends(effects.sends)
            for ticket in effects.spawns:
                try:
                    self.pool_manager.spawn(ticket)
                    self.event_log.append(ev.POOL_NODE_SPAWNED, node_id=ticket.node_id,
                                          pool_id=ticket.pool_id)
                except PlatformError:
                    self.loop.call(lambda t=ticket: self._spawn_failed(t))
            for node_id in effects.stops:
                try:
                    self.pool_manager.stop_node(node_id)
                except NotPoolMember:
                    pass
            self.stop_requested.wait(base)

    def _spawn_failed(self, ticket) -> None:
        self.pool_usage.close(ticket.node_id, self.clock())
        self.event_log.append(ev.POOL_RELEASE, node_id=ticket.node_id,
                              pool_id=ticket.pool_id, reason="spawn_failed")

    def _due(self, name: str, interval: float, now: float) -> bool:
        due_at = self._tick_due.get(name, 0.0)
        if now >= due_at:
            self._tick_due[name] = now + interval
            return True
        return False

    def _core_tick(self) -> TickEffects:
        now = self.clock()
        effects = TickEffects()
        cfg = self.config.master

        if self._due("sweep", cfg.sweep_interval, now):
            dead = self.directory.sweep_failures(now, cfg.heartbeat_period)
            for node_id in dead:
                self.scheduler.on_node_dead(node_id)
                self.pool_usage.close(node_id, now)
                self.journal.append("pool_close", {"node_id": node_id, "released_at": now})
                self.pool_manager.node_died(node_id)
                with self._conn_lock:
                    conn = self.connections.pop(node_id, None)
                if conn is not None:
                    conn.close()

        if self._due("sla", cfg.sla_interval, now):
            self._last_sla = self.scheduler.check_sla(now)

        if self._due("provisioning", self.config.provisioning.eval_period, now):
            effects.stops.extend(self._core_provision(now))

        # drained nodes with nothing left assigned get released
        for node_id in self.scheduler.drained_and_idle():
            try:
                effects.stops.extend(self._core_release_node(node_id, reason="drained"))
            except PlatformError:
                continue

        for ticket in self.pool_manager.due_spinups(now):
            effects.spawns.append(ticket)

        if self._due("dispatch", cfg.dispatch_interval, now):
            effects.sends.extend(self._core_dispatch())
        return effects

    def _core_provision(self, now: float) -> list:
        """Evaluate the elasticity policy; returns node ids to process-stop."""
        policy = self.config.provisioning.policy
        if not self.provisioning_enabled or not policy.enabled:
            return []
        stats = self.scheduler.queue_stats()
        snapshots = self.pool_manager.snapshots()
        pending_spinup_slots = sum(s.pending_spinup * s.node_capacity for s in snapshots)
        idle_public = []
        for node in self.directory.alive():
            if not self.pool_manager.releasable(node.node_id):
                continue
            if self.scheduler.node_units.get(node.node_id):
                continue
            if node.node_id in self.scheduler.draining:
                continue
            idle_since = self.scheduler.idle_since.get(
                node.node_id, self._registered_at.get(node.node_id, now))
            idle_public.append((node.node_id, idle_since))

        plan = evaluate_policy(
            pending_units=stats["pending_units"],
            current_slots=stats["total_slots"] + pending_spinup_slots,
            pools=snapshots, policy=policy, sla_events=self._last_sla,
            idle_public_nodes=idle_public, now=now)

        for pool_id, count in sorted(plan.acquire.items()):
            try:
                node_ids = self.pool_manager.acquire(pool_id, count, now)
            except PoolExhausted:
                continue
            for node_id in node_ids:
                self.pool_usage.open(node_id, pool_id, now)
                self.journal.append("pool_open", {"node_id": node_id, "pool_id": pool_id,
                                                  "acquired_at": now})
            self.event_log.append(ev.POOL_ACQUIRE, pool_id=pool_id, count=count,
                                  nodes=node_ids, pending_units=stats["pending_units"],
                                  current_slots=stats["total_slots"] + pending_spinup_slots)

        stops = []
        for node_id in plan.release:
            try:
                stops.extend(self._core_release_node(node_id, reason="idle_cooldown"))
            except PlatformError:
                continue
        return stops

    def _core_release_node(self, node_id: str, reason: str) -> list:
        """Release one node: Released in the directory, usage closed, process
        stopped. Raises NodeBusy when units are still assigned."""
        node = self.directory.get(node_id)
        if node is None:
            raise UnknownNode(node_id)
        if self.scheduler.node_units.get(node_id):
            raise NodeBusy(f"{node_id} still has assigned units")
        if node.state is not NodeState.ALIVE:
            raise ValidationFailed(f"{node_id} is {node.state.value}, not Alive")
        now = self.clock()
        self.directory.release(node_id)
        self.scheduler.undrain(node_id)
        self.pool_usage.close(node_id, now)
        self.journal.append("pool_close", {"node_id": node_id, "released_at": now})
        self.event_log.append(ev.POOL_RELEASE, node_id=node_id,
                              pool_id=self.pool_manager.pool_of(node_id), reason=reason)
        with self._conn_lock:
            conn = self.connections.get(node_id)
        if conn is not None:
            try:
                conn.send(msg.Envelope(sender="master", kind=msg.STOP,
                                       payload={"reason": reason}))
            except Exception:
                pass
        return [node_id] if self.pool_manager.pool_of(node_id) else []

    def _worker_command(self, node_id: str, pool: PoolConfig) -> list:
        argv = [sys.executable, "-m", "minicloud.cli", "worker",
                "--master", f"{self.tcp_address[0]}:{self.tcp_address[1]}",
                "--api", self.api_url,
                "--token", self.config.worker_token,
                "--node-id", node_id,
                "--capacity", str(pool.node_capacity),
                "--pool", pool.pool_id]
        if pool.node_labels:
            argv += ["--labels", ",".join(pool.node_labels)]
        return argv

    # -- API facade (each method runs its closure on the loop) ------------------------------

    def api_submit_app(self, user: UserAccount, body: dict) -> dict:
        doc, sends = self.loop.call(lambda: self._core_submit(user, body))
        self._run_sends(sends)
        return doc

    def _core_submit(self, user: UserAccount, body: dict):
        try:
            model = ModelKind(body.get("model_kind", ""))
        except ValueError:
            raise ValidationFailed(f"unsupported model_kind {body.get('model_kind')!r}")
        qos = QoSSpec.from_doc(body.get("qos"))
        now = self.clock()
        self._app_seq += 1
        app_id = f"app-{self._app_seq:04d}"
        descriptor = ApplicationDescriptor(
            app_id=app_id, owner=user.user_id, model_kind=model,
            submitted_at=now, qos=qos, name=body.get("name", ""))

        controller = None
        sealed = True
        if model is ModelKind.MAPREDUCE:
            params = MapReduceParams.from_doc(body.get("mapreduce") or {})
            for fn_name in (params.map_fn, params.reduce_fn):
                self.catalog.resolve(fn_name)
            for split in params.splits:
                if not self.store.contains(split["digest"]):
                    raise NotFound(f"split {split['digest']} not staged")
            controller = MapReduceController(app_id, params)
            units = controller.initial_units()
            sealed = controller.sealed
        elif model is ModelKind.THREAD:
            units = [self._unit_from_doc(doc_, UnitKind.THREAD, i)
                     for i, doc_ in enumerate(body.get("units", []))]
            sealed = bool(body.get("sealed", False))
        else:
            if body.get("sweep"):
                spec = ParameterSweepSpec.from_doc(body["sweep"])
                units = expand_sweep(spec)
            else:
                units = [self._unit_from_doc(doc_, UnitKind.TASK, i)
                         for i, doc_ in enumerate(body.get("units", []))]

        self.scheduler.enqueue_app(descriptor, units, controller=controller, sealed=sealed)
        sends = self._core_dispatch()
        return {"app_id": app_id, "state": descriptor.state.value,
                "units": len(units)}, sends

    def _unit_from_doc(self, doc: dict, default_kind: UnitKind, index: int) -> WorkUnit:
        if not isinstance(doc, dict):
            raise ValidationFailed("unit entries must be objects")
        return WorkUnit(
            unit_id=doc.get("unit_id") or f"u{index:06d}",
            app_id="",
            kind=UnitKind(doc["kind"]) if doc.get("kind") else default_kind,
            payload={"function": doc.get("function", ""), "args": doc.get("args", {})},
            inputs=list(doc.get("inputs", [])),
            required_labels=frozenset(doc.get("required_labels", [])),
        )

    def _require_owner_or_admin(self, user: UserAccount, app_id: str):
        app = self.scheduler._require_app(app_id)
        if user.role is not Role.ADMIN and app.descriptor.owner != user.user_id:
            raise NotAuthorized(f"{user.user_id} may not access {app_id}")
        return app

    def api_app_status(self, user: UserAccount, app_id: str, include_units: bool = True) -> dict:
        def read():
            self._require_owner_or_admin(user, app_id)
            return self.scheduler.status_doc(app_id, include_units=include_units)
        return self.loop.call(read)

    def api_list_apps(self, user: UserAccount) -> list:
        owner = None if user.role is Role.ADMIN else user.user_id
        return self.loop.call(lambda: self.scheduler.list_apps(owner))

    def api_results(self, user: UserAccount, app_id: str) -> dict:
        def read():
            self._require_owner_or_admin(user, app_id)
            return self.scheduler.results_doc(app_id)
        return self.loop.call(read)

    def api_cancel_app(self, user: UserAccount, app_id: str) -> dict:
        def mutate():
            self._require_owner_or_admin(user, app_id)
            cancels = self.scheduler.cancel_app(app_id, user.user_id,
                                                admin=user.role is Role.ADMIN)
            return cancels
        cancels = self.loop.call(mutate)
        self._run_sends([(n, msg.Envelope(sender="master", kind=msg.CANCEL,
                                          payload={"unit_id": u})) for n, u in cancels])
        return {"app_id": app_id, "state": "Cancelled", "cancelled_units": len(cancels)}

    def api_close_app(self, user: UserAccount, app_id: str) -> dict:
        def mutate():
            self._require_owner_or_admin(user, app_id)
            self.scheduler.close_app(app_id)
            return self.scheduler.status_doc(app_id, include_units=False)
        return self.loop.call(mutate)

    def api_add_units(self, user: UserAccount, app_id: str, unit_docs: list) -> dict:
        def mutate():
            self._require_owner_or_admin(user, app_id)
            units = [self._unit_from_doc(d, UnitKind.THREAD, i)
                     for i, d in enumerate(unit_docs)]
            # avoid id collisions with earlier waves
            app = self.scheduler.apps[app_id]
            base = len(app.unit_ids)
            for i, unit in enumerate(units):
                if unit.unit_id.startswith("u") and unit.unit_id[1:].isdigit():
                    unit.unit_id = f"u{base + i:06d}"
            admitted = self.scheduler.add_units(app_id, units)
            return [u.unit_id for u in admitted]
        unit_ids = self.loop.call(mutate)
        self._run_sends(self.loop.call(self._core_dispatch))
        return {"app_id": app_id, "unit_ids": unit_ids}

    def api_unit_doc(self, user: UserAccount, app_id: str, unit_id: str) -> dict:
        def read():
            self._require_owner_or_admin(user, app_id)
            full_id = unit_id if unit_id.startswith(app_id + ":") else f"{app_id}:{unit_id}"
            return self.scheduler.unit_doc(full_id)
        return self.loop.call(read)

    def api_abort_unit(self, user: UserAccount, app_id: str, unit_id: str) -> dict:
        def mutate():
            self._require_owner_or_admin(user, app_id)
            full_id = unit_id if unit_id.startswith(app_id + ":") else f"{app_id}:{unit_id}"
            cancel = self.scheduler.abort_unit(full_id, user.user_id,
                                               admin=user.role is Role.ADMIN)
            doc = self.scheduler.unit_doc(full_id)
            return cancel, doc
        cancel, doc = self.loop.call(mutate)
        if cancel is not None:
            self._run_sends([(cancel[0], msg.Envelope(
                sender="master", kind=msg.CANCEL, payload={"unit_id": cancel[1]}))])
        return doc

    def api_nodes(self) -> list:
        def read():
            out = []
            for node in self.directory.snapshot():
                doc = node.to_doc()
                metrics = self.directory.latest_metrics(node.node_id)
                doc["metrics"] = metrics.to_doc() if metrics else None
                doc["draining"] = node.node_id in self.scheduler.draining
                doc["assigned_units"] = len(self.scheduler.node_units.get(node.node_id, ()))
                out.append(doc)
            return out
        return self.loop.call(read)

    def api_pools(self) -> dict:
        def read():
            now = self.clock()
            pools = []
            for snap in self.pool_manager.snapshots():
                pools.append({
                    "pool_id": snap.pool_id, "kind": snap.kind.value,
                    "max_nodes": snap.max_nodes, "node_capacity": snap.node_capacity,
                    "cost_rate": snap.cost_rate, "active": snap.active,
                    "pending_spinup": snap.pending_spinup,
                    "node_seconds": self.pool_usage.total_node_seconds(snap.pool_id, now),
                })
            policy = self.config.provisioning.policy
            return {"pools": pools,
                    "provisioning": {"enabled": self.provisioning_enabled,
                                     "target_pending_per_slot": policy.target_pending_per_slot,
                                     "cooldown": policy.cooldown,
                                     "eval_period": self.config.provisioning.eval_period}}
        return self.loop.call(read)

    def api_usage_report(self) -> dict:
        def read():
            now = self.clock()
            summary = aggregate_metrics(self.directory.metrics_samples())
            report = build_usage_report(self.ledger.records(), summary,
                                        interval=(self.started_at, now))
            report["pool_usage"] = {
                snap.pool_id: {
                    "node_seconds": self.pool_usage.total_node_seconds(snap.pool_id, now),
                    "records": [r.to_doc() for r in self.pool_usage.records(snap.pool_id)],
                }
                for snap in self.pool_manager.snapshots()}
            report["queue"] = self.scheduler.queue_stats()
            return report
        return self.loop.call(read)

    def api_billing(self, user: UserAccount, target_user: str) -> dict:
        if user.role is not Role.ADMIN and user.user_id != target_user:
            raise NotAuthorized(f"{user.user_id} may not read bills for {target_user}")
        def read():
            records = self.ledger.records(target_user)
            return compute_bill(records, self.price_sheet, user=target_user).to_doc()
        return self.loop.call(read)

    def api_catalog(self) -> list:
        return self.catalog.listing()

    def api_events(self, since: int, limit: int = 1000) -> dict:
        events = self.event_log.since(since, limit)
        next_since = events[-1]["seq"] if events else since
        return {"events": events, "next_since": next_since}

    # -- admin commands -----------------------------------------------------------------------

    ADMIN_COMMANDS = ("add_user", "remove_user", "set_price", "drain_node",
                      "toggle_provisioning", "tail_events", "usage_report",
                      "reserve", "cancel_app", "stop_platform")

    def api_admin(self, user: UserAccount, command: str, params: dict) -> dict:
        if user.role is not Role.ADMIN:
            raise NotAuthorized(f"{user.user_id} is not an administrator")
        if command not in self.ADMIN_COMMANDS:
            raise UnknownCommand(command)
        handler = getattr(self, f"_admin_{command}")
        def run():
            result = handler(params)
            self.event_log.append(ev.ADMIN_ACTION, command=command, actor=user.user_id,
                                  params={k: v for k, v in params.items() if k != "token"})
            return result
        result = self.loop.call(run)
        if command == "cancel_app":
            self._run_sends(result.pop("_sends", []))
        return result

    def _admin_add_user(self, params: dict) -> dict:
        account = UserAccount(
            user_id=params.get("user_id", ""),
            role=Role(params.get("role", "Developer")),
            api_token=params.get("token") or new_token(),
            display_name=params.get("name", ""))
        if account.role is Role.WORKER:
            raise ValidationFailed("the Worker role is internal")
        self._add_account(account)
        self.journal.append("user_added", account.to_doc(with_token=True))
        return account.to_doc(with_token=True)

    def _admin_remove_user(self, params: dict) -> dict:
        user_id = params.get("user_id", "")
        account = self.users.pop(user_id, None)
        if account is None:
            raise NotFound(f"no user {user_id}")
        self.tokens.pop(account.api_token, None)
        self.journal.append("user_removed", {"user_id": user_id})
        return {"removed": user_id}

    def _admin_set_price(self, params: dict) -> dict:
        self.price_sheet = PriceSheet.make(
            params.get("rate_per_node_second", "0"),
            params.get("currency_label", self.price_sheet.currency_label))
        self.journal.append("price_set", self.price_sheet.to_doc())
        return self.price_sheet.to_doc()

    def _admin_drain_node(self, params: dict) -> dict:
        node_id = params.get("node_id", "")
        self.scheduler.drain_node(node_id)
        return {"node_id": node_id, "draining": True}

    def _admin_toggle_provisioning(self, params: dict) -> dict:
        enabled = params.get("enabled")
        if enabled is None:
            enabled = not self.provisioning_enabled
        self.provisioning_enabled = bool(enabled)
        return {"enabled": self.provisioning_enabled}

    def _admin_tail_events(self, params: dict) -> dict:
        count = int(params.get("count", 100))
        events = self.event_log.all_events()[-count:]
        return {"events": events}

    def _admin_usage_report(self, params: dict) -> dict:
        now = self.clock()
        summary = aggregate_metrics(self.directory.metrics_samples())
        return build_usage_report(self.ledger.records(), summary,
                                  interval=(self.started_at, now))

    def _admin_reserve(self, params: dict) -> dict:
        node_id = params.get("node_id", "")
        self.directory.require(node_id)
        owner = params.get("owner", "")
        if owner not in self.users:
            raise ValidationFailed(f"unknown owner {owner!r}")
        try:
            slot = self.calendar.request(node_id, owner,
                                         float(params["start"]), float(params["end"]))
        except PlatformError as exc:
            self.event_log.append(ev.RESERVATION_REJECTED, node_id=node_id,
                                  owner=owner, start=params.get("start"),
                                  end=params.get("end"), error=exc.code)
            raise
        self.event_log.append(ev.RESERVATION_GRANTED, node_id=node_id,
                              owner=owner, reservation_id=slot.reservation_id,
                              start=slot.start, end=slot.end)
        self.journal.append("reservation_granted", slot.to_doc())
        return slot.to_doc()

    def _admin_cancel_app(self, params: dict) -> dict:
        app_id = params.get("app_id", "")
        cancels = self.scheduler.cancel_app(app_id, "admin", admin=True)
        return {"app_id": app_id, "state": "Cancelled",
                "_sends": [(n, msg.Envelope(sender="master", kind=msg.CANCEL,
                                            payload={"unit_id": u}))
                           for n, u in cancels]}

    def _admin_stop_platform(self, params: dict) -> dict:
        self.stop_requested.set()
        return {"stopping": True}
