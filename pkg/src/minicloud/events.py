"""Append-only event log: one JSON event per line.

This log is the assertion surface for most platform invariants; the audit
functions below replay it and check every recorded WorkUnit and node state
transition against the legal relations.
"""

from __future__ import annotations

import json
import threading
from pathlib import Path
from typing import Callable, Iterable, Optional

from .fabric import NODE_TRANSITIONS, NodeState
from .models.units import DEFAULT_MAX_ATTEMPTS, UNIT_TRANSITIONS, UnitState

# event kinds
NODE_REGISTERED = "NodeRegistered"
NODE_STATE = "NodeStateChanged"
APP_SUBMITTED = "AppSubmitted"
APP_STATE = "AppStateChanged"
UNIT_STATE = "UnitStateChanged"
DISPATCH = "Dispatch"
UNIT_RESULT = "UnitResult"
STALE_REPORT = "StaleReport"
REQUEUE = "Requeue"
RESERVATION_GRANTED = "ReservationGranted"
RESERVATION_REJECTED = "ReservationRejected"
SLA_EVENT = "SlaEvent"
ACCRUAL = "Accrual"
POOL_ACQUIRE = "PoolAcquire"
POOL_NODE_SPAWNED = "PoolNodeSpawned"
POOL_RELEASE = "PoolRelease"
ADMIN_ACTION = "AdminAction"
DRAIN = "Drain"


class EventLog:
    """Writer with an in-memory tail for the ``/api/events`` endpoint."""

    def __init__(self, path: Optional[str | Path] = None, clock: Callable[[], float] = None,
                 tail_size: int = 50000):
        import time
        self.path = Path(path) if path is not None else None
        self._clock = clock or time.time
        self._lock = threading.Lock()
        self._seq = 0
        self._tail: list[dict] = []
        self._tail_size = tail_size
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a", encoding="utf-8")

    def append(self, kind: str, *, unit_id: str = None, app_id: str = None,
               node_id: str = None, **detail) -> dict:
        with self._lock:
            self._seq += 1
            event = {"seq": self._seq, "ts": self._clock(), "kind": kind,
                     "unit_id": unit_id, "app_id": app_id, "node_id": node_id,
                     "detail": detail}
            self._tail.append(event)
            del self._tail[:-self._tail_size]
            if self._fh is not None:
                self._fh.write(json.dumps(event, sort_keys=True) + "\n")
                self._fh.flush()
            return event

    def since(self, seq: int, limit: int = 1000) -> list[dict]:
        with self._lock:
            return [e for e in self._tail if e["seq"] > seq][:limit]

    def all_events(self) -> list[dict]:
        with self._lock:
            return list(self._tail)

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None


def read_event_log(path: str | Path) -> list[dict]:
    events = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                events.append(json.loads(line))
    return events


def audit_unit_transitions(events: Iterable[dict]) -> list[str]:
    """Replay UnitStateChanged events; returns a description of every illegal
    transition found (empty list = clean log)."""
    violations = []
    state: dict[str, UnitState] = {}
    for event in events:
        if event["kind"] != UNIT_STATE:
            continue
        unit_id = event["unit_id"]
        detail = event["detail"]
        old = UnitState(detail["from"]) if detail.get("from") else None
        new = UnitState(detail["to"])
        attempts = int(detail.get("attempts", 0))
        max_attempts = int(detail.get("max_attempts", DEFAULT_MAX_ATTEMPTS))
        known = state.get(unit_id)
        if known is None:
            if old is not None and old is not UnitState.PENDING:
                violations.append(f"{unit_id}: first seen in state {old.value}, not Pending")
        elif old is None or old is not known:
            violations.append(
                f"{unit_id}: event claims transition from "
                f"{old.value if old else '?'} but last known state is {known.value}")
        if old is not None:
            if new not in UNIT_TRANSITIONS[old]:
                violations.append(f"{unit_id}: illegal transition {old.value} -> {new.value}")
            elif old is UnitState.FAILED and new is UnitState.PENDING and attempts >= max_attempts:
                violations.append(
                    f"{unit_id}: retry with attempts {attempts} >= max {max_attempts}")
        if attempts > max_attempts:
            violations.append(f"{unit_id}: attempts {attempts} exceeds max {max_attempts}")
        state[unit_id] = new
    return violations


def audit_node_transitions(events: Iterable[dict]) -> list[str]:
    """Replay node lifecycle events; re-registration legally starts a new
    epoch, every within-epoch move must be in the node relation."""
    violations = []
    state: dict[str, tuple[NodeState, int]] = {}
    for event in events:
        node_id = event["node_id"]
        detail = event["detail"]
        if event["kind"] == NODE_REGISTERED:
            epoch = int(detail["epoch"])
            prev = state.get(node_id)
            if prev is not None and epoch != prev[1] + 1:
                violations.append(
                    f"{node_id}: re-register epoch {epoch}, expected {prev[1] + 1}")
            state[node_id] = (NodeState.ALIVE, epoch)
        elif event["kind"] == NODE_STATE:
            old = NodeState(detail["from"]) if detail.get("from") else None
            new = NodeState(detail["to"])
            epoch = int(detail["epoch"])
            prev = state.get(node_id)
            if prev is None:
                violations.append(f"{node_id}: state change before registration")
            else:
                prev_state, prev_epoch = prev
                if epoch != prev_epoch:
                    violations.append(
                        f"{node_id}: state change in epoch {epoch}, current epoch {prev_epoch}")
                elif old is not None and old is not prev_state:
                    violations.append(
                        f"{node_id}: event claims {old.value} -> {new.value} but last known "
                        f"state is {prev_state.value}")
                elif new not in NODE_TRANSITIONS[prev_state]:
                    violations.append(
                        f"{node_id}: illegal transition {prev_state.value} -> {new.value}")
            state[node_id] = (new, epoch if prev is None else prev[1])
    return violations


def audit_event_log(events: Iterable[dict]) -> list[str]:
    events = list(events)
    return audit_unit_transitions(events) + audit_node_transitions(events)
