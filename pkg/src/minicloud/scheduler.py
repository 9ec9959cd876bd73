"""Application admission and FIFO dispatch.

Units dispatch in arrival order onto the lowest-id Alive node that has a free
slot, matches the unit's required labels, and passes the reservation filter
(node unreserved at dispatch time, or reserved by the submitting owner).
Unit failures consume an attempt and requeue until max_attempts; node death
requeues without consuming an attempt. Results from superseded assignments
are fenced off by (node epoch, attempt ordinal) and discarded as stale.
"""

from __future__ import annotations

import enum
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Optional

from . import events as ev
from .errors import (
    DuplicateAppId,
    EmptyBag,
    NotAuthorized,
    NotTerminal,
    UnknownApp,
    UnknownFunction,
    UnknownUnit,
    ValidationFailed,
)
from .fabric import NodeDirectory, NodeState
from .foundation.accounting import AccountingLedger
from .foundation.reservation import ReservationCalendar
from .models.catalog import FunctionCatalog
from .models.mapreduce import MapReduceController
from .models.units import DEFAULT_MAX_ATTEMPTS, UnitKind, UnitState, WorkUnit


class AppState(str, enum.Enum):
    QUEUED = "Queued"
    RUNNING = "Running"
    COMPLETED = "Completed"
    FAILED = "Failed"
    CANCELLED = "Cancelled"


APP_TERMINAL = {AppState.COMPLETED, AppState.FAILED, AppState.CANCELLED}


class ModelKind(str, enum.Enum):
    TASK = "Task"
    THREAD = "Thread"
    MAPREDUCE = "MapReduce"


@dataclass
class QoSSpec:
    deadline: Optional[float] = None  # absolute platform time
    max_budget: Optional[str] = None  # recorded and reported, not enforced

    def to_doc(self) -> dict:
        return {"deadline": self.deadline, "max_budget": self.max_budget}

    @classmethod
    def from_doc(cls, doc: Optional[dict]) -> "QoSSpec":
        if not doc:
            return cls()
        return cls(deadline=doc.get("deadline"), max_budget=doc.get("max_budget"))


@dataclass
class ApplicationDescriptor:
    app_id: str
    owner: str
    model_kind: ModelKind
    submitted_at: float
    state: AppState = AppState.QUEUED
    qos: QoSSpec = field(default_factory=QoSSpec)
    name: str = ""


@dataclass
class Assignment:
    node_id: str
    node_epoch: int
    attempt: int  # 1-based ordinal of the try this dispatch belongs to
    slot: int
    dispatched_at: float


@dataclass
class ScheduleDecision:
    unit_id: str
    app_id: str
    node_id: str
    node_epoch: int
    slot: int
    attempt: int
    decided_at: float


@dataclass
class SlaEvent:
    app_id: str
    kind: str  # AtRisk | Violated
    at: float

    def to_doc(self) -> dict:
        return {"app_id": self.app_id, "kind": self.kind, "at": self.at}


@dataclass
class ResultEffects:
    """What the master must do after a unit report was applied."""
    new_units: list = field(default_factory=list)
    cancels: list = field(default_factory=list)  # (node_id, unit_id)
    accrued: Optional[dict] = None  # journal-ready accrual record


class RuntimeEstimator:
    """Trailing mean of completed unit runtimes (window 50, seed 1 s)."""

    def __init__(self, window: int = 50, seed: float = 1.0):
        self._window = window
        self._seed = seed
        self._samples: deque = deque(maxlen=window)

    def add(self, runtime: float) -> None:
        self._samples.append(runtime)

    def mean(self) -> float:
        if not self._samples:
            return self._seed
        return sum(self._samples) / len(self._samples)


@dataclass
class AppRecord:
    descriptor: ApplicationDescriptor
    unit_ids: list = field(default_factory=list)
    sealed: bool = True
    completed_with_failures: bool = False
    controller: Optional[MapReduceController] = None
    sla_last: Optional[str] = None
    finished_at: Optional[float] = None


class SchedulerCore:
    """Single-threaded scheduling state machine.

    All methods must be called from the master event loop; network effects
    (dispatches, cancels) are returned to the caller rather than performed.
    """

    def __init__(self, *, directory: NodeDirectory, calendar: ReservationCalendar,
                 ledger: AccountingLedger, event_log: ev.EventLog,
                 catalog: FunctionCatalog, max_attempts: int = DEFAULT_MAX_ATTEMPTS,
                 estimator: Optional[RuntimeEstimator] = None,
                 clock=time.time):
        self.directory = directory
        self.calendar = calendar
        self.ledger = ledger
        self.log = event_log
        self.catalog = catalog
        self.max_attempts = max_attempts
        self.estimator = estimator or RuntimeEstimator()
        self.clock = clock

        self.apps: dict[str, AppRecord] = {}
        self.units: dict[str, WorkUnit] = {}
        self.assignments: dict[str, Assignment] = {}
        self.node_units: dict[str, set] = {}
        self.node_slots: dict[str, set] = {}
        self.pending: deque = deque()
        self.draining: set = set()
        self.idle_since: dict[str, float] = {}

    # -- admission -------------------------------------------------------------

    def _validate_unit(self, unit: WorkUnit) -> None:
        name = unit.function
        if not name:
            raise ValidationFailed(f"unit {unit.unit_id} names no function")
        if name not in self.catalog:
            raise UnknownFunction(f"unit {unit.unit_id} names unknown function {name!r}")
        if not isinstance(unit.args, dict):
            raise ValidationFailed(f"unit {unit.unit_id} args must be an object")

    def _admit_units(self, app: AppRecord, units: list[WorkUnit]) -> list[WorkUnit]:
        admitted = []
        app_id = app.descriptor.app_id
        for unit in units:
            if not unit.unit_id.startswith(app_id + ":"):
                unit.unit_id = f"{app_id}:{unit.unit_id}"
            unit.app_id = app_id
            unit.max_attempts = self.max_attempts
            self._validate_unit(unit)
            if unit.unit_id in self.units:
                raise ValidationFailed(f"duplicate unit id {unit.unit_id}")
            admitted.append(unit)
        for unit in admitted:
            self.units[unit.unit_id] = unit
            app.unit_ids.append(unit.unit_id)
            self.pending.append(unit.unit_id)
            self.log.append(ev.UNIT_STATE, unit_id=unit.unit_id, app_id=app_id,
                            to=UnitState.PENDING.value, attempts=unit.attempts,
                            max_attempts=unit.max_attempts)
        return admitted

    def enqueue_app(self, descriptor: ApplicationDescriptor, units: list[WorkUnit],
                    controller: Optional[MapReduceController] = None,
                    sealed: bool = True) -> AppRecord:
        if descriptor.app_id in self.apps:
            raise DuplicateAppId(descriptor.app_id)
        if descriptor.qos.deadline is not None and descriptor.qos.deadline <= descriptor.submitted_at:
            raise ValidationFailed("deadline must be after submission time")
        if descriptor.model_kind is ModelKind.TASK and not units:
            raise EmptyBag("a task bag must contain at least one unit")
        app = AppRecord(descriptor=descriptor, sealed=sealed, controller=controller)
        # validate before registering anything
        for unit in units:
            unit.app_id = descriptor.app_id
            self._validate_unit(unit)
        self.apps[descriptor.app_id] = app
        self.log.append(ev.APP_SUBMITTED, app_id=descriptor.app_id,
                        owner=descriptor.owner, model=descriptor.model_kind.value,
                        units=len(units), deadline=descriptor.qos.deadline)
        self._admit_units(app, units)
        self._maybe_finalize(app)
        return app

    def add_units(self, app_id: str, units: list[WorkUnit]) -> list[WorkUnit]:
        app = self._require_app(app_id)
        if app.descriptor.model_kind is not ModelKind.THREAD:
            raise ValidationFailed("units can only be added to Thread applications")
        if app.sealed or app.descriptor.state in APP_TERMINAL:
            raise ValidationFailed(f"application {app_id} is closed")
        return self._admit_units(app, units)

    def close_app(self, app_id: str) -> None:
        app = self._require_app(app_id)
        if not app.sealed:
            app.sealed = True
            self._maybe_finalize(app)

    # -- dispatch ----------------------------------------------------------------

    def _free_slots(self, node) -> int:
        return node.capacity - len(self.node_units.get(node.node_id, ()))

    def dispatch_next(self, now: Optional[float] = None) -> list[ScheduleDecision]:
        now = self.clock() if now is None else now
        candidates = [n for n in self.directory.alive() if n.node_id not in self.draining]
        free = {n.node_id: self._free_slots(n) for n in candidates}
        total_free = sum(free.values())
        decisions: list[ScheduleDecision] = []
        if total_free <= 0 or not self.pending:
            return decisions

        leftover: deque = deque()
        while self.pending:
            unit_id = self.pending.popleft()
            unit = self.units.get(unit_id)
            if unit is None or unit.state is not UnitState.PENDING:
                continue  # aborted or already handled entry
            if total_free == 0:
                leftover.append(unit_id)
                continue
            app = self.apps[unit.app_id]
            owner = app.descriptor.owner
            placed = False
            for node in candidates:
                if free[node.node_id] <= 0:
                    continue
                if not unit.required_labels <= node.labels:
                    continue
                holder = self.calendar.active_owner(node.node_id, now)
                if holder is not None and holder != owner:
                    continue
                decisions.append(self._assign(unit, app, node, now))
                free[node.node_id] -= 1
                total_free -= 1
                placed = True
                break
            if not placed:
                leftover.append(unit_id)
        self.pending = leftover
        return decisions

    def _assign(self, unit: WorkUnit, app: AppRecord, node, now: float) -> ScheduleDecision:
        used = self.node_slots.setdefault(node.node_id, set())
        slot = min(i for i in range(node.capacity) if i not in used)
        used.add(slot)
        self.node_units.setdefault(node.node_id, set()).add(unit.unit_id)
        self.idle_since.pop(node.node_id, None)
        attempt = unit.attempts + 1
        self.assignments[unit.unit_id] = Assignment(
            node_id=node.node_id, node_epoch=node.epoch, attempt=attempt,
            slot=slot, dispatched_at=now)
        self._set_unit_state(unit, UnitState.SCHEDULED, node_id=node.node_id)
        unit.assigned_node = node.node_id
        self.log.append(ev.DISPATCH, unit_id=unit.unit_id, app_id=unit.app_id,
                        node_id=node.node_id, slot=slot, attempt=attempt,
                        epoch=node.epoch)
        if app.descriptor.state is AppState.QUEUED:
            self._set_app_state(app, AppState.RUNNING)
        return ScheduleDecision(unit_id=unit.unit_id, app_id=unit.app_id,
                                node_id=node.node_id, node_epoch=node.epoch,
                                slot=slot, attempt=attempt, decided_at=now)

    # -- node reports ------------------------------------------------------------

    def _fenced(self, unit_id: str, node_id: str, node_epoch: int, attempt: int) -> Optional[WorkUnit]:
        """Return the unit iff the report matches its current assignment."""
        unit = self.units.get(unit_id)
        a = self.assignments.get(unit_id)
        if unit is None or a is None or a.node_id != node_id \
                or a.node_epoch != node_epoch or a.attempt != attempt:
            self.log.append(ev.STALE_REPORT, unit_id=unit_id, node_id=node_id,
                            epoch=node_epoch, attempt=attempt)
            return None
        return unit

    def mark_running(self, node_id: str, node_epoch: int, unit_id: str, attempt: int) -> bool:
        """UnitStart report; returns False when the unit should be cancelled."""
        unit = self._fenced(unit_id, node_id, node_epoch, attempt)
        if unit is None:
            return False
        if unit.state is UnitState.SCHEDULED:
            self._set_unit_state(unit, UnitState.RUNNING, node_id=node_id)
            return True
        return unit.state is UnitState.RUNNING

    def _release_assignment(self, unit_id: str) -> Optional[Assignment]:
        a = self.assignments.pop(unit_id, None)
        if a is None:
            return None
        units_on_node = self.node_units.get(a.node_id)
        if units_on_node is not None:
            units_on_node.discard(unit_id)
            if not units_on_node:
                self.idle_since[a.node_id] = self.clock()
        slots = self.node_slots.get(a.node_id)
        if slots is not None:
            slots.discard(a.slot)
        return a

    def on_unit_result(self, node_id: str, node_epoch: int, unit_id: str, attempt: int,
                       status: str, result: Any = None, error: Optional[str] = None,
                       runtime: float = 0.0) -> ResultEffects:
        """Apply a node's terminal report for one attempt."""
        effects = ResultEffects()
        unit = self._fenced(unit_id, node_id, node_epoch, attempt)
        if unit is None:
            return effects
        self._release_assignment(unit_id)
        app = self.apps[unit.app_id]
        self.log.append(ev.UNIT_RESULT, unit_id=unit_id, app_id=unit.app_id,
                        node_id=node_id, status=status, runtime=runtime,
                        attempt=attempt)

        if status == "success":
            if unit.state is UnitState.SCHEDULED:  # start report lost
                self._set_unit_state(unit, UnitState.RUNNING, node_id=node_id)
            self._set_unit_state(unit, UnitState.COMPLETED, node_id=node_id)
            unit.result = result
            self.ledger.accrue(app.descriptor.owner, unit.app_id, node_id,
                               runtime, completed=True)
            effects.accrued = {"user": app.descriptor.owner, "app_id": unit.app_id,
                               "node_id": node_id, "seconds": runtime, "completed": True}
            self.log.append(ev.ACCRUAL, unit_id=unit_id, app_id=unit.app_id,
                            node_id=node_id, user=app.descriptor.owner,
                            seconds=runtime)
            self.estimator.add(runtime)
            if app.controller is not None:
                produced = app.controller.on_unit_completed(unit_id, result or {})
                if produced:
                    effects.new_units = self._admit_units(app, produced)
                if app.controller.sealed and not app.sealed:
                    app.sealed = True
        elif status == "failure":
            if unit.state is UnitState.SCHEDULED:
                self._set_unit_state(unit, UnitState.RUNNING, node_id=node_id)
            unit.attempts += 1
            unit.error = error
            self._set_unit_state(unit, UnitState.FAILED, node_id=node_id)
            if unit.attempts < unit.max_attempts:
                self._set_unit_state(unit, UnitState.PENDING)
                unit.assigned_node = None
                self.pending.append(unit_id)
                self.log.append(ev.REQUEUE, unit_id=unit_id, app_id=unit.app_id,
                                reason="unit_failure", attempts=unit.attempts)
            else:
                if app.controller is not None:
                    # the whole job fails; stop the surviving siblings
                    app.controller.on_unit_failed(unit_id)
                    app.sealed = True
                    effects.cancels = self._abort_siblings(app)
        elif status == "aborted":
            if not unit.is_terminal():
                if unit.state is UnitState.SCHEDULED:
                    self._set_unit_state(unit, UnitState.RUNNING, node_id=node_id)
                self._set_unit_state(unit, UnitState.ABORTED, node_id=node_id)
        else:
            raise ValidationFailed(f"unknown result status {status!r}")

        self._maybe_finalize(app)
        return effects

    def _abort_siblings(self, app: AppRecord) -> list[tuple[str, str]]:
        cancels = []
        for sibling_id in app.unit_ids:
            sibling = self.units[sibling_id]
            if sibling.is_terminal():
                continue
            a = self._release_assignment(sibling_id)
            if a is not None:
                cancels.append((a.node_id, sibling_id))
            self._set_unit_state(sibling, UnitState.ABORTED)
        return cancels

    def on_node_dead(self, node_id: str) -> None:
        """Requeue everything assigned to a dead node; no attempt is charged."""
        for unit_id in sorted(self.node_units.get(node_id, set())):
            unit = self.units[unit_id]
            self.assignments.pop(unit_id, None)
            if unit.state is UnitState.SCHEDULED:
                self._set_unit_state(unit, UnitState.PENDING)
            elif unit.state is UnitState.RUNNING:
                self._set_unit_state(unit, UnitState.FAILED, node_id=node_id)
                self._set_unit_state(unit, UnitState.PENDING)
            else:
                continue
            unit.assigned_node = None
            self.pending.append(unit_id)
            self.log.append(ev.REQUEUE, unit_id=unit_id, app_id=unit.app_id,
                            reason="node_lost", node_id=node_id,
                            attempts=unit.attempts)
        self.node_units.pop(node_id, None)
        self.node_slots.pop(node_id, None)
        self.idle_since.pop(node_id, None)
        self.draining.discard(node_id)

    # -- control -----------------------------------------------------------------

    def cancel_app(self, app_id: str, requester: str, admin: bool = False) -> list[tuple[str, str]]:
        """Abort all non-terminal units; returns (node_id, unit_id) cancels to send."""
        app = self._require_app(app_id)
        if requester != app.descriptor.owner and not admin:
            raise NotAuthorized(f"{requester} may not cancel {app_id}")
        if app.descriptor.state in APP_TERMINAL:
            return []
        cancels = []
        for unit_id in app.unit_ids:
            unit = self.units[unit_id]
            if unit.is_terminal():
                continue
            a = self._release_assignment(unit_id)
            if a is not None:
                cancels.append((a.node_id, unit_id))
            self._set_unit_state(unit, UnitState.ABORTED)
        app.sealed = True
        self._set_app_state(app, AppState.CANCELLED)
        app.finished_at = self.clock()
        return cancels

    def abort_unit(self, unit_id: str, requester: str, admin: bool = False) -> Optional[tuple[str, str]]:
        unit = self.units.get(unit_id)
        if unit is None:
            raise UnknownUnit(unit_id)
        app = self.apps[unit.app_id]
        if requester != app.descriptor.owner and not admin:
            raise NotAuthorized(f"{requester} may not abort {unit_id}")
        if unit.is_terminal():
            return None
        a = self._release_assignment(unit_id)
        self._set_unit_state(unit, UnitState.ABORTED)
        self._maybe_finalize(app)
        return (a.node_id, unit_id) if a is not None else None

    def drain_node(self, node_id: str) -> None:
        self.directory.require(node_id)
        self.draining.add(node_id)
        self.log.append(ev.DRAIN, node_id=node_id)

    def drained_and_idle(self) -> list[str]:
        return sorted(n for n in self.draining if not self.node_units.get(n))

    def undrain(self, node_id: str) -> None:
        self.draining.discard(node_id)

    # -- SLA -----------------------------------------------------------------------

    def check_sla(self, now: Optional[float] = None) -> list[SlaEvent]:
        now = self.clock() if now is None else now
        total_slots = sum(n.capacity for n in self.directory.alive())
        mean_runtime = self.estimator.mean()
        out = []
        for app in self.apps.values():
            deadline = app.descriptor.qos.deadline
            if deadline is None or app.descriptor.state in APP_TERMINAL:
                continue
            if now > deadline:
                kind = "Violated"
            else:
                remaining = sum(
                    1 for uid in app.unit_ids
                    if not self.units[uid].is_terminal())
                projected = remaining * mean_runtime / max(1, total_slots)
                kind = "AtRisk" if now + projected > deadline else None
            if kind is not None:
                out.append(SlaEvent(app_id=app.descriptor.app_id, kind=kind, at=now))
            if kind != app.sla_last:
                if kind is not None:
                    self.log.append(ev.SLA_EVENT, app_id=app.descriptor.app_id,
                                    sla=kind, deadline=deadline)
                app.sla_last = kind
        return out

    # -- queries ---------------------------------------------------------------------

    def _require_app(self, app_id: str) -> AppRecord:
        app = self.apps.get(app_id)
        if app is None:
            raise UnknownApp(app_id)
        return app

    def counters(self, app: AppRecord) -> dict:
        counts = {state.value.lower(): 0 for state in UnitState}
        for unit_id in app.unit_ids:
            counts[self.units[unit_id].state.value.lower()] += 1
        return counts

    def status_doc(self, app_id: str, include_units: bool = True) -> dict:
        app = self._require_app(app_id)
        d = app.descriptor
        doc = {
            "app_id": d.app_id,
            "name": d.name,
            "owner": d.owner,
            "model_kind": d.model_kind.value,
            "state": d.state.value,
            "submitted_at": d.submitted_at,
            "finished_at": app.finished_at,
            "qos": d.qos.to_doc(),
            "counters": self.counters(app),
            "total_units": len(app.unit_ids),
            "sealed": app.sealed,
            "completed_with_failures": app.completed_with_failures,
            "sla": app.sla_last,
        }
        if app.controller is not None:
            doc["mapreduce"] = {"phase": app.controller.phase,
                                "failed_reason": app.controller.failed_reason,
                                "emitted_pairs": app.controller.emitted_pairs}
        if include_units:
            doc["units"] = [self.units[uid].to_doc() for uid in app.unit_ids]
        return doc

    def list_apps(self, owner: Optional[str] = None) -> list[dict]:
        out = []
        for app_id in sorted(self.apps):
            app = self.apps[app_id]
            if owner is not None and app.descriptor.owner != owner:
                continue
            out.append(self.status_doc(app_id, include_units=False))
        return out

    def results_doc(self, app_id: str) -> dict:
        app = self._require_app(app_id)
        if app.descriptor.state not in APP_TERMINAL:
            raise NotTerminal(f"{app_id} is {app.descriptor.state.value}")
        results = []
        failures = []
        for unit_id in sorted(app.unit_ids):
            unit = self.units[unit_id]
            if unit.state is UnitState.COMPLETED:
                results.append({"unit_id": unit_id, "value": unit.result})
            elif unit.state is UnitState.FAILED:
                failures.append({"unit_id": unit_id, "error": unit.error,
                                 "attempts": unit.attempts})
        doc = {"app_id": app_id, "state": app.descriptor.state.value,
               "results": results, "failures": failures,
               "completed_with_failures": app.completed_with_failures}
        if app.controller is not None:
            doc["outputs"] = app.controller.output_refs()
            doc["failed_reason"] = app.controller.failed_reason
        return doc

    def unit_doc(self, unit_id: str) -> dict:
        unit = self.units.get(unit_id)
        if unit is None:
            raise UnknownUnit(unit_id)
        return unit.to_doc()

    def queue_stats(self) -> dict:
        alive = self.directory.alive()
        dispatchable = [n for n in alive if n.node_id not in self.draining]
        total_slots = sum(n.capacity for n in dispatchable)
        busy = sum(len(self.node_units.get(n.node_id, ())) for n in dispatchable)
        pending_units = sum(1 for u in self.units.values() if u.state is UnitState.PENDING)
        return {"pending_units": pending_units, "total_slots": total_slots,
                "busy_slots": busy, "free_slots": max(0, total_slots - busy),
                "apps": len(self.apps)}

    # -- internal ----------------------------------------------------------------------

    def _set_unit_state(self, unit: WorkUnit, new: UnitState, node_id: Optional[str] = None) -> None:
        old = unit.state
        unit.transition(new)
        self.log.append(ev.UNIT_STATE, unit_id=unit.unit_id, app_id=unit.app_id,
                        node_id=node_id, **{"from": old.value}, to=new.value,
                        attempts=unit.attempts, max_attempts=unit.max_attempts)

    def _set_app_state(self, app: AppRecord, new: AppState) -> None:
        old = app.descriptor.state
        if old is new:
            return
        app.descriptor.state = new
        self.log.append(ev.APP_STATE, app_id=app.descriptor.app_id,
                        **{"from": old.value}, to=new.value,
                        completed_with_failures=app.completed_with_failures)

    def _maybe_finalize(self, app: AppRecord) -> None:
        d = app.descriptor
        if d.state in APP_TERMINAL or not app.sealed:
            return
        if any(not self.units[uid].is_terminal() for uid in app.unit_ids):
            return
        failed_units = [uid for uid in app.unit_ids
                        if self.units[uid].state is UnitState.FAILED]
        if app.controller is not None and app.controller.phase == "failed":
            final = AppState.FAILED
        elif failed_units and d.model_kind is not ModelKind.TASK:
            final = AppState.FAILED
        else:
            final = AppState.COMPLETED
            if failed_units:
                app.completed_with_failures = True
        app.finished_at = self.clock()
        self._set_app_state(app, final)
