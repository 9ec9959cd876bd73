"""WorkUnit: the schedulable atom shared by every programming model.

State machine:

    Pending -> Scheduled -> Running -> Completed
                                    -> Failed
    Failed -> Pending            (retry, while attempts < max_attempts)
    Scheduled -> Pending         (undispatch: assigned node lost before start)
    any non-terminal -> Aborted

``attempts`` counts unit-level failures; node loss requeues a unit without
charging an attempt.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Optional

from ..errors import IllegalTransition

DEFAULT_MAX_ATTEMPTS = 3


class UnitKind(str, enum.Enum):
    TASK = "Task"
    THREAD = "Thread"
    MAP = "Map"
    REDUCE = "Reduce"


class UnitState(str, enum.Enum):
    PENDING = "Pending"
    SCHEDULED = "Scheduled"
    RUNNING = "Running"
    COMPLETED = "Completed"
    FAILED = "Failed"
    ABORTED = "Aborted"


TERMINAL_STATES = {UnitState.COMPLETED, UnitState.ABORTED}
# Failed is terminal only once attempts reach max_attempts.

UNIT_TRANSITIONS = {
    UnitState.PENDING: {UnitState.SCHEDULED, UnitState.ABORTED},
    UnitState.SCHEDULED: {UnitState.RUNNING, UnitState.PENDING, UnitState.ABORTED},
    UnitState.RUNNING: {UnitState.COMPLETED, UnitState.FAILED, UnitState.ABORTED},
    UnitState.FAILED: {UnitState.PENDING, UnitState.ABORTED},
    UnitState.COMPLETED: set(),
    UnitState.ABORTED: set(),
}


def check_transition(old: UnitState, new: UnitState, attempts: int,
                     max_attempts: int = DEFAULT_MAX_ATTEMPTS) -> None:
    if new not in UNIT_TRANSITIONS[old]:
        raise IllegalTransition(f"{old.value} -> {new.value}")
    if old is UnitState.FAILED and new is UnitState.PENDING and attempts >= max_attempts:
        raise IllegalTransition(
            f"Failed -> Pending with attempts {attempts} >= max {max_attempts}")


@dataclass
class WorkUnit:
    unit_id: str
    app_id: str
    kind: UnitKind
    payload: dict  # {"function": catalog name, "args": {...}}
    inputs: list = field(default_factory=list)  # FileRef docs
    state: UnitState = UnitState.PENDING
    attempts: int = 0
    max_attempts: int = DEFAULT_MAX_ATTEMPTS
    assigned_node: Optional[str] = None
    result: Any = None  # present iff Completed
    error: Optional[str] = None
    required_labels: frozenset = frozenset()

    def is_terminal(self) -> bool:
        if self.state in TERMINAL_STATES:
            return True
        return self.state is UnitState.FAILED and self.attempts >= self.max_attempts

    def transition(self, new: UnitState) -> None:
        check_transition(self.state, new, self.attempts, self.max_attempts)
        self.state = new

    @property
    def function(self) -> str:
        return self.payload.get("function", "")

    @property
    def args(self) -> dict:
        return self.payload.get("args", {})

    def to_doc(self, include_result: bool = True) -> dict:
        doc = {
            "unit_id": self.unit_id,
            "app_id": self.app_id,
            "kind": self.kind.value,
            "payload": self.payload,
            "inputs": list(self.inputs),
            "state": self.state.value,
            "attempts": self.attempts,
            "max_attempts": self.max_attempts,
            "assigned_node": self.assigned_node,
            "required_labels": sorted(self.required_labels),
            "error": self.error,
        }
        if include_result:
            doc["result"] = self.result
        return doc

    @classmethod
    def from_doc(cls, doc: dict) -> "WorkUnit":
        return cls(
            unit_id=doc["unit_id"],
            app_id=doc.get("app_id", ""),
            kind=UnitKind(doc.get("kind", "Task")),
            payload=doc.get("payload", {}),
            inputs=list(doc.get("inputs", [])),
            state=UnitState(doc.get("state", "Pending")),
            attempts=int(doc.get("attempts", 0)),
            max_attempts=int(doc.get("max_attempts", DEFAULT_MAX_ATTEMPTS)),
            assigned_node=doc.get("assigned_node"),
            result=doc.get("result"),
            error=doc.get("error"),
            required_labels=frozenset(doc.get("required_labels", [])),
        )
