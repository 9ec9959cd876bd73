"""Advance reservations: exclusive half-open time windows on whole nodes.

A grant succeeds iff the requested [start, end) window overlaps no existing
slot on that node; adjacency at the boundary is allowed. The scheduler's
placement filter asks who owns a node at dispatch time and refuses foreign
dispatches inside a reserved window.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

from ..errors import InvalidWindow, Overlap

_counter = itertools.count(1)


@dataclass(frozen=True)
class ReservationSlot:
    reservation_id: str
    node_id: str
    owner: str
    start: float
    end: float

    def contains(self, t: float) -> bool:
        return self.start <= t < self.end

    def to_doc(self) -> dict:
        return {"reservation_id": self.reservation_id, "node_id": self.node_id,
                "owner": self.owner, "start": self.start, "end": self.end}

    @classmethod
    def from_doc(cls, doc: dict) -> "ReservationSlot":
        return cls(reservation_id=doc["reservation_id"], node_id=doc["node_id"],
                   owner=doc["owner"], start=float(doc["start"]), end=float(doc["end"]))


class ReservationCalendar:
    def __init__(self):
        self._by_node: dict[str, list[ReservationSlot]] = {}

    def request(self, node_id: str, owner: str, start: float, end: float,
                reservation_id: Optional[str] = None) -> ReservationSlot:
        if not (start < end):
            raise InvalidWindow(f"start {start} must precede end {end}")
        slots = self._by_node.setdefault(node_id, [])
        for existing in slots:
            if existing.start < end and start < existing.end:
                raise Overlap(
                    f"window [{start}, {end}) overlaps reservation {existing.reservation_id}",
                    conflicting=existing.reservation_id)
        slot = ReservationSlot(
            reservation_id=reservation_id or f"rsv-{next(_counter)}",
            node_id=node_id, owner=owner, start=start, end=end)
        slots.append(slot)
        slots.sort(key=lambda s: s.start)
        return slot

    def active_owner(self, node_id: str, t: float) -> Optional[str]:
        """Owner of the slot containing ``t`` on this node, else None."""
        for slot in self._by_node.get(node_id, []):
            if slot.contains(t):
                return slot.owner
        return None

    def slots(self, node_id: Optional[str] = None) -> list[ReservationSlot]:
        if node_id is not None:
            return list(self._by_node.get(node_id, []))
        out = []
        for nid in sorted(self._by_node):
            out.extend(self._by_node[nid])
        return out

    def restore(self, slot: ReservationSlot) -> None:
        """Journal replay path; trusts the slot was checked when granted."""
        self._by_node.setdefault(slot.node_id, []).append(slot)
        self._by_node[slot.node_id].sort(key=lambda s: s.start)
