"""Fabric services: node membership directory, heartbeat-driven failure
detection, and performance sample aggregation.

The directory is centralized on the master. A node that heartbeats every
period stays Alive; after more than 2 missed periods it turns Suspect, after
more than 4 it is Dead and its work is requeued by the scheduler. Dead and
Released are terminal within an epoch; a re-register starts a new epoch.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional

from .errors import InvalidDescriptor, UnknownNode


class NodeState(str, enum.Enum):
    ALIVE = "Alive"
    SUSPECT = "Suspect"
    DEAD = "Dead"
    RELEASED = "Released"


# Legal within-epoch transitions. Re-registration (any state -> Alive with
# epoch + 1) is an epoch boundary, not a transition of this relation.
NODE_TRANSITIONS = {
    NodeState.ALIVE: {NodeState.SUSPECT, NodeState.RELEASED},
    NodeState.SUSPECT: {NodeState.ALIVE, NodeState.DEAD},
    NodeState.DEAD: set(),
    NodeState.RELEASED: set(),
}


@dataclass
class NodeDescriptor:
    node_id: str
    address: str
    capacity: int
    labels: frozenset = frozenset()
    state: NodeState = NodeState.ALIVE
    epoch: int = 1
    last_seen: float = 0.0
    pool_id: Optional[str] = None

    def to_doc(self) -> dict:
        return {
            "node_id": self.node_id,
            "address": self.address,
            "capacity": self.capacity,
            "labels": sorted(self.labels),
            "state": self.state.value,
            "epoch": self.epoch,
            "last_seen": self.last_seen,
            "pool_id": self.pool_id,
        }


@dataclass
class NodeMetrics:
    node_id: str
    window: float
    cpu_busy_fraction: float
    slots_busy: int
    units_completed: int  # completions within this window
    ts: float = 0.0

    def to_doc(self) -> dict:
        return {
            "node_id": self.node_id,
            "window": self.window,
            "cpu_busy_fraction": self.cpu_busy_fraction,
            "slots_busy": self.slots_busy,
            "units_completed": self.units_completed,
            "ts": self.ts,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "NodeMetrics":
        return cls(node_id=doc["node_id"], window=float(doc["window"]),
                   cpu_busy_fraction=float(doc["cpu_busy_fraction"]),
                   slots_busy=int(doc["slots_busy"]),
                   units_completed=int(doc["units_completed"]),
                   ts=float(doc.get("ts", 0.0)))


# observer(node_id, old_state_or_None, new_state, epoch) is called on every
# state change and on registration; the master wires it to the event log.
Observer = Callable[[str, Optional[NodeState], NodeState, int], None]


class NodeDirectory:
    def __init__(self, observer: Optional[Observer] = None, metrics_window: int = 120):
        self._nodes: dict[str, NodeDescriptor] = {}
        self._metrics: dict[str, list[NodeMetrics]] = {}
        self._observer = observer
        self._metrics_window = metrics_window

    def _notify(self, node_id: str, old: Optional[NodeState], new: NodeState, epoch: int):
        if self._observer is not None:
            self._observer(node_id, old, new, epoch)

    def register(self, desc: NodeDescriptor, now: float) -> NodeDescriptor:
        """Admit a node, or re-admit it with an incremented epoch."""
        if not desc.node_id:
            raise InvalidDescriptor("node_id must be nonempty")
        if desc.capacity < 1:
            raise InvalidDescriptor(f"capacity must be >= 1, got {desc.capacity}")
        prev = self._nodes.get(desc.node_id)
        epoch = 1 if prev is None else prev.epoch + 1
        entry = replace(desc, state=NodeState.ALIVE, epoch=epoch, last_seen=now)
        self._nodes[desc.node_id] = entry
        self._metrics.setdefault(desc.node_id, [])
        self._notify(desc.node_id, None, NodeState.ALIVE, epoch)
        return entry

    def _transition(self, node: NodeDescriptor, new: NodeState) -> NodeDescriptor:
        if new not in NODE_TRANSITIONS[node.state]:
            raise InvalidDescriptor(
                f"illegal node transition {node.state.value} -> {new.value} for {node.node_id}")
        old = node.state
        node = replace(node, state=new)
        self._nodes[node.node_id] = node
        self._notify(node.node_id, old, new, node.epoch)
        return node

    def process_heartbeat(self, node_id: str, metrics: Optional[NodeMetrics], now: float) -> NodeDescriptor:
        node = self._nodes.get(node_id)
        if node is None or node.state is NodeState.RELEASED:
            raise UnknownNode(f"heartbeat from unknown or released node {node_id}")
        if node.state is NodeState.DEAD:
            # Dead never reverts within an epoch; the node must re-register.
            raise UnknownNode(f"heartbeat from dead node {node_id} (epoch {node.epoch})")
        if node.state is NodeState.SUSPECT:
            node = self._transition(node, NodeState.ALIVE)
        # last_seen is monotone within an epoch
        node = replace(node, last_seen=max(node.last_seen, now))
        self._nodes[node_id] = node
        if metrics is not None:
            samples = self._metrics.setdefault(node_id, [])
            samples.append(metrics)
            del samples[:-self._metrics_window]
        return node

    def sweep_failures(self, now: float, period: float) -> list[str]:
        """Apply the missed-heartbeat thresholds; returns newly dead node ids."""
        if period <= 0:
            raise ValueError("period must be > 0")
        dead = []
        for node_id in sorted(self._nodes):
            node = self._nodes[node_id]
            if node.state not in (NodeState.ALIVE, NodeState.SUSPECT):
                continue
            silence = now - node.last_seen
            if silence > 4 * period:
                if node.state is NodeState.ALIVE:
                    node = self._transition(node, NodeState.SUSPECT)
                self._transition(node, NodeState.DEAD)
                dead.append(node_id)
            elif silence > 2 * period and node.state is NodeState.ALIVE:
                self._transition(node, NodeState.SUSPECT)
        return dead

    def release(self, node_id: str) -> NodeDescriptor:
        node = self._nodes.get(node_id)
        if node is None:
            raise UnknownNode(node_id)
        return self._transition(node, NodeState.RELEASED)

    def get(self, node_id: str) -> Optional[NodeDescriptor]:
        return self._nodes.get(node_id)

    def require(self, node_id: str) -> NodeDescriptor:
        node = self._nodes.get(node_id)
        if node is None:
            raise UnknownNode(node_id)
        return node

    def snapshot(self, states: Optional[Iterable[NodeState]] = None,
                 label: Optional[str] = None) -> list[NodeDescriptor]:
        """Point-in-time listing, node_id ascending."""
        wanted = set(states) if states is not None else None
        out = []
        for node_id in sorted(self._nodes):
            node = self._nodes[node_id]
            if wanted is not None and node.state not in wanted:
                continue
            if label is not None and label not in node.labels:
                continue
            out.append(node)
        return out

    def alive(self) -> list[NodeDescriptor]:
        return self.snapshot(states=[NodeState.ALIVE])

    def metrics_samples(self, node_id: Optional[str] = None) -> list[NodeMetrics]:
        if node_id is not None:
            return list(self._metrics.get(node_id, []))
        out = []
        for nid in sorted(self._metrics):
            out.extend(self._metrics[nid])
        return out

    def latest_metrics(self, node_id: str) -> Optional[NodeMetrics]:
        samples = self._metrics.get(node_id)
        return samples[-1] if samples else None


@dataclass
class UsageSummary:
    per_node: dict
    totals: dict

    def to_doc(self) -> dict:
        return {"per_node": self.per_node, "totals": self.totals}


def aggregate_metrics(samples: Iterable[NodeMetrics], window: Optional[tuple[float, float]] = None) -> UsageSummary:
    """Per-node means plus cloud totals over the given [start, end) window.

    Totals are sums of the per-node values; an empty sample set yields zero
    totals.
    """
    by_node: dict[str, list[NodeMetrics]] = {}
    for s in samples:
        if window is not None and not (window[0] <= s.ts < window[1]):
            continue
        by_node.setdefault(s.node_id, []).append(s)

    per_node = {}
    total_units = 0
    for node_id in sorted(by_node):
        node_samples = by_node[node_id]
        n = len(node_samples)
        per_node[node_id] = {
            "samples": n,
            "mean_cpu_busy_fraction": sum(s.cpu_busy_fraction for s in node_samples) / n,
            "mean_slots_busy": sum(s.slots_busy for s in node_samples) / n,
            "units_completed": sum(s.units_completed for s in node_samples),
        }
        total_units += per_node[node_id]["units_completed"]
    return UsageSummary(
        per_node=per_node,
        totals={"units_completed": total_units, "nodes": len(per_node)},
    )
