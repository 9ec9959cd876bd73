"""Elastic provisioning: grow/shrink the worker set from resource pools.

Policy: desired slots = ceil(pending units / target_pending_per_slot); the
shortfall is acquired from spawnable pools cheapest-first, capped by each
pool's headroom. Any SLA AtRisk/Violated signal forces at least one
acquisition when headroom exists. Public-pool nodes idle longer than the
cooldown are released; local static nodes are never released by policy.

The mock public pool spawns real worker processes after a simulated
acquisition delay so elasticity runs exercise the true registration path.
"""

from __future__ import annotations

import enum
import math
import subprocess
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import NotPoolMember, PoolExhausted, SpawnFailure


class PoolKind(str, enum.Enum):
    LOCAL_STATIC = "LocalStatic"
    MOCK_PUBLIC = "MockPublic"


@dataclass
class PoolConfig:
    pool_id: str
    kind: PoolKind
    max_nodes: int
    cost_rate: float = 0.0  # per node-second
    spinup_delay: float = 2.0
    node_capacity: int = 1
    node_labels: tuple = ()


@dataclass
class ProvisioningPolicy:
    target_pending_per_slot: int = 4
    cooldown: float = 30.0
    enabled: bool = True

    def __post_init__(self):
        if self.target_pending_per_slot <= 0:
            raise ValueError("target_pending_per_slot must be > 0")
        if self.cooldown < 0:
            raise ValueError("cooldown must be >= 0")


@dataclass
class PoolSnapshot:
    pool_id: str
    kind: PoolKind
    max_nodes: int
    node_capacity: int
    cost_rate: float
    active: int
    pending_spinup: int

    @property
    def headroom(self) -> int:
        return max(0, self.max_nodes - self.active - self.pending_spinup)


@dataclass
class ProvisionPlan:
    acquire: dict = field(default_factory=dict)  # pool_id -> node count
    release: list = field(default_factory=list)  # node ids

    @property
    def is_empty(self) -> bool:
        return not self.acquire and not self.release


def evaluate_policy(pending_units: int, current_slots: int,
                    pools: list[PoolSnapshot], policy: ProvisioningPolicy,
                    sla_events: list, idle_public_nodes: list[tuple[str, float]],
                    now: float) -> ProvisionPlan:
    """Pure policy evaluation.

    ``current_slots`` must already count slots still spinning up, so repeated
    evaluations do not over-acquire. ``idle_public_nodes`` is
    [(node_id, idle_since)] for releasable pool nodes with nothing assigned.
    """
    plan = ProvisionPlan()
    if not policy.enabled:
        return plan

    desired_slots = math.ceil(pending_units / policy.target_pending_per_slot)
    shortfall = max(0, desired_slots - current_slots)
    spawnable = sorted(
        (p for p in pools if p.kind is PoolKind.MOCK_PUBLIC),
        key=lambda p: (p.cost_rate, p.pool_id))
    if shortfall == 0 and sla_events and any(p.headroom > 0 for p in spawnable):
        shortfall = 1  # SLA pressure overrides the queue-length threshold
    for pool in spawnable:
        if shortfall <= 0:
            break
        take = min(pool.headroom, math.ceil(shortfall / pool.node_capacity))
        if take > 0:
            plan.acquire[pool.pool_id] = take
            shortfall -= take * pool.node_capacity

    for node_id, idle_since in sorted(idle_public_nodes):
        if now - idle_since > policy.cooldown:
            plan.release.append(node_id)
    return plan


@dataclass
class SpinupTicket:
    node_id: str
    pool_id: str
    requested_at: float
    ready_at: float


@dataclass
class ManagedPool:
    config: PoolConfig
    active: dict = field(default_factory=dict)  # node_id -> Popen | None
    spinups: list = field(default_factory=list)  # SpinupTickets not yet spawned
    counter: int = 0

    def snapshot(self) -> PoolSnapshot:
        return PoolSnapshot(
            pool_id=self.config.pool_id, kind=self.config.kind,
            max_nodes=self.config.max_nodes,
            node_capacity=self.config.node_capacity,
            cost_rate=self.config.cost_rate,
            active=len(self.active), pending_spinup=len(self.spinups))


class PoolManager:
    """Owns pool state and worker subprocess handles.

    ``acquire`` only books spinup tickets; the master tick asks for due
    tickets and performs the actual process spawn outside the event loop.
    """

    def __init__(self, configs: list[PoolConfig],
                 command_builder: Optional[Callable[[str, PoolConfig], list]] = None,
                 clock=time.time):
        self.pools: dict[str, ManagedPool] = {
            c.pool_id: ManagedPool(config=c) for c in configs}
        self.command_builder = command_builder
        self.clock = clock
        self.node_pool: dict[str, str] = {}

    def require(self, pool_id: str) -> ManagedPool:
        pool = self.pools.get(pool_id)
        if pool is None:
            raise NotPoolMember(f"no pool {pool_id}")
        return pool

    def acquire(self, pool_id: str, n: int, now: Optional[float] = None) -> list[str]:
        """Book ``n`` spinup tickets; returns the assigned node ids."""
        pool = self.require(pool_id)
        if n == 0:
            return []
        now = self.clock() if now is None else now
        if pool.config.kind is not PoolKind.MOCK_PUBLIC:
            raise PoolExhausted(f"pool {pool_id} is not spawnable")
        if len(pool.active) + len(pool.spinups) + n > pool.config.max_nodes:
            raise PoolExhausted(
                f"pool {pool_id} headroom exhausted "
                f"({len(pool.active)} active, {len(pool.spinups)} pending, max {pool.config.max_nodes})")
        ids = []
        for _ in range(n):
            pool.counter += 1
            node_id = f"{pool_id}-{pool.counter:03d}"
            pool.spinups.append(SpinupTicket(
                node_id=node_id, pool_id=pool_id,
                requested_at=now, ready_at=now + pool.config.spinup_delay))
            self.node_pool[node_id] = pool_id
            ids.append(node_id)
        return ids

    def due_spinups(self, now: Optional[float] = None) -> list[SpinupTicket]:
        """Pop tickets whose simulated acquisition latency has elapsed."""
        now = self.clock() if now is None else now
        due = []
        for pool in self.pools.values():
            still = []
            for ticket in pool.spinups:
                (due if ticket.ready_at <= now else still).append(ticket)
            pool.spinups = still
        return due

    def spawn(self, ticket: SpinupTicket) -> None:
        """Start the worker process for a due ticket."""
        pool = self.require(ticket.pool_id)
        argv = self.command_builder(ticket.node_id, pool.config)
        try:
            proc = subprocess.Popen(argv, stdout=subprocess.DEVNULL,
                                    stderr=subprocess.DEVNULL,
                                    start_new_session=True)
        except OSError as exc:
            self.node_pool.pop(ticket.node_id, None)
            raise SpawnFailure(f"could not start worker {ticket.node_id}: {exc}") from exc
        pool.active[ticket.node_id] = proc

    def adopt(self, node_id: str, pool_id: str) -> None:
        """Track an externally started node (local static registration)."""
        pool = self.pools.get(pool_id)
        if pool is not None and node_id not in pool.active:
            pool.active[node_id] = None
            self.node_pool[node_id] = pool_id

    def pool_of(self, node_id: str) -> Optional[str]:
        return self.node_pool.get(node_id)

    def releasable(self, node_id: str) -> bool:
        pool_id = self.node_pool.get(node_id)
        if pool_id is None:
            return False
        return self.pools[pool_id].config.kind is PoolKind.MOCK_PUBLIC

    def stop_node(self, node_id: str) -> None:
        """Terminate the worker process and drop pool membership."""
        pool_id = self.node_pool.pop(node_id, None)
        if pool_id is None:
            raise NotPoolMember(f"node {node_id} belongs to no pool")
        pool = self.pools[pool_id]
        proc = pool.active.pop(node_id, None)
        if proc is not None:
            proc.terminate()
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()

    def node_died(self, node_id: str) -> None:
        pool_id = self.node_pool.pop(node_id, None)
        if pool_id is None:
            return
        proc = self.pools[pool_id].active.pop(node_id, None)
        if proc is not None and proc.poll() is None:
            proc.kill()
            proc.wait()

    def snapshots(self) -> list[PoolSnapshot]:
        return [self.pools[pid].snapshot() for pid in sorted(self.pools)]

    def shutdown(self) -> None:
        for pool in self.pools.values():
            for node_id in list(pool.active):
                proc = pool.active.pop(node_id)
                if proc is not None:
                    proc.terminate()
        for pool in self.pools.values():
            pool.spinups.clear()
