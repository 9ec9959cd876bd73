import pytest

from minicloud.errors import PoolExhausted
from minicloud.provisioning import (
    PoolConfig,
    PoolKind,
    PoolManager,
    PoolSnapshot,
    ProvisioningPolicy,
    evaluate_policy,
)
from minicloud.scheduler import SlaEvent


def snap(pool_id="mock", kind=PoolKind.MOCK_PUBLIC, max_nodes=10, cap=1,
         cost=0.01, active=0, pending=0):
    return PoolSnapshot(pool_id=pool_id, kind=kind, max_nodes=max_nodes,
                        node_capacity=cap, cost_rate=cost, active=active,
                        pending_spinup=pending)


def policy(**kw):
    defaults = dict(target_pending_per_slot=4, cooldown=30.0, enabled=True)
    defaults.update(kw)
    return ProvisioningPolicy(**defaults)


class TestEvaluatePolicy:
    def test_shortfall_arithmetic(self):
        """50 pending at 4/slot with 8 current slots: desired 13, acquire 5."""
        plan = evaluate_policy(pending_units=50, current_slots=8, pools=[snap()],
                               policy=policy(), sla_events=[], idle_public_nodes=[],
                               now=100.0)
        assert plan.acquire == {"mock": 5}

    def test_idle_past_cooldown_released(self):
        plan = evaluate_policy(pending_units=0, current_slots=2, pools=[snap(active=2)],
                               policy=policy(cooldown=30.0), sla_events=[],
                               idle_public_nodes=[("mock-001", 50.0), ("mock-002", 60.0)],
                               now=100.0)
        assert plan.release == ["mock-001", "mock-002"]
        assert plan.acquire == {}

    def test_idle_within_cooldown_kept(self):
        plan = evaluate_policy(pending_units=0, current_slots=2, pools=[snap(active=1)],
                               policy=policy(cooldown=30.0), sla_events=[],
                               idle_public_nodes=[("mock-001", 90.0)], now=100.0)
        assert plan.release == []

    def test_no_headroom_caps_acquisition(self):
        pool = snap(max_nodes=3, active=3)
        plan = evaluate_policy(pending_units=100, current_slots=3, pools=[pool],
                               policy=policy(), sla_events=[
                                   SlaEvent(app_id="a", kind="AtRisk", at=0.0)],
                               idle_public_nodes=[], now=0.0)
        assert plan.acquire == {}

    def test_sla_pressure_forces_one_node(self):
        plan = evaluate_policy(pending_units=1, current_slots=8, pools=[snap()],
                               policy=policy(), sla_events=[
                                   SlaEvent(app_id="a", kind="Violated", at=0.0)],
                               idle_public_nodes=[], now=0.0)
        assert plan.acquire == {"mock": 1}

    def test_disabled_policy_does_nothing(self):
        plan = evaluate_policy(pending_units=500, current_slots=0, pools=[snap()],
                               policy=policy(enabled=False),
                               sla_events=[], idle_public_nodes=[("m", 0.0)], now=100.0)
        assert plan.is_empty

    def test_cheapest_pool_first(self):
        cheap = snap(pool_id="cheap", cost=0.001, max_nodes=2)
        pricey = snap(pool_id="pricey", cost=0.1, max_nodes=10)
        plan = evaluate_policy(pending_units=40, current_slots=0, pools=[pricey, cheap],
                               policy=policy(), sla_events=[], idle_public_nodes=[],
                               now=0.0)
        assert plan.acquire == {"cheap": 2, "pricey": 8}

    def test_pending_spinups_count_as_current(self):
        # 16 pending / 4 = 4 desired slots, 4 already spinning up: no new nodes
        plan = evaluate_policy(pending_units=16, current_slots=4, pools=[snap(pending=4)],
                               policy=policy(), sla_events=[], idle_public_nodes=[],
                               now=0.0)
        assert plan.acquire == {}

    def test_node_capacity_reduces_node_count(self):
        pool = snap(cap=4)
        plan = evaluate_policy(pending_units=64, current_slots=0, pools=[pool],
                               policy=policy(), sla_events=[], idle_public_nodes=[],
                               now=0.0)
        assert plan.acquire == {"mock": 4}  # 16 slots / 4 per node

    def test_local_static_never_released_or_acquired(self):
        static = snap(pool_id="static", kind=PoolKind.LOCAL_STATIC, active=2)
        plan = evaluate_policy(pending_units=100, current_slots=2, pools=[static],
                               policy=policy(), sla_events=[], idle_public_nodes=[],
                               now=0.0)
        assert plan.acquire == {}


class ManualClock:
    def __init__(self):
        self.now = 0.0

    def __call__(self):
        return self.now


class TestPoolManager:
    def manager(self, max_nodes=5, delay=2.0):
        self.clock = ManualClock()
        config = PoolConfig(pool_id="mock", kind=PoolKind.MOCK_PUBLIC,
                            max_nodes=max_nodes, spinup_delay=delay)
        return PoolManager([config], command_builder=lambda n, c: ["true"],
                           clock=self.clock)

    def test_acquire_books_tickets(self):
        pm = self.manager()
        ids = pm.acquire("mock", 3)
        assert len(ids) == 3
        assert pm.snapshots()[0].pending_spinup == 3

    def test_acquire_zero_is_noop(self):
        pm = self.manager()
        assert pm.acquire("mock", 0) == []

    def test_acquire_beyond_max_rejected(self):
        pm = self.manager(max_nodes=2)
        pm.acquire("mock", 2)
        with pytest.raises(PoolExhausted):
            pm.acquire("mock", 1)

    def test_spinup_delay_respected(self):
        pm = self.manager(delay=2.0)
        pm.acquire("mock", 2)
        self.clock.now = 1.0
        assert pm.due_spinups() == []
        self.clock.now = 2.0
        due = pm.due_spinups()
        assert len(due) == 2
        assert pm.due_spinups() == []  # popped exactly once

    def test_releasable_only_for_public_pools(self):
        static_config = PoolConfig(pool_id="static", kind=PoolKind.LOCAL_STATIC,
                                   max_nodes=4)
        pm = PoolManager([static_config], clock=ManualClock())
        pm.adopt("s1", "static")
        assert not pm.releasable("s1")
        assert not pm.releasable("unknown")
