"""Scheduler state machine exercised without any live network or workers."""

import pytest

from minicloud import events as ev
from minicloud.errors import (
    DuplicateAppId,
    EmptyBag,
    NotAuthorized,
    NotTerminal,
    UnknownFunction,
    ValidationFailed,
)
from minicloud.events import EventLog, audit_event_log
from minicloud.fabric import NodeDescriptor, NodeDirectory, NodeState
from minicloud.foundation.accounting import AccountingLedger
from minicloud.foundation.reservation import ReservationCalendar
from minicloud.models.catalog import builtin_catalog
from minicloud.models.units import UnitKind, UnitState, WorkUnit
from minicloud.scheduler import (
    ApplicationDescriptor,
    AppState,
    ModelKind,
    QoSSpec,
    SchedulerCore,
)


class ManualClock:
    def __init__(self, start=1000.0):
        self.now = start

    def __call__(self):
        return self.now

    def advance(self, dt):
        self.now += dt
        return self.now


class Rig:
    """SchedulerCore plus simulated nodes reporting like real workers."""

    def __init__(self, max_attempts=3):
        self.clock = ManualClock()
        self.log = EventLog(clock=self.clock)
        self.directory = NodeDirectory(observer=self._observer)
        self.calendar = ReservationCalendar()
        self.ledger = AccountingLedger()
        self.core = SchedulerCore(
            directory=self.directory, calendar=self.calendar, ledger=self.ledger,
            event_log=self.log, catalog=builtin_catalog(),
            max_attempts=max_attempts, clock=self.clock)

    def _observer(self, node_id, old, new, epoch):
        if old is None:
            node = self.directory.get(node_id)
            self.log.append(ev.NODE_REGISTERED, node_id=node_id, epoch=epoch,
                            capacity=node.capacity if node else None)
        else:
            self.log.append(ev.NODE_STATE, node_id=node_id,
                            **{"from": old.value}, to=new.value, epoch=epoch)

    def add_node(self, node_id, capacity=1, labels=frozenset()):
        return self.directory.register(
            NodeDescriptor(node_id=node_id, address="local", capacity=capacity,
                           labels=labels), now=self.clock())

    def submit(self, app_id, n_units=1, owner="alice", fn="identity",
               model=ModelKind.TASK, deadline=None, labels=frozenset()):
        units = [WorkUnit(unit_id=f"u{i}", app_id="", kind=UnitKind.TASK,
                          payload={"function": fn, "args": {"value": i}},
                          required_labels=labels)
                 for i in range(n_units)]
        descriptor = ApplicationDescriptor(
            app_id=app_id, owner=owner, model_kind=model,
            submitted_at=self.clock(), qos=QoSSpec(deadline=deadline))
        return self.core.enqueue_app(descriptor, units)

    def start_all(self, decisions):
        for d in decisions:
            assert self.core.mark_running(d.node_id, d.node_epoch, d.unit_id, d.attempt)

    def finish(self, decision, status="success", runtime=0.5, result="ok", error=None):
        return self.core.on_unit_result(
            decision.node_id, decision.node_epoch, decision.unit_id,
            decision.attempt, status, result=result, error=error, runtime=runtime)

    def run_to_completion(self, rounds=50):
        for _ in range(rounds):
            decisions = self.core.dispatch_next()
            if not decisions:
                if all(u.is_terminal() for u in self.core.units.values()):
                    return
                continue
            self.start_all(decisions)
            for d in decisions:
                self.finish(d)

    def audit(self):
        return audit_event_log(self.log.all_events())


class TestAdmission:
    def test_fifo_dispatch_order(self):
        rig = Rig()
        rig.add_node("w1", capacity=1)
        rig.submit("app-1", n_units=3)
        d1 = rig.core.dispatch_next()
        assert len(d1) == 1 and d1[0].unit_id == "app-1:u0"
        rig.start_all(d1)
        rig.finish(d1[0])
        d2 = rig.core.dispatch_next()
        assert d2[0].unit_id == "app-1:u1"

    def test_duplicate_app_id(self):
        rig = Rig()
        rig.submit("app-1")
        with pytest.raises(DuplicateAppId):
            rig.submit("app-1")

    def test_unknown_function(self):
        rig = Rig()
        with pytest.raises(UnknownFunction):
            rig.submit("app-1", fn="nope")

    def test_empty_task_bag(self):
        rig = Rig()
        with pytest.raises(EmptyBag):
            rig.submit("app-1", n_units=0)

    def test_deadline_before_submission_rejected(self):
        rig = Rig()
        with pytest.raises(ValidationFailed):
            rig.submit("app-1", deadline=rig.clock() - 10)

    def test_app_runs_then_completes(self):
        rig = Rig()
        rig.add_node("w1", capacity=2)
        app = rig.submit("app-1", n_units=2)
        assert app.descriptor.state is AppState.QUEUED
        decisions = rig.core.dispatch_next()
        assert app.descriptor.state is AppState.RUNNING
        rig.start_all(decisions)
        for d in decisions:
            rig.finish(d)
        assert app.descriptor.state is AppState.COMPLETED
        assert rig.audit() == []


class TestDispatch:
    def test_no_alive_nodes_dispatches_nothing(self):
        rig = Rig()
        rig.submit("app-1")
        assert rig.core.dispatch_next() == []

    def test_lowest_node_id_first_fit(self):
        rig = Rig()
        rig.add_node("w2")
        rig.add_node("w1")
        rig.submit("app-1")
        decisions = rig.core.dispatch_next()
        assert decisions[0].node_id == "w1"

    def test_label_filter(self):
        rig = Rig()
        rig.add_node("w1")
        rig.add_node("w2", labels=frozenset({"gpu"}))
        rig.submit("app-1", labels=frozenset({"gpu"}))
        decisions = rig.core.dispatch_next()
        assert [d.node_id for d in decisions] == ["w2"]

    def test_reserved_node_blocks_foreign_owner(self):
        rig = Rig()
        rig.add_node("w1")
        rig.calendar.request("w1", "bob", rig.clock() - 10, rig.clock() + 1000)
        rig.submit("app-1", owner="alice")
        assert rig.core.dispatch_next() == []

    def test_reserved_node_serves_reservation_owner(self):
        rig = Rig()
        rig.add_node("w1")
        rig.calendar.request("w1", "alice", rig.clock() - 10, rig.clock() + 1000)
        rig.submit("app-1", owner="alice")
        assert len(rig.core.dispatch_next()) == 1

    def test_slot_conservation(self):
        rig = Rig()
        rig.add_node("w1", capacity=3)
        rig.submit("app-1", n_units=10)
        decisions = rig.core.dispatch_next()
        assert len(decisions) == 3
        assert rig.core.dispatch_next() == []  # saturated
        rig.start_all(decisions)
        rig.finish(decisions[0])
        assert len(rig.core.dispatch_next()) == 1

    def test_draining_node_gets_nothing(self):
        rig = Rig()
        rig.add_node("w1")
        rig.core.drain_node("w1")
        rig.submit("app-1")
        assert rig.core.dispatch_next() == []


class TestRetry:
    def test_first_failure_requeues(self):
        rig = Rig()
        rig.add_node("w1")
        rig.submit("app-1")
        (d,) = rig.core.dispatch_next()
        rig.start_all([d])
        rig.finish(d, status="failure", error="boom", result=None)
        unit = rig.core.units["app-1:u0"]
        assert unit.state is UnitState.PENDING
        assert unit.attempts == 1

    def test_third_failure_is_permanent_and_task_app_flagged(self):
        rig = Rig()
        rig.add_node("w1")
        app = rig.submit("app-1")
        for i in range(3):
            (d,) = rig.core.dispatch_next()
            rig.start_all([d])
            rig.finish(d, status="failure", error=f"boom {i}", result=None)
        unit = rig.core.units["app-1:u0"]
        assert unit.state is UnitState.FAILED
        assert unit.is_terminal()
        assert app.descriptor.state is AppState.COMPLETED
        assert app.completed_with_failures
        assert rig.audit() == []

    def test_success_records_result_and_accrues_once(self):
        rig = Rig()
        rig.add_node("w1")
        rig.submit("app-1")
        (d,) = rig.core.dispatch_next()
        rig.start_all([d])
        rig.finish(d, runtime=2.5)
        records = rig.ledger.records("alice")
        assert len(records) == 1
        assert records[0].busy_node_seconds == 2.5
        assert records[0].completed_units == 1

    def test_stale_report_discarded(self):
        rig = Rig()
        rig.add_node("w1")
        rig.submit("app-1")
        (d,) = rig.core.dispatch_next()
        rig.start_all([d])
        rig.finish(d)
        # replayed/duplicate report for the same attempt
        rig.finish(d)
        records = rig.ledger.records("alice")
        assert records[0].completed_units == 1
        stale = [e for e in rig.log.all_events() if e["kind"] == ev.STALE_REPORT]
        assert len(stale) == 1

    def test_report_from_old_epoch_discarded(self):
        rig = Rig()
        rig.add_node("w1")
        rig.submit("app-1")
        (d,) = rig.core.dispatch_next()
        rig.start_all([d])
        # node dies; unit requeued; node re-registers with epoch 2 and the
        # unit is dispatched again
        rig.directory.sweep_failures(rig.clock.advance(10), period=1.0)
        rig.core.on_node_dead("w1")
        rig.add_node("w1")
        (d2,) = rig.core.dispatch_next()
        assert d2.node_epoch == 2
        rig.start_all([d2])
        # late result from the first assignment (epoch 1) must be fenced
        rig.finish(d, result="stale value")
        unit = rig.core.units["app-1:u0"]
        assert unit.state is UnitState.RUNNING
        rig.finish(d2, result="fresh value")
        assert unit.result == "fresh value"
        assert rig.audit() == []


class TestNodeDeath:
    def test_running_units_requeued_without_attempt_charge(self):
        rig = Rig()
        rig.add_node("w1", capacity=2)
        rig.submit("app-1", n_units=2)
        decisions = rig.core.dispatch_next()
        rig.start_all(decisions)
        rig.core.on_node_dead("w1")
        for unit_id in ("app-1:u0", "app-1:u1"):
            unit = rig.core.units[unit_id]
            assert unit.state is UnitState.PENDING
            assert unit.attempts == 0
        assert rig.audit() == []

    def test_scheduled_units_requeued(self):
        rig = Rig()
        rig.add_node("w1")
        rig.submit("app-1")
        rig.core.dispatch_next()
        rig.core.on_node_dead("w1")  # never started
        assert rig.core.units["app-1:u0"].state is UnitState.PENDING
        assert rig.audit() == []

    def test_idempotent(self):
        rig = Rig()
        rig.add_node("w1")
        rig.submit("app-1")
        rig.core.dispatch_next()
        rig.core.on_node_dead("w1")
        before = len(rig.log.all_events())
        rig.core.on_node_dead("w1")
        assert len(rig.log.all_events()) == before

    def test_units_complete_elsewhere_after_death(self):
        rig = Rig()
        rig.add_node("w1")
        rig.submit("app-1", n_units=2)
        (d1,) = rig.core.dispatch_next()
        rig.start_all([d1])
        rig.core.on_node_dead("w1")
        rig.add_node("w2")
        rig.run_to_completion()
        app = rig.core.apps["app-1"]
        assert app.descriptor.state is AppState.COMPLETED
        assert all(rig.core.units[u].state is UnitState.COMPLETED
                   for u in app.unit_ids)
        assert rig.audit() == []


class TestCancelAndAbort:
    def test_owner_cancels_running_app(self):
        rig = Rig()
        rig.add_node("w1")
        rig.submit("app-1", n_units=3)
        decisions = rig.core.dispatch_next()
        rig.start_all(decisions)
        cancels = rig.core.cancel_app("app-1", "alice")
        assert cancels == [("w1", "app-1:u0")]
        app = rig.core.apps["app-1"]
        assert app.descriptor.state is AppState.CANCELLED
        assert all(rig.core.units[u].state is UnitState.ABORTED for u in app.unit_ids)
        assert rig.core.dispatch_next() == []
        assert rig.audit() == []

    def test_non_owner_rejected(self):
        rig = Rig()
        rig.submit("app-1", owner="alice")
        with pytest.raises(NotAuthorized):
            rig.core.cancel_app("app-1", "bob")

    def test_admin_may_cancel(self):
        rig = Rig()
        rig.submit("app-1", owner="alice")
        rig.core.cancel_app("app-1", "root", admin=True)

    def test_cancel_completed_app_is_noop(self):
        rig = Rig()
        rig.add_node("w1")
        rig.submit("app-1")
        rig.run_to_completion()
        rig.core.cancel_app("app-1", "alice")
        assert rig.core.apps["app-1"].descriptor.state is AppState.COMPLETED

    def test_abort_pending_unit_never_dispatches(self):
        rig = Rig()
        rig.submit("app-1")
        rig.core.abort_unit("app-1:u0", "alice")
        rig.add_node("w1")
        assert rig.core.dispatch_next() == []
        assert rig.core.units["app-1:u0"].state is UnitState.ABORTED

    def test_abort_completed_unit_is_noop(self):
        rig = Rig()
        rig.add_node("w1")
        rig.submit("app-1")
        rig.run_to_completion()
        rig.core.abort_unit("app-1:u0", "alice")
        assert rig.core.units["app-1:u0"].state is UnitState.COMPLETED


class TestSla:
    def test_no_deadline_no_events(self):
        rig = Rig()
        rig.submit("app-1")
        assert rig.core.check_sla() == []

    def test_past_deadline_violated(self):
        rig = Rig()
        rig.submit("app-1", deadline=rig.clock() + 5)
        rig.clock.advance(10)
        events = rig.core.check_sla()
        assert [e.kind for e in events] == ["Violated"]

    def test_projection_formula(self):
        """100 pending x 1 s mean on 2 slots with 20 s remaining: at risk."""
        rig = Rig()
        rig.add_node("w1", capacity=2)
        rig.submit("app-1", n_units=100, deadline=rig.clock() + 20)
        events = rig.core.check_sla()  # estimator seed is 1.0 s
        assert [e.kind for e in events] == ["AtRisk"]

    def test_comfortable_deadline_no_events(self):
        rig = Rig()
        rig.add_node("w1", capacity=2)
        rig.submit("app-1", n_units=4, deadline=rig.clock() + 1000)
        assert rig.core.check_sla() == []

    def test_terminal_app_emits_nothing(self):
        rig = Rig()
        rig.add_node("w1")
        rig.submit("app-1", deadline=rig.clock() + 50)
        rig.run_to_completion()
        rig.clock.advance(100)
        assert rig.core.check_sla() == []


class TestThreadModel:
    def test_open_app_accepts_units_then_closes(self):
        rig = Rig()
        rig.add_node("w1", capacity=4)
        descriptor = ApplicationDescriptor(
            app_id="th-1", owner="alice", model_kind=ModelKind.THREAD,
            submitted_at=rig.clock())
        app = rig.core.enqueue_app(descriptor, [], sealed=False)
        rig.core.add_units("th-1", [
            WorkUnit(unit_id="t0", app_id="", kind=UnitKind.THREAD,
                     payload={"function": "square", "args": {"x": 4}})])
        rig.run_to_completion()
        assert app.descriptor.state is AppState.QUEUED or not app.sealed
        rig.core.close_app("th-1")
        assert app.descriptor.state in (AppState.RUNNING, AppState.COMPLETED)
        rig.run_to_completion()
        assert app.descriptor.state is AppState.COMPLETED

    def test_thread_app_with_permanent_failure_fails(self):
        rig = Rig()
        rig.add_node("w1")
        descriptor = ApplicationDescriptor(
            app_id="th-1", owner="alice", model_kind=ModelKind.THREAD,
            submitted_at=rig.clock())
        rig.core.enqueue_app(descriptor, [
            WorkUnit(unit_id="t0", app_id="", kind=UnitKind.THREAD,
                     payload={"function": "fail", "args": {}})], sealed=False)
        for _ in range(3):
            (d,) = rig.core.dispatch_next()
            rig.start_all([d])
            rig.finish(d, status="failure", error="boom", result=None)
        rig.core.close_app("th-1")
        assert rig.core.apps["th-1"].descriptor.state is AppState.FAILED

    def test_adding_units_to_task_app_rejected(self):
        rig = Rig()
        rig.submit("app-1")
        with pytest.raises(ValidationFailed):
            rig.core.add_units("app-1", [
                WorkUnit(unit_id="x", app_id="", kind=UnitKind.TASK,
                         payload={"function": "identity", "args": {}})])


class TestResults:
    def test_results_require_terminal_app(self):
        rig = Rig()
        rig.submit("app-1")
        with pytest.raises(NotTerminal):
            rig.core.results_doc("app-1")

    def test_results_sorted_with_failure_manifest(self):
        rig = Rig(max_attempts=1)
        rig.add_node("w1", capacity=2)
        rig.submit("app-1", n_units=2)
        decisions = rig.core.dispatch_next()
        rig.start_all(decisions)
        rig.finish(decisions[0], result="fine")
        rig.finish(decisions[1], status="failure", error="exploded", result=None)
        doc = rig.core.results_doc("app-1")
        assert doc["completed_with_failures"]
        assert [r["unit_id"] for r in doc["results"]] == ["app-1:u0"]
        assert doc["failures"][0]["error"] == "exploded"

    def test_counters_sum_to_total(self):
        rig = Rig()
        rig.add_node("w1", capacity=2)
        app = rig.submit("app-1", n_units=5)
        rig.core.dispatch_next()
        counters = rig.core.counters(app)
        assert sum(counters.values()) == 5
        assert counters["scheduled"] == 2
        assert counters["pending"] == 3


class TestStatusMonotonicity:
    ORDER = {"Queued": 0, "Running": 1, "Completed": 2, "Failed": 2, "Cancelled": 2}

    def test_app_state_never_regresses(self):
        rig = Rig()
        rig.add_node("w1")
        rig.submit("app-1", n_units=4)
        seen = []
        for _ in range(30):
            seen.append(rig.core.status_doc("app-1", include_units=False)["state"])
            decisions = rig.core.dispatch_next()
            rig.start_all(decisions)
            for d in decisions:
                rig.finish(d)
        ranks = [self.ORDER[s] for s in seen]
        assert ranks == sorted(ranks)
