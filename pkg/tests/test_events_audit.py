"""The event-log audit must flag exactly the illegal histories."""

from minicloud.events import (
    EventLog,
    NODE_REGISTERED,
    NODE_STATE,
    UNIT_STATE,
    audit_event_log,
    audit_node_transitions,
    audit_unit_transitions,
    read_event_log,
)


def unit_event(unit_id, from_, to, attempts=0, max_attempts=3):
    detail = {"to": to, "attempts": attempts, "max_attempts": max_attempts}
    if from_ is not None:
        detail["from"] = from_
    return {"kind": UNIT_STATE, "unit_id": unit_id, "app_id": "a",
            "node_id": None, "detail": detail}


def node_registered(node_id, epoch):
    return {"kind": NODE_REGISTERED, "unit_id": None, "app_id": None,
            "node_id": node_id, "detail": {"epoch": epoch}}


def node_state(node_id, from_, to, epoch):
    return {"kind": NODE_STATE, "unit_id": None, "app_id": None,
            "node_id": node_id, "detail": {"from": from_, "to": to, "epoch": epoch}}


class TestUnitAudit:
    def test_clean_lifecycle(self):
        events = [
            unit_event("u1", None, "Pending"),
            unit_event("u1", "Pending", "Scheduled"),
            unit_event("u1", "Scheduled", "Running"),
            unit_event("u1", "Running", "Completed"),
        ]
        assert audit_unit_transitions(events) == []

    def test_retry_and_requeue_paths_are_legal(self):
        events = [
            unit_event("u1", None, "Pending"),
            unit_event("u1", "Pending", "Scheduled"),
            unit_event("u1", "Scheduled", "Pending"),     # node lost before start
            unit_event("u1", "Pending", "Scheduled"),
            unit_event("u1", "Scheduled", "Running"),
            unit_event("u1", "Running", "Failed", attempts=1),
            unit_event("u1", "Failed", "Pending", attempts=1),
            unit_event("u1", "Pending", "Scheduled", attempts=1),
            unit_event("u1", "Scheduled", "Running", attempts=1),
            unit_event("u1", "Running", "Completed", attempts=1),
        ]
        assert audit_unit_transitions(events) == []

    def test_pending_to_running_flagged(self):
        events = [unit_event("u1", None, "Pending"),
                  unit_event("u1", "Pending", "Running")]
        violations = audit_unit_transitions(events)
        assert any("Pending -> Running" in v for v in violations)

    def test_completed_is_terminal(self):
        events = [unit_event("u1", None, "Pending"),
                  unit_event("u1", "Pending", "Scheduled"),
                  unit_event("u1", "Scheduled", "Running"),
                  unit_event("u1", "Running", "Completed"),
                  unit_event("u1", "Completed", "Pending")]
        assert audit_unit_transitions(events)

    def test_retry_beyond_max_attempts_flagged(self):
        events = [unit_event("u1", None, "Pending"),
                  unit_event("u1", "Pending", "Scheduled"),
                  unit_event("u1", "Scheduled", "Running"),
                  unit_event("u1", "Running", "Failed", attempts=3),
                  unit_event("u1", "Failed", "Pending", attempts=3)]
        violations = audit_unit_transitions(events)
        assert any("attempts 3" in v for v in violations)

    def test_gap_in_history_flagged(self):
        events = [unit_event("u1", None, "Pending"),
                  unit_event("u1", "Running", "Completed")]
        assert audit_unit_transitions(events)


class TestNodeAudit:
    def test_clean_lifecycle_with_rejoin(self):
        events = [
            node_registered("w1", 1),
            node_state("w1", "Alive", "Suspect", 1),
            node_state("w1", "Suspect", "Alive", 1),
            node_state("w1", "Alive", "Suspect", 1),
            node_state("w1", "Suspect", "Dead", 1),
            node_registered("w1", 2),
            node_state("w1", "Alive", "Released", 2),
        ]
        assert audit_node_transitions(events) == []

    def test_dead_reverting_flagged(self):
        events = [node_registered("w1", 1),
                  node_state("w1", "Alive", "Suspect", 1),
                  node_state("w1", "Suspect", "Dead", 1),
                  node_state("w1", "Dead", "Alive", 1)]
        assert audit_node_transitions(events)

    def test_alive_to_dead_without_suspect_flagged(self):
        events = [node_registered("w1", 1),
                  node_state("w1", "Alive", "Dead", 1)]
        assert audit_node_transitions(events)

    def test_epoch_skip_flagged(self):
        events = [node_registered("w1", 1), node_registered("w1", 3)]
        assert audit_node_transitions(events)

    def test_state_change_before_registration_flagged(self):
        assert audit_node_transitions([node_state("w9", "Alive", "Suspect", 1)])


class TestEventLogFile:
    def test_written_log_replays_clean(self, tmp_path):
        log = EventLog(tmp_path / "events.jsonl")
        log.append(UNIT_STATE, unit_id="u1", app_id="a",
                   to="Pending", attempts=0, max_attempts=3)
        log.append(UNIT_STATE, unit_id="u1", app_id="a",
                   **{"from": "Pending"}, to="Scheduled", attempts=0, max_attempts=3)
        log.append(NODE_REGISTERED, node_id="w1", epoch=1)
        log.close()
        events = read_event_log(tmp_path / "events.jsonl")
        assert len(events) == 3
        assert [e["seq"] for e in events] == [1, 2, 3]
        assert audit_event_log(events) == []

    def test_since_cursor(self):
        log = EventLog()
        for i in range(5):
            log.append("Ping", n=i)
        assert [e["detail"]["n"] for e in log.since(2)] == [2, 3, 4]
