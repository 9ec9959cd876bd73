import threading
import time

import pytest
from hypothesis import given, settings, strategies as st

from minicloud.errors import (
    EmptyDimension,
    IllegalTransition,
    UnboundPlaceholder,
    UnknownFunction,
)
from minicloud.models.catalog import (
    CancelledExecution,
    ExecutionContext,
    builtin_catalog,
)
from minicloud.models.sweep import ParameterSweepSpec, expand_sweep
from minicloud.models.units import (
    UNIT_TRANSITIONS,
    UnitKind,
    UnitState,
    WorkUnit,
    check_transition,
)


def unit(**kw):
    defaults = dict(unit_id="u1", app_id="a1", kind=UnitKind.TASK,
                    payload={"function": "identity", "args": {}})
    defaults.update(kw)
    return WorkUnit(**defaults)


class TestUnitStateMachine:
    def test_happy_path(self):
        u = unit()
        for state in (UnitState.SCHEDULED, UnitState.RUNNING, UnitState.COMPLETED):
            u.transition(state)
        assert u.is_terminal()

    def test_retry_path(self):
        u = unit()
        u.transition(UnitState.SCHEDULED)
        u.transition(UnitState.RUNNING)
        u.attempts = 1
        u.transition(UnitState.FAILED)
        u.transition(UnitState.PENDING)  # attempts 1 < 3
        assert not u.is_terminal()

    def test_retry_exhausted(self):
        u = unit()
        u.state = UnitState.FAILED
        u.attempts = 3
        with pytest.raises(IllegalTransition):
            u.transition(UnitState.PENDING)
        assert u.is_terminal()

    def test_undispatch_on_node_loss(self):
        u = unit()
        u.transition(UnitState.SCHEDULED)
        u.transition(UnitState.PENDING)

    def test_abort_from_any_non_terminal(self):
        for start in (UnitState.PENDING, UnitState.SCHEDULED, UnitState.RUNNING,
                      UnitState.FAILED):
            check_transition(start, UnitState.ABORTED, attempts=0)

    def test_terminal_states_have_no_exits(self):
        assert UNIT_TRANSITIONS[UnitState.COMPLETED] == set()
        assert UNIT_TRANSITIONS[UnitState.ABORTED] == set()

    def test_pending_cannot_jump_to_running(self):
        with pytest.raises(IllegalTransition):
            check_transition(UnitState.PENDING, UnitState.RUNNING, attempts=0)


class TestSweep:
    def test_cartesian_product_order(self):
        spec = ParameterSweepSpec(
            template={"function": "busy-wait", "args": {"millis": 50, "echo": "${i}-${c}"}},
            dimensions=[("i", [1, 2, 3]), ("c", ["a", "b"])])
        units = expand_sweep(spec)
        assert len(units) == 6
        assert units[0].payload["args"]["echo"] == "1-a"
        assert units[1].payload["args"]["echo"] == "1-b"
        assert units[-1].payload["args"]["echo"] == "3-b"
        assert all(u.kind is UnitKind.TASK for u in units)

    def test_lone_placeholder_keeps_type(self):
        spec = ParameterSweepSpec(
            template={"function": "identity", "args": {"value": "${i}"}},
            dimensions=[("i", [7, 8])])
        units = expand_sweep(spec)
        assert units[0].payload["args"]["value"] == 7

    def test_empty_dimension_rejected(self):
        spec = ParameterSweepSpec(template={"function": "identity", "args": {}},
                                  dimensions=[("i", [])])
        with pytest.raises(EmptyDimension):
            expand_sweep(spec)

    def test_unbound_placeholder_rejected(self):
        spec = ParameterSweepSpec(
            template={"function": "identity", "args": {"value": "${missing}"}},
            dimensions=[("i", [1])])
        with pytest.raises(UnboundPlaceholder):
            expand_sweep(spec)

    def test_duplicate_dimension_names_rejected(self):
        spec = ParameterSweepSpec(template={"function": "identity", "args": {}},
                                  dimensions=[("i", [1]), ("i", [2])])
        with pytest.raises(EmptyDimension):
            expand_sweep(spec)

    def test_frames_times_camera_angles(self):
        """2000 frames x 5 camera angles expand to 10000 render tasks."""
        spec = ParameterSweepSpec(
            template={"function": "shell-exec",
                      "args": {"argv": ["render", "--frame", "${frame}",
                                        "--camera", "${camera}"]}},
            dimensions=[("frame", list(range(2000))),
                        ("camera", ["front", "rear", "left", "right", "top"])])
        units = expand_sweep(spec)
        assert len(units) == 10000
        assert units[0].payload["args"]["argv"][2] == 0
        assert units[-1].payload["args"]["argv"][4] == "top"

    @given(sizes=st.lists(st.integers(min_value=1, max_value=5), min_size=1, max_size=4))
    @settings(max_examples=50, deadline=None)
    def test_cardinality_property(self, sizes):
        dims = [(f"d{i}", list(range(n))) for i, n in enumerate(sizes)]
        template = {"function": "identity",
                    "args": {f"d{i}": f"${{d{i}}}" for i in range(len(sizes))}}
        units = expand_sweep(ParameterSweepSpec(template=template, dimensions=dims))
        expected = 1
        for n in sizes:
            expected *= n
        assert len(units) == expected
        # all points distinct
        seen = {tuple(u.payload["args"][f"d{i}"] for i in range(len(sizes))) for u in units}
        assert len(seen) == expected


class TestCatalog:
    def setup_method(self):
        self.catalog = builtin_catalog()

    def test_identity(self):
        ctx = ExecutionContext()
        assert self.catalog.invoke("identity", ctx, {"value": 42}) == 42

    def test_unknown_function(self):
        with pytest.raises(UnknownFunction):
            self.catalog.resolve("warp-drive")

    def test_listing_is_sorted_with_params(self):
        listing = self.catalog.listing()
        names = [e["name"] for e in listing]
        assert names == sorted(names)
        busy = next(e for e in listing if e["name"] == "busy-wait")
        assert busy["params"] == ["millis", "echo"]

    def test_busy_wait_occupies_requested_time(self):
        ctx = ExecutionContext()
        t0 = time.monotonic()
        result = self.catalog.invoke("busy-wait", ctx, {"millis": 80, "echo": "tag"})
        elapsed = time.monotonic() - t0
        assert result == "tag"
        assert elapsed >= 0.08

    def test_busy_wait_cancellation(self):
        ctx = ExecutionContext()
        canceller = threading.Timer(0.05, ctx.cancelled.set)
        canceller.start()
        t0 = time.monotonic()
        with pytest.raises(CancelledExecution):
            self.catalog.invoke("busy-wait", ctx, {"millis": 5000})
        assert time.monotonic() - t0 < 2.0

    def test_flaky_fails_then_succeeds(self):
        ctx = ExecutionContext(attempt=1)
        with pytest.raises(RuntimeError):
            self.catalog.invoke("flaky", ctx, {"fail_times": 2, "value": "ok"})
        ctx3 = ExecutionContext(attempt=3)
        assert self.catalog.invoke("flaky", ctx3, {"fail_times": 2, "value": "ok"}) == "ok"

    def test_poly(self):
        ctx = ExecutionContext()
        assert self.catalog.invoke("poly", ctx, {"x": 3, "a": 2, "b": -1, "c": 5}) == 20

    def test_shell_exec(self):
        ctx = ExecutionContext()
        result = self.catalog.invoke("shell-exec", ctx, {"argv": ["echo", "hi"]})
        assert result["stdout"] == "hi\n"
        assert result["returncode"] == 0

    def test_shell_exec_failure(self):
        ctx = ExecutionContext()
        with pytest.raises(RuntimeError):
            self.catalog.invoke("shell-exec", ctx, {"argv": ["false"]})
