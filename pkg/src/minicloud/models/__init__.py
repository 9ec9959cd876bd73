"""Programming models: bag-of-tasks (+ parameter sweep), remote threads, and
mapreduce, all expressed as WorkUnit producers over one execution substrate."""

from .units import (
    DEFAULT_MAX_ATTEMPTS,
    UNIT_TRANSITIONS,
    UnitKind,
    UnitState,
    WorkUnit,
    check_transition,
)
from .catalog import CancelledExecution, ExecutionContext, FunctionCatalog, builtin_catalog
from .sweep import ParameterSweepSpec, expand_sweep
from . import mapreduce

__all__ = [
    "DEFAULT_MAX_ATTEMPTS", "UNIT_TRANSITIONS", "UnitKind", "UnitState",
    "WorkUnit", "check_transition",
    "CancelledExecution", "ExecutionContext", "FunctionCatalog", "builtin_catalog",
    "ParameterSweepSpec", "expand_sweep",
    "mapreduce",
]
