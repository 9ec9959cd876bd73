"""Parameter sweeps: one task per point of a cartesian parameter grid.

The template is an executable payload whose argument strings may contain
``${name}`` placeholders. A placeholder standing alone keeps the dimension
value's type; embedded placeholders are substituted textually.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from typing import Any, Sequence

from ..errors import EmptyDimension, UnboundPlaceholder
from .units import UnitKind, WorkUnit

_PLACEHOLDER = re.compile(r"\$\{([^}]+)\}")


@dataclass
class ParameterSweepSpec:
    template: dict  # executable payload with placeholders
    dimensions: list  # ordered [(name, [values...]), ...]

    @classmethod
    def from_doc(cls, doc: dict) -> "ParameterSweepSpec":
        dims = doc["dimensions"]
        if isinstance(dims, dict):
            dims = list(dims.items())
        else:
            dims = [(d[0], d[1]) if isinstance(d, (list, tuple)) else (d["name"], d["values"])
                    for d in dims]
        return cls(template=doc["template"], dimensions=dims)


def _placeholders(obj: Any) -> set:
    names = set()
    if isinstance(obj, str):
        names.update(_PLACEHOLDER.findall(obj))
    elif isinstance(obj, dict):
        for v in obj.values():
            names |= _placeholders(v)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            names |= _placeholders(v)
    return names


def _substitute(obj: Any, binding: dict) -> Any:
    if isinstance(obj, str):
        whole = _PLACEHOLDER.fullmatch(obj)
        if whole:
            return binding[whole.group(1)]
        return _PLACEHOLDER.sub(lambda m: str(binding[m.group(1)]), obj)
    if isinstance(obj, dict):
        return {k: _substitute(v, binding) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_substitute(v, binding) for v in obj]
    return obj


def expand_sweep(spec: ParameterSweepSpec, id_prefix: str = "u") -> list[WorkUnit]:
    """One Task unit per element of the cartesian product of the dimensions,
    enumerated with the first dimension most significant."""
    names = [name for name, _ in spec.dimensions]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise EmptyDimension(f"duplicate dimension names: {dupes}")
    for name, values in spec.dimensions:
        if not values:
            raise EmptyDimension(f"dimension {name!r} has no values")
    used = _placeholders(spec.template)
    unbound = used - set(names)
    if unbound:
        raise UnboundPlaceholder(f"placeholders with no dimension: {sorted(unbound)}")

    units = []
    value_lists: Sequence = [values for _, values in spec.dimensions]
    for index, point in enumerate(itertools.product(*value_lists)):
        binding = dict(zip(names, point))
        payload = _substitute(spec.template, binding)
        units.append(WorkUnit(
            unit_id=f"{id_prefix}{index:06d}",
            app_id="",
            kind=UnitKind.TASK,
            payload=payload,
        ))
    return units
