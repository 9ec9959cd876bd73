"""MapReduce runtime pieces.

Partitioning is FNV-1a 64 of the key bytes modulo the reducer count, so any
node computes the same partition for the same key. Intermediate pairs are
staged to the master's storage as one file per (split, partition); no
worker-to-worker shuffle. Reduce processes keys in ascending byte order and
sees each key's values ordered by (producing split index, emission order),
which makes outputs byte-comparable across runs and worker counts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional

from ..errors import ValidationFailed
from .units import UnitKind, WorkUnit

FNV64_OFFSET_BASIS = 14695981039346656037
FNV64_PRIME = 1099511628211
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = FNV64_OFFSET_BASIS
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


def mr_partition(key: str | bytes, reducers: int) -> int:
    """Deterministic partition index in [0, reducers)."""
    if reducers < 1:
        raise ValidationFailed(f"reducer count must be >= 1, got {reducers}")
    data = key.encode("utf-8") if isinstance(key, str) else bytes(key)
    return fnv1a64(data) % reducers


# -- intermediate pair files ---------------------------------------------------

def encode_pairs(pairs: Iterable[tuple]) -> bytes:
    """One JSON [key, value] array per line, emission order preserved."""
    lines = [json.dumps([k, v], sort_keys=True, separators=(",", ":")) for k, v in pairs]
    return ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8")


def decode_pairs(data: bytes) -> list[tuple]:
    pairs = []
    for line in data.decode("utf-8").splitlines():
        if line:
            k, v = json.loads(line)
            pairs.append((k, v))
    return pairs


def format_output_line(key: str, value: Any) -> str:
    rendered = value if isinstance(value, str) else (
        str(value) if isinstance(value, (int, float)) else json.dumps(value, sort_keys=True))
    return f"{key}\t{rendered}\n"


# -- worker-side execution -----------------------------------------------------

def run_map(map_fn: Callable, ctx, text: str, reducers: int) -> tuple[dict[int, list], int]:
    """Apply the map function and route its pairs; returns
    ({partition: [(key, value), ...]}, emitted_count)."""
    partitions: dict[int, list] = {}
    emitted = 0
    for key, value in map_fn(ctx, text):
        partitions.setdefault(mr_partition(key, reducers), []).append((key, value))
        emitted += 1
    return partitions, emitted


def run_reduce(reduce_fn: Callable, ctx, inputs: list[tuple[int, list]]) -> str:
    """Merge per-split pair lists (given as (split_index, pairs)) and reduce.

    Keys are processed in ascending byte order; each key's values arrive in
    (split index, emission order).
    """
    grouped: dict[str, list] = {}
    for _, pairs in sorted(inputs, key=lambda item: item[0]):
        for key, value in pairs:
            grouped.setdefault(key, []).append(value)
    out = []
    for key in sorted(grouped, key=lambda k: k.encode("utf-8")):
        out.append(format_output_line(key, reduce_fn(ctx, key, grouped[key])))
    return "".join(out)


# -- job description and master-side phase control ------------------------------

@dataclass
class MapReduceParams:
    map_fn: str
    reduce_fn: str
    splits: list  # FileRef docs
    reducers: int

    @classmethod
    def from_doc(cls, doc: dict) -> "MapReduceParams":
        reducers = int(doc.get("reducers", 1))
        if reducers < 1:
            raise ValidationFailed(f"reducer count must be >= 1, got {reducers}")
        if not doc.get("map_fn") or not doc.get("reduce_fn"):
            raise ValidationFailed("map_fn and reduce_fn are required")
        return cls(map_fn=doc["map_fn"], reduce_fn=doc["reduce_fn"],
                   splits=list(doc.get("splits", [])), reducers=reducers)


class MapReduceController:
    """Drives the two phases of one job over the shared scheduler.

    Map units are created up front; reduce units are created only once every
    map unit has completed (the phase barrier). A permanently failed unit
    fails the whole job and partial outputs are discarded.
    """

    def __init__(self, app_id: str, params: MapReduceParams):
        self.app_id = app_id
        self.params = params
        self.map_unit_split: dict[str, int] = {}
        self.map_partition_refs: dict[int, dict[int, dict]] = {}  # split -> partition -> ref doc
        self.reduce_unit_partition: dict[str, int] = {}
        self.outputs: dict[int, dict] = {}  # partition -> output ref doc
        self.emitted_pairs = 0
        self.phase = "map" if params.splits else "done"
        self.failed_reason: Optional[str] = None

    @property
    def sealed(self) -> bool:
        """True once no further units will be produced."""
        return self.phase in ("reduce", "done", "failed")

    def initial_units(self) -> list[WorkUnit]:
        units = []
        for index, split in enumerate(self.params.splits):
            unit = WorkUnit(
                unit_id=f"{self.app_id}:map-{index:04d}",
                app_id=self.app_id,
                kind=UnitKind.MAP,
                payload={"function": self.params.map_fn,
                         "args": {"split_index": index, "reducers": self.params.reducers}},
                inputs=[split],
            )
            units.append(unit)
            self.map_unit_split[unit.unit_id] = index
        return units

    def _reduce_units(self) -> list[WorkUnit]:
        by_partition: dict[int, list] = {}
        for split_index in sorted(self.map_partition_refs):
            for partition, ref in self.map_partition_refs[split_index].items():
                by_partition.setdefault(partition, []).append(
                    {"split_index": split_index, "ref": ref})
        units = []
        for partition in sorted(by_partition):
            unit = WorkUnit(
                unit_id=f"{self.app_id}:reduce-{partition:04d}",
                app_id=self.app_id,
                kind=UnitKind.REDUCE,
                payload={"function": self.params.reduce_fn,
                         "args": {"partition": partition,
                                  "inputs": by_partition[partition]}},
            )
            units.append(unit)
            self.reduce_unit_partition[unit.unit_id] = partition
        return units

    def on_unit_completed(self, unit_id: str, result: dict) -> list[WorkUnit]:
        """Returns new units to enqueue (the reduce wave, at the barrier)."""
        if self.phase == "failed":
            return []
        if unit_id in self.map_unit_split:
            split_index = self.map_unit_split[unit_id]
            partitions = {int(p): entry["ref"] for p, entry in result.get("partitions", {}).items()}
            self.map_partition_refs[split_index] = partitions
            self.emitted_pairs += int(result.get("emitted", 0))
            if len(self.map_partition_refs) == len(self.params.splits):
                units = self._reduce_units()
                self.phase = "reduce" if units else "done"
                return units
            return []
        if unit_id in self.reduce_unit_partition:
            partition = self.reduce_unit_partition[unit_id]
            self.outputs[partition] = result["output"]
            if len(self.outputs) == len(self.reduce_unit_partition):
                self.phase = "done"
            return []
        return []

    def on_unit_failed(self, unit_id: str) -> None:
        if unit_id in self.map_unit_split:
            self.failed_reason = "MapFailed"
        else:
            self.failed_reason = "ReduceFailed"
        self.phase = "failed"
        self.outputs.clear()

    def output_refs(self) -> list[dict]:
        """One output file per nonempty partition, partition order."""
        return [self.outputs[p] for p in sorted(self.outputs)]
