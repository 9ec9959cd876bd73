"""Append-only journal for the master's durable state.

One JSON document per line: {"kind": ..., "data": {...}}. Replayed in order
on restart to rebuild the node directory, reservation calendar, accounting
records, pool usage, users, and the price sheet.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Callable, Iterator


class Journal:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = None

    def _handle(self):
        if self._fh is None:
            self._fh = open(self.path, "a", encoding="utf-8")
        return self._fh

    def append(self, kind: str, data: dict) -> None:
        fh = self._handle()
        fh.write(json.dumps({"kind": kind, "data": data}, sort_keys=True) + "\n")
        fh.flush()
        os.fsync(fh.fileno())

    def replay(self) -> Iterator[tuple[str, dict]]:
        if not self.path.exists():
            return
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                doc = json.loads(line)
                yield doc["kind"], doc["data"]

    def replay_into(self, handlers: dict[str, Callable[[dict], None]]) -> int:
        """Apply each journaled entry through its handler; unknown kinds are
        skipped (forward compatibility). Returns entries applied."""
        applied = 0
        for kind, data in self.replay():
            handler = handlers.get(kind)
            if handler is not None:
                handler(data)
                applied += 1
        return applied

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
