"""Content-addressed blob store for file staging.

Objects live under ``root/objects/<aa>/<digest>`` where ``digest`` is the
lowercase hex SHA-256 of the content. Staging identical bytes twice is a
no-op (dedup by address); reads re-verify the digest.
"""

from __future__ import annotations

import hashlib
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from ..errors import CorruptContent, IoFailure, NotFound, TooLarge

DEFAULT_SIZE_CAP = 256 * 1024 * 1024


@dataclass(frozen=True)
class FileRef:
    digest: str
    size_bytes: int
    logical_name: str = ""

    def to_doc(self) -> dict:
        return {"digest": self.digest, "size_bytes": self.size_bytes,
                "logical_name": self.logical_name}

    @classmethod
    def from_doc(cls, doc: dict) -> "FileRef":
        return cls(digest=doc["digest"], size_bytes=int(doc["size_bytes"]),
                   logical_name=doc.get("logical_name", ""))


class BlobStore:
    def __init__(self, root: str | Path, size_cap: int = DEFAULT_SIZE_CAP):
        self.root = Path(root)
        self.size_cap = size_cap
        (self.root / "objects").mkdir(parents=True, exist_ok=True)

    def _path(self, digest: str) -> Path:
        return self.root / "objects" / digest[:2] / digest

    def stage_in(self, content: bytes, logical_name: str = "") -> FileRef:
        if len(content) > self.size_cap:
            raise TooLarge(f"{len(content)} bytes exceeds cap {self.size_cap}")
        digest = hashlib.sha256(content).hexdigest()
        path = self._path(digest)
        if not path.exists():
            try:
                path.parent.mkdir(parents=True, exist_ok=True)
                fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".staging-")
                with os.fdopen(fd, "wb") as fh:
                    fh.write(content)
                os.replace(tmp, path)  # atomic publish under the final name
            except OSError as exc:
                raise IoFailure(str(exc)) from exc
        return FileRef(digest=digest, size_bytes=len(content), logical_name=logical_name)

    def stage_out(self, ref: FileRef | str) -> bytes:
        digest = ref.digest if isinstance(ref, FileRef) else ref
        path = self._path(digest)
        if not path.exists():
            raise NotFound(f"no object {digest}")
        try:
            content = path.read_bytes()
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        actual = hashlib.sha256(content).hexdigest()
        if actual != digest:
            raise CorruptContent(f"object {digest} reads back as {actual}")
        return content

    def contains(self, digest: str) -> bool:
        return self._path(digest).exists()

    def stat(self, digest: str) -> Optional[FileRef]:
        path = self._path(digest)
        if not path.exists():
            return None
        return FileRef(digest=digest, size_bytes=path.stat().st_size)
