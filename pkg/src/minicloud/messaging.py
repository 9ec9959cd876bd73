"""Wire protocol: length-prefixed JSON envelopes over TCP.

Frame layout: 4-byte big-endian length prefix followed by that many bytes of
UTF-8 JSON. The JSON document carries exactly the envelope fields (msg_id,
correlation_id, sender, kind, payload). Encoding is canonical (sorted keys,
no whitespace) so encode(decode(frame)) is byte-identical for frames this
module produced.

Bulk file content never travels in envelopes; it goes through the storage
service. The default frame cap is 16 MiB.
"""

from __future__ import annotations

import json
import socket
import struct
import threading
import uuid
from dataclasses import dataclass, field
from typing import Iterator, Optional

from .errors import FrameTooLarge, Malformed, Truncated

DEFAULT_FRAME_LIMIT = 16 * 1024 * 1024

_PREFIX = struct.Struct(">I")

# Message kinds. The set is open; routing is by name.
REGISTER = "Register"
REGISTER_ACK = "RegisterAck"
HEARTBEAT = "Heartbeat"
DISPATCH = "Dispatch"
UNIT_START = "UnitStart"
UNIT_RESULT = "UnitResult"
CANCEL = "Cancel"
STAGE_REQUEST = "StageRequest"
ADMIN = "Admin"
STOP = "Stop"
ERROR = "Error"

_FIELDS = {"msg_id", "correlation_id", "sender", "kind", "payload"}


def new_msg_id() -> str:
    """128-bit random message id, hex encoded."""
    return uuid.uuid4().hex


@dataclass
class Envelope:
    sender: str
    kind: str
    payload: dict
    msg_id: str = field(default_factory=new_msg_id)
    correlation_id: Optional[str] = None

    def reply(self, sender: str, kind: str, payload: dict) -> "Envelope":
        return Envelope(sender=sender, kind=kind, payload=payload,
                        correlation_id=self.msg_id)


def encode_envelope(env: Envelope, limit: int = DEFAULT_FRAME_LIMIT) -> bytes:
    doc = {
        "msg_id": env.msg_id,
        "correlation_id": env.correlation_id,
        "sender": env.sender,
        "kind": env.kind,
        "payload": env.payload,
    }
    body = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    frame_len = _PREFIX.size + len(body)
    if frame_len > limit:
        raise FrameTooLarge(f"frame of {frame_len} bytes exceeds limit {limit}")
    return _PREFIX.pack(len(body)) + body


def decode_envelope(data: bytes, limit: int = DEFAULT_FRAME_LIMIT) -> tuple[Envelope, bytes]:
    """Decode one frame from the head of ``data``.

    Returns the envelope and any leftover bytes (the start of the next frame).
    """
    if len(data) < _PREFIX.size:
        raise Truncated(f"need 4 prefix bytes, have {len(data)}")
    (length,) = _PREFIX.unpack_from(data)
    if _PREFIX.size + length > limit:
        raise FrameTooLarge(f"declared frame of {_PREFIX.size + length} bytes exceeds limit {limit}")
    if len(data) < _PREFIX.size + length:
        raise Truncated(f"prefix declares {length} bytes, have {len(data) - _PREFIX.size}")
    body = data[_PREFIX.size:_PREFIX.size + length]
    leftover = bytes(data[_PREFIX.size + length:])
    try:
        doc = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise Malformed(f"frame body is not a JSON document: {exc}") from exc
    return _envelope_from_doc(doc), leftover


def _envelope_from_doc(doc) -> Envelope:
    if not isinstance(doc, dict):
        raise Malformed("frame body is not a JSON object")
    if set(doc) != _FIELDS:
        missing = _FIELDS - set(doc)
        extra = set(doc) - _FIELDS
        raise Malformed(f"envelope fields mismatch (missing={sorted(missing)}, extra={sorted(extra)})")
    if not isinstance(doc["msg_id"], str) or not doc["msg_id"]:
        raise Malformed("msg_id must be a nonempty string")
    if doc["correlation_id"] is not None and not isinstance(doc["correlation_id"], str):
        raise Malformed("correlation_id must be a string or null")
    if not isinstance(doc["sender"], str) or not isinstance(doc["kind"], str) or not doc["kind"]:
        raise Malformed("sender and kind must be strings")
    if not isinstance(doc["payload"], dict):
        raise Malformed("payload must be a JSON object")
    return Envelope(sender=doc["sender"], kind=doc["kind"], payload=doc["payload"],
                    msg_id=doc["msg_id"], correlation_id=doc["correlation_id"])


def correlate(request: Envelope, candidate: Envelope) -> bool:
    """True iff ``candidate`` replies to ``request``."""
    return candidate.correlation_id is not None and candidate.correlation_id == request.msg_id


class FrameDecoder:
    """Incremental frame accumulator for a byte stream.

    Feed arbitrary chunks; complete envelopes come out in order regardless of
    how the stream was split.
    """

    def __init__(self, limit: int = DEFAULT_FRAME_LIMIT):
        self.limit = limit
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Envelope]:
        self._buf.extend(data)
        out = []
        while True:
            if len(self._buf) < _PREFIX.size:
                break
            (length,) = _PREFIX.unpack_from(self._buf)
            if _PREFIX.size + length > self.limit:
                raise FrameTooLarge(f"declared frame of {_PREFIX.size + length} bytes exceeds limit {self.limit}")
            if len(self._buf) < _PREFIX.size + length:
                break
            frame = bytes(self._buf[:_PREFIX.size + length])
            del self._buf[:_PREFIX.size + length]
            env, rest = decode_envelope(frame, self.limit)
            assert rest == b""
            out.append(env)
        return out

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)


class FrameConnection:
    """A socket carrying envelope frames; sends are thread-safe."""

    def __init__(self, sock: socket.socket, limit: int = DEFAULT_FRAME_LIMIT):
        self.sock = sock
        self.limit = limit
        self._send_lock = threading.Lock()
        self._decoder = FrameDecoder(limit)
        self._closed = False

    @classmethod
    def connect(cls, host: str, port: int, limit: int = DEFAULT_FRAME_LIMIT,
                timeout: float = 10.0) -> "FrameConnection":
        sock = socket.create_connection((host, port), timeout=timeout)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return cls(sock, limit)

    def send(self, env: Envelope) -> None:
        data = encode_envelope(env, self.limit)
        with self._send_lock:
            self.sock.sendall(data)

    def envelopes(self) -> Iterator[Envelope]:
        """Yield envelopes until the peer closes the connection."""
        while True:
            try:
                chunk = self.sock.recv(65536)
            except OSError:
                return
            if not chunk:
                return
            yield from self._decoder.feed(chunk)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
