"""Shared error types.

Every error carries a stable ``code`` string; the management API serializes
codes into JSON error bodies and the CLI maps them onto exit codes, so the
class names here are part of the platform's contract.
"""

from __future__ import annotations


class PlatformError(Exception):
    code = "PlatformError"

    def __init__(self, message: str = "", **details):
        super().__init__(message or self.code)
        self.message = message or self.code
        self.details = details

    def to_doc(self) -> dict:
        doc = {"error": self.code, "message": self.message}
        if self.details:
            doc["details"] = self.details
        return doc


# -- messaging ---------------------------------------------------------------

class FrameTooLarge(PlatformError):
    code = "FrameTooLarge"


class Truncated(PlatformError):
    code = "Truncated"


class Malformed(PlatformError):
    code = "Malformed"


# -- fabric ------------------------------------------------------------------

class InvalidDescriptor(PlatformError):
    code = "InvalidDescriptor"


class UnknownNode(PlatformError):
    code = "UnknownNode"


# -- foundation --------------------------------------------------------------

class TooLarge(PlatformError):
    code = "TooLarge"


class IoFailure(PlatformError):
    code = "IoFailure"


class NotFound(PlatformError):
    code = "NotFound"


class CorruptContent(PlatformError):
    code = "CorruptContent"


class Overlap(PlatformError):
    code = "Overlap"


class InvalidWindow(PlatformError):
    code = "InvalidWindow"


class NegativeUsage(PlatformError):
    code = "NegativeUsage"


# -- models ------------------------------------------------------------------

class EmptyDimension(PlatformError):
    code = "EmptyDimension"


class UnboundPlaceholder(PlatformError):
    code = "UnboundPlaceholder"


class EmptyBag(PlatformError):
    code = "EmptyBag"


class UnknownFunction(PlatformError):
    code = "UnknownFunction"


class IllegalTransition(PlatformError):
    code = "IllegalTransition"


# -- scheduler ---------------------------------------------------------------

class DuplicateAppId(PlatformError):
    code = "DuplicateAppId"


class ValidationFailed(PlatformError):
    code = "ValidationFailed"


class StaleReport(PlatformError):
    code = "StaleReport"


class UnknownApp(PlatformError):
    code = "UnknownApp"


class UnknownUnit(PlatformError):
    code = "UnknownUnit"


class NotAuthorized(PlatformError):
    code = "NotAuthorized"


class NotTerminal(PlatformError):
    code = "NotTerminal"


# -- provisioning ------------------------------------------------------------

class PoolExhausted(PlatformError):
    code = "PoolExhausted"


class SpawnFailure(PlatformError):
    code = "SpawnFailure"


class NodeBusy(PlatformError):
    code = "NodeBusy"


class NotPoolMember(PlatformError):
    code = "NotPoolMember"


# -- sdk / api ---------------------------------------------------------------

class Unauthorized(PlatformError):
    code = "Unauthorized"


class UnknownCommand(PlatformError):
    code = "UnknownCommand"


class JoinTimeout(PlatformError):
    code = "Timeout"


class ExecutionFailed(PlatformError):
    code = "ExecutionFailed"


class UnitAborted(PlatformError):
    code = "Aborted"


ERROR_CODES = {
    cls.code: cls
    for cls in list(globals().values())
    if isinstance(cls, type) and issubclass(cls, PlatformError)
}


def from_code(code: str, message: str = "", **details) -> PlatformError:
    """Rebuild a typed error from an API error body."""
    cls = ERROR_CODES.get(code, PlatformError)
    return cls(message, **details)
