"""Error codes and the wire-level error envelope shared by every component."""

from __future__ import annotations

import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any

# Circuit front end
PARSE_ERROR = "PARSE_ERROR"
UNSUPPORTED_DIALECT = "UNSUPPORTED_DIALECT"

# Admissibility
UNSUPPORTED_GATE = "UNSUPPORTED_GATE"
QUBIT_OFFLINE = "QUBIT_OFFLINE"
QUBIT_OUT_OF_RANGE = "QUBIT_OUT_OF_RANGE"
TOPOLOGY_VIOLATION = "TOPOLOGY_VIOLATION"
ADMISSIBILITY_CODES = frozenset(
    {UNSUPPORTED_GATE, QUBIT_OFFLINE, QUBIT_OUT_OF_RANGE, TOPOLOGY_VIOLATION}
)

# Device model
SNAPSHOT_INVALID = "SNAPSHOT_INVALID"
DEVICE_MISMATCH = "DEVICE_MISMATCH"

# Simulation
QUBIT_LIMIT_EXCEEDED = "QUBIT_LIMIT_EXCEEDED"
INTERNAL_SIM_ERROR = "INTERNAL_SIM_ERROR"
NOT_NORMALIZED = "NOT_NORMALIZED"

# Lifecycle / control plane
STORE_ERROR = "STORE_ERROR"
DEVICE_UNAVAILABLE = "DEVICE_UNAVAILABLE"
NOT_OWNER = "NOT_OWNER"
ILLEGAL_TRANSITION = "ILLEGAL_TRANSITION"
UNKNOWN_TASK = "UNKNOWN_TASK"
UNKNOWN_DEVICE = "UNKNOWN_DEVICE"
AUTH_FAILED = "AUTH_FAILED"
BAD_REQUEST = "BAD_REQUEST"
REPLAY_WINDOW_EXCEEDED = "REPLAY_WINDOW_EXCEEDED"
ADMIN_FORCE_FAILED = "ADMIN_FORCE_FAILED"

# Scheduler boundary
SUBMIT_REJECTED = "SUBMIT_REJECTED"
UNKNOWN_JOB = "UNKNOWN_JOB"

# Execution-side provenance
PAYLOAD_MALFORMED = "PAYLOAD_MALFORMED"
RUNNER_EXCEPTION = "RUNNER_EXCEPTION"
JOB_KILLED = "JOB_KILLED"
JOB_NEVER_STARTED = "JOB_NEVER_STARTED"
ARTIFACT_MISSING = "ARTIFACT_MISSING"
ARTIFACT_MALFORMED = "ARTIFACT_MALFORMED"

ALL_CODES = frozenset(
    value for name, value in dict(globals()).items() if name.isupper() and isinstance(value, str)
)


def utcnow() -> datetime:
    return datetime.now(timezone.utc)


def isoformat(ts: datetime | None) -> str | None:
    if ts is None:
        return None
    return ts.astimezone(timezone.utc).isoformat(timespec="microseconds").replace("+00:00", "Z")


def parse_ts(value: str | None) -> datetime | None:
    if value is None:
        return None
    return datetime.fromisoformat(value.replace("Z", "+00:00"))


@dataclass(frozen=True)
class ErrorEnvelope:
    code: str
    message: str
    detail: dict[str, Any] | None = None
    correlation_id: str = field(default_factory=lambda: uuid.uuid4().hex)
    timestamp: str = field(default_factory=lambda: isoformat(utcnow()))

    def __post_init__(self) -> None:
        if self.code not in ALL_CODES:
            raise ValueError(f"unknown error code {self.code!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "code": self.code,
            "message": self.message,
            "detail": self.detail,
            "correlation_id": self.correlation_id,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ErrorEnvelope:
        kwargs = {
            "code": data["code"],
            "message": str(data.get("message", "")),
            "detail": data.get("detail"),
        }
        if data.get("correlation_id"):
            kwargs["correlation_id"] = str(data["correlation_id"])
        if data.get("timestamp"):
            kwargs["timestamp"] = str(data["timestamp"])
        return cls(**kwargs)


class VqpuError(Exception):
    """An error carrying one of the closed-set machine-readable codes."""

    def __init__(self, code: str, message: str, detail: dict[str, Any] | None = None) -> None:
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message
        self.detail = detail

    def envelope(self, correlation_id: str | None = None) -> ErrorEnvelope:
        if correlation_id is None:
            return ErrorEnvelope(self.code, self.message, self.detail)
        return ErrorEnvelope(self.code, self.message, self.detail, correlation_id)


class ParseError(VqpuError):
    def __init__(self, message: str, line: int, token: str | None = None) -> None:
        super().__init__(PARSE_ERROR, message, {"line": line, "token": token})
        self.line = line
        self.token = token
