"""Run-directory layout and the artifacts exchanged between agent and runner.

This module is imported by the runner, so it must stay free of any network
or service dependency.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from .device import DeviceSnapshot
from .errors import PAYLOAD_MALFORMED, VqpuError

PAYLOAD_FILE = "payload.json"
META_FILE = "meta.json"
RESULT_FILE = "result.json"
ERROR_FILE = "error.json"
TIMINGS_FILE = "timings.json"


def write_atomic(path: str | os.PathLike, data: bytes) -> None:
    """Write-temp-then-rename so readers never see a partial file."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj: Any) -> bytes:
    return (json.dumps(obj, separators=(",", ":"), sort_keys=True) + "\n").encode()


@dataclass(frozen=True)
class ExecutionPayload:
    task_id: str
    circuit_source: str
    dialect: str
    shots: int
    seed: int
    bound_snapshot: DeviceSnapshot
    claimed_at: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "circuit_source": self.circuit_source,
            "dialect": self.dialect,
            "shots": self.shots,
            "seed": self.seed,
            "claimed_at": self.claimed_at,
            "bound_snapshot": self.bound_snapshot.to_dict(),
        }

    def canonical_json(self) -> bytes:
        # key order as in to_dict; the snapshot keeps its own canonical order
        return (json.dumps(self.to_dict(), separators=(",", ":")) + "\n").encode()

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ExecutionPayload:
        try:
            shots, seed = d["shots"], d["seed"]
            if not isinstance(shots, int) or isinstance(shots, bool) or shots < 1:
                raise ValueError(f"bad shots {shots!r}")
            if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
                raise ValueError(f"bad seed {seed!r}")
            return cls(
                task_id=str(d["task_id"]),
                circuit_source=str(d["circuit_source"]),
                dialect=str(d["dialect"]),
                shots=shots,
                seed=seed,
                bound_snapshot=DeviceSnapshot.from_dict(d["bound_snapshot"]),
                claimed_at=str(d["claimed_at"]),
            )
        except VqpuError as exc:
            raise VqpuError(PAYLOAD_MALFORMED, f"bound snapshot invalid: {exc.message}", exc.detail) from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise VqpuError(PAYLOAD_MALFORMED, f"payload malformed: {exc}") from exc

    @classmethod
    def load(cls, run_dir: str | os.PathLike) -> ExecutionPayload:
        try:
            raw = json.loads(Path(run_dir, PAYLOAD_FILE).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise VqpuError(PAYLOAD_MALFORMED, f"cannot read payload: {exc}") from exc
        if not isinstance(raw, dict):
            raise VqpuError(PAYLOAD_MALFORMED, "payload is not an object")
        return cls.from_dict(raw)


def check_result(data: Any, payload: ExecutionPayload) -> str | None:
    """Return a reason string if ``data`` is not a valid result for ``payload``."""
    if not isinstance(data, dict):
        return "result is not an object"
    counts = data.get("counts")
    if not isinstance(counts, dict) or not counts:
        return "counts missing"
    for k, v in counts.items():
        if not isinstance(v, int) or v < 0 or not set(k) <= {"0", "1"}:
            return f"bad count entry {k!r}"
    if len({len(k) for k in counts}) != 1:
        return "bitstrings of unequal length"
    if sum(counts.values()) != payload.shots or data.get("shots") != payload.shots:
        return "counts do not sum to shots"
    if data.get("task_id") != payload.task_id:
        return "task_id does not match payload"
    if data.get("snapshot_version") != payload.bound_snapshot.snapshot_version:
        return "snapshot_version does not match payload"
    if data.get("claimed_at") != payload.claimed_at:
        return "artifact belongs to a different claim"
    if data.get("seed") != payload.seed:
        return "seed does not match payload"
    return None
