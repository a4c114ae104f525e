"""Control-plane service logic, independent of the HTTP layer."""

from __future__ import annotations

import threading
import time
from typing import Any, Callable

from ..circuit import DIALECT, parse
from ..device import DeviceSnapshot, Verdict, check_admissibility
from ..errors import (
    ADMIN_FORCE_FAILED,
    ALL_CODES,
    BAD_REQUEST,
    DEVICE_MISMATCH,
    UNKNOWN_DEVICE,
    ErrorEnvelope,
    VqpuError,
    isoformat,
    utcnow,
)
from ..lifecycle import (
    DEVICE_UPDATED,
    RUNNING,
    STATES,
    Database,
    EventLog,
    TaskRecord,
    TaskStore,
)
from ..rundir import ExecutionPayload
from .auth import ADMIN, AGENT, USER, KeyTable, Principal, require
from .cache import SnapshotCache
from .config import MAX_CLAIM_WAIT_S, ServerConfig

MAX_SHOTS = 1_000_000


class DeviceRegistry:
    """Authoritative device store with version history, fronted by the TTL cache.

    Mutations run under the task store's lock (so DEVICE_UPDATED events are
    ordered with task events) and under the cache lock (so invalidation is
    atomic with respect to cached reads).
    """

    def __init__(self, store: TaskStore, cache: SnapshotCache, db: Database | None = None) -> None:
        self._store = store
        self.cache = cache
        self._db = db
        self._current: dict[str, DeviceSnapshot] = {}
        self._history: dict[str, list[DeviceSnapshot]] = {}
        if db is not None:
            for snap, deleted in db.load_devices():
                self._history.setdefault(snap.device_id, []).append(snap)
                if not deleted:
                    self._current[snap.device_id] = snap
                else:
                    self._current.pop(snap.device_id, None)

    def authoritative(self, device_id: str) -> DeviceSnapshot | None:
        return self._current.get(device_id)

    def view(self, device_id: str) -> DeviceSnapshot:
        snap = self.cache.get(device_id, self.authoritative)
        if snap is None:
            raise VqpuError(UNKNOWN_DEVICE, f"unknown device {device_id}", {"device_id": device_id})
        return snap

    def device_ids(self) -> list[str]:
        return sorted(self._current)

    def history(self, device_id: str) -> list[DeviceSnapshot]:
        if device_id not in self._history:
            raise VqpuError(UNKNOWN_DEVICE, f"unknown device {device_id}", {"device_id": device_id})
        return list(self._history[device_id])

    def put(self, device_id: str, descriptor: dict[str, Any], *, create: bool = True, by: str = "") -> DeviceSnapshot:
        if not isinstance(descriptor, dict):
            raise VqpuError(BAD_REQUEST, "device descriptor must be a JSON object")
        body_id = descriptor.get("device_id")
        if body_id not in (None, device_id):
            raise VqpuError(DEVICE_MISMATCH, f"descriptor names {body_id!r}, path names {device_id!r}")
        with self._store.lock, self.cache.lock:
            previous = self._history.get(device_id)
            if device_id not in self._current and not create:
                raise VqpuError(UNKNOWN_DEVICE, f"unknown device {device_id}", {"device_id": device_id})
            version = previous[-1].snapshot_version + 1 if previous else 1
            now = self._store.clock()
            snap = DeviceSnapshot.from_dict(
                {**descriptor, "device_id": device_id, "snapshot_version": version, "captured_at": isoformat(now)}
            )
            if self._db is not None:
                self._db.put_device(snap)
            self._history.setdefault(device_id, []).append(snap)
            self._current[device_id] = snap
            self.cache.invalidate(device_id)
            self._store.events.append(
                DEVICE_UPDATED,
                timestamp=now,
                device_id=device_id,
                payload={"snapshot_version": version, "created": not previous, "by": by},
            )
            return snap

    def delete(self, device_id: str, *, by: str = "") -> None:
        with self._store.lock, self.cache.lock:
            snap = self._current.pop(device_id, None)
            if snap is None:
                raise VqpuError(UNKNOWN_DEVICE, f"unknown device {device_id}", {"device_id": device_id})
            if self._db is not None:
                self._db.delete_device(device_id)
            self.cache.invalidate(device_id)
            self._store.events.append(
                DEVICE_UPDATED,
                timestamp=self._store.clock(),
                device_id=device_id,
                payload={"snapshot_version": snap.snapshot_version, "deleted": True, "by": by},
            )


def _field(body: dict[str, Any], name: str, kind: type, required: bool = True) -> Any:
    value = body.get(name)
    if value is None:
        if required:
            raise VqpuError(BAD_REQUEST, f"missing field {name!r}")
        return None
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise VqpuError(BAD_REQUEST, f"field {name!r} must be an integer")
    if kind is str and not isinstance(value, str):
        raise VqpuError(BAD_REQUEST, f"field {name!r} must be a string")
    return value


def _submission(body: Any) -> dict[str, Any]:
    if not isinstance(body, dict):
        raise VqpuError(BAD_REQUEST, "request body must be a JSON object")
    shots = _field(body, "shots", int)
    if not 1 <= shots <= MAX_SHOTS:
        raise VqpuError(BAD_REQUEST, f"shots must be in [1, {MAX_SHOTS}]")
    seed = _field(body, "seed", int, required=False)
    if seed is not None and not 0 <= seed < 2**64:
        raise VqpuError(BAD_REQUEST, "seed must be a 64-bit unsigned integer")
    return {
        "circuit_source": _field(body, "circuit_source", str),
        "dialect": _field(body, "dialect", str, required=False) or DIALECT,
        "shots": shots,
        "device_id": _field(body, "device_id", str),
        "seed": seed,
    }


class ControlPlane:
    def __init__(
        self,
        config: ServerConfig | None = None,
        keys: KeyTable | None = None,
        *,
        clock: Callable = utcnow,
        monotonic: Callable[[], float] = time.monotonic,
    ) -> None:
        self.config = config or ServerConfig()
        if keys is None:
            keys = KeyTable.load(self.config.api_keys_file) if self.config.api_keys_file else KeyTable({})
        self.keys = keys
        self.db = Database(self.config.store_path) if self.config.store_path else None
        self.events = EventLog(self.config.event_log_path, self.config.replay_window)
        self.store = TaskStore(self.events, self.db, clock)
        self.devices = DeviceRegistry(self.store, SnapshotCache(self.config.cache_ttl_s, monotonic), self.db)
        self._changed = threading.Condition()
        self.events.add_listener(self._notify)

    def _notify(self, _event) -> None:
        with self._changed:
            self._changed.notify_all()

    def _wait_for_change(self, seen_sequence: int, timeout: float) -> None:
        with self._changed:
            self._changed.wait_for(lambda: self.events.last_sequence > seen_sequence, timeout)

    def authenticate(self, key: str | None) -> Principal:
        return self.keys.authenticate(key)

    # -- admission -----------------------------------------------------

    def _validate(self, sub: dict[str, Any]) -> Verdict:
        snapshot = self.devices.view(sub["device_id"])
        circuit = parse(sub["circuit_source"], sub["dialect"])
        return check_admissibility(circuit, snapshot)

    def submit(self, principal: Principal, body: Any) -> TaskRecord:
        require(principal, USER)
        sub = _submission(body)
        self._validate(sub).raise_if_rejected()
        return self.store.enqueue(**sub, submitted_by=principal.name)

    def check(self, principal: Principal, body: Any) -> Verdict:
        require(principal, USER)
        sub = _submission(body)
        try:
            return self._validate(sub)
        except VqpuError as exc:
            if exc.code == UNKNOWN_DEVICE:
                raise
            line = (exc.detail or {}).get("line")
            return Verdict(False, exc.code, exc.message, line)

    # -- queries -------------------------------------------------------

    def get_task(self, principal: Principal, task_id: str, wait_s: float = 0.0) -> TaskRecord:
        """With ``wait_s`` > 0, block until the task is terminal or the wait expires."""
        deadline = time.monotonic() + min(max(wait_s, 0.0), MAX_CLAIM_WAIT_S)
        while True:
            seen = self.events.last_sequence
            rec = self.store.get(task_id)
            remaining = deadline - time.monotonic()
            if rec.is_terminal or remaining <= 0:
                return rec
            self._wait_for_change(seen, remaining)

    def list_tasks(
        self, principal: Principal, state: str | None = None, device_id: str | None = None, owner: str | None = None
    ) -> list[TaskRecord]:
        if state is not None and state not in STATES:
            raise VqpuError(BAD_REQUEST, f"unknown state {state!r}")
        return self.store.list(state=state, device_id=device_id, owner=owner)

    def list_stale(self, principal: Principal) -> list[TaskRecord]:
        require(principal, ADMIN)
        return self.store.stale(self.config.liveness_window_s)

    # -- client and admin mutations ------------------------------------

    def cancel(self, principal: Principal, task_id: str) -> TaskRecord:
        require(principal, USER)
        return self.store.cancel(task_id, principal.name, is_admin=principal.is_admin)

    def requeue(self, principal: Principal, task_id: str) -> TaskRecord:
        require(principal, ADMIN)
        return self.store.requeue(task_id, principal.name)

    def force_fail(self, principal: Principal, task_id: str, body: Any = None) -> TaskRecord:
        require(principal, ADMIN)
        body = body if isinstance(body, dict) else {}
        code = body.get("code") or ADMIN_FORCE_FAILED
        if code not in ALL_CODES:
            raise VqpuError(BAD_REQUEST, f"unknown error code {code!r}")
        envelope = ErrorEnvelope(code, str(body.get("message") or "failed by administrator"), {"by": principal.name})
        return self.store.force_fail(task_id, principal.name, envelope)

    # -- devices -------------------------------------------------------

    def list_devices(self, principal: Principal) -> list[DeviceSnapshot]:
        out = []
        for device_id in self.devices.device_ids():
            try:
                out.append(self.devices.view(device_id))
            except VqpuError:
                continue  # deleted concurrently
        return out

    def get_device(self, principal: Principal, device_id: str, authoritative: bool = False) -> DeviceSnapshot:
        if authoritative:
            snap = self.devices.authoritative(device_id)
            if snap is None:
                raise VqpuError(UNKNOWN_DEVICE, f"unknown device {device_id}", {"device_id": device_id})
            return snap
        return self.devices.view(device_id)

    def put_device(self, principal: Principal, device_id: str, descriptor: Any) -> DeviceSnapshot:
        require(principal, ADMIN)
        return self.devices.put(device_id, descriptor, by=principal.name)

    def delete_device(self, principal: Principal, device_id: str) -> None:
        require(principal, ADMIN)
        self.devices.delete(device_id, by=principal.name)

    # -- agent protocol ------------------------------------------------

    def claim(self, principal: Principal, agent_id: str, wait_s: float = 0.0) -> dict[str, Any] | None:
        require(principal, AGENT)
        if not agent_id:
            raise VqpuError(BAD_REQUEST, "agent_id required")
        deadline = time.monotonic() + min(max(wait_s, 0.0), MAX_CLAIM_WAIT_S)
        while True:
            seen = self.events.last_sequence
            granted = self.store.claim(agent_id, self.devices.authoritative)
            if granted is not None:
                rec, snapshot = granted
                payload = ExecutionPayload(
                    rec.task_id, rec.circuit_source, rec.dialect, rec.shots, rec.seed, snapshot, isoformat(rec.claimed_at)
                )
                return {"task": rec.to_dict(), "payload": payload.to_dict()}
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return None
            self._wait_for_change(seen, remaining)

    def report_running(self, principal: Principal, task_id: str, agent_id: str, job_id: str) -> TaskRecord:
        require(principal, AGENT)
        if not job_id:
            raise VqpuError(BAD_REQUEST, "scheduler_job_id required")
        return self.store.report_running(task_id, agent_id, job_id)

    def report_completed(self, principal: Principal, task_id: str, agent_id: str, result: Any) -> TaskRecord:
        require(principal, AGENT)
        if not isinstance(result, dict) or not isinstance(result.get("counts"), dict):
            raise VqpuError(BAD_REQUEST, "result must be an object with counts")
        return self.store.report_terminal(task_id, agent_id, result=result)

    def report_failed(self, principal: Principal, task_id: str, agent_id: str, error: Any) -> TaskRecord:
        require(principal, AGENT)
        try:
            envelope = ErrorEnvelope.from_dict(error)
        except (KeyError, TypeError, ValueError) as exc:
            raise VqpuError(BAD_REQUEST, f"malformed error envelope: {exc}") from exc
        return self.store.report_terminal(task_id, agent_id, error=envelope)

    def heartbeat(self, principal: Principal, agent_id: str, task_ids: Any) -> dict[str, str]:
        require(principal, AGENT)
        if not isinstance(task_ids, list) or not all(isinstance(t, str) for t in task_ids):
            raise VqpuError(BAD_REQUEST, "task_ids must be a list of strings")
        return self.store.heartbeat(agent_id, task_ids)

    def owned_running(self, principal: Principal, agent_id: str) -> list[TaskRecord]:
        return self.store.list(state=RUNNING, owner=agent_id)

    def close(self) -> None:
        self.events.close()
        if self.db is not None:
            self.db.close()
