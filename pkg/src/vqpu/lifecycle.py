"""Authoritative task store: lifecycle automaton, atomic claim, event log.

Every mutation goes through one re-entrant lock, which is the store's
serialization boundary. Events are appended to the log while the lock is
held, so event order equals commit order.
"""

from __future__ import annotations

import heapq
import json
import os
import secrets
import sqlite3
import threading
import uuid
from collections import deque
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from typing import Any, Callable, Iterable, Iterator

from .device import DeviceSnapshot
from .errors import (
    ILLEGAL_TRANSITION,
    NOT_OWNER,
    STORE_ERROR,
    UNKNOWN_TASK,
    DEVICE_UNAVAILABLE,
    ErrorEnvelope,
    VqpuError,
    isoformat,
    parse_ts,
    utcnow,
)

QUEUED = "QUEUED"
RUNNING = "RUNNING"
COMPLETED = "COMPLETED"
FAILED = "FAILED"
CANCELLED = "CANCELLED"
STATES = (QUEUED, RUNNING, COMPLETED, FAILED, CANCELLED)
TERMINAL = frozenset({COMPLETED, FAILED, CANCELLED})

# The complete transition relation; nothing else is ever committed.
EDGES = frozenset(
    {
        (QUEUED, RUNNING),
        (RUNNING, COMPLETED),
        (RUNNING, FAILED),
        (QUEUED, CANCELLED),
        (RUNNING, CANCELLED),
        (RUNNING, QUEUED),
        (QUEUED, FAILED),
    }
)

TASK_QUEUED = "TASK_QUEUED"
TASK_RUNNING = "TASK_RUNNING"
TASK_COMPLETED = "TASK_COMPLETED"
TASK_FAILED = "TASK_FAILED"
TASK_CANCELLED = "TASK_CANCELLED"
TASK_REQUEUED = "TASK_REQUEUED"
DEVICE_UPDATED = "DEVICE_UPDATED"
EVENT_TYPES = (TASK_QUEUED, TASK_RUNNING, TASK_COMPLETED, TASK_FAILED, TASK_CANCELLED, TASK_REQUEUED, DEVICE_UPDATED)

STATE_AFTER_EVENT = {
    TASK_QUEUED: QUEUED,
    TASK_RUNNING: RUNNING,
    TASK_COMPLETED: COMPLETED,
    TASK_FAILED: FAILED,
    TASK_CANCELLED: CANCELLED,
    TASK_REQUEUED: QUEUED,
}

DEFAULT_LIVENESS_WINDOW_S = 90.0
DEFAULT_REPLAY_WINDOW = 10_000

# heartbeat acknowledgement markers
ACK_OK = "OK"


@dataclass
class TaskRecord:
    task_id: str
    circuit_source: str
    dialect: str
    shots: int
    device_id: str
    seed: int | None = None
    state: str = QUEUED
    owner: str | None = None
    bound_snapshot: DeviceSnapshot | None = None
    scheduler_job_id: str | None = None
    last_heartbeat_at: datetime | None = None
    created_at: datetime | None = None
    claimed_at: datetime | None = None
    terminal_at: datetime | None = None
    result: dict[str, Any] | None = None
    error: ErrorEnvelope | None = None
    submitted_by: str | None = None

    @property
    def is_terminal(self) -> bool:
        return self.state in TERMINAL

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "circuit_source": self.circuit_source,
            "dialect": self.dialect,
            "shots": self.shots,
            "device_id": self.device_id,
            "seed": self.seed,
            "state": self.state,
            "owner": self.owner,
            "bound_snapshot": self.bound_snapshot.to_dict() if self.bound_snapshot else None,
            "scheduler_job_id": self.scheduler_job_id,
            "last_heartbeat_at": isoformat(self.last_heartbeat_at),
            "created_at": isoformat(self.created_at),
            "claimed_at": isoformat(self.claimed_at),
            "terminal_at": isoformat(self.terminal_at),
            "result": self.result,
            "error": self.error.to_dict() if self.error else None,
            "submitted_by": self.submitted_by,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TaskRecord:
        return cls(
            task_id=d["task_id"],
            circuit_source=d["circuit_source"],
            dialect=d["dialect"],
            shots=int(d["shots"]),
            device_id=d["device_id"],
            seed=d.get("seed"),
            state=d["state"],
            owner=d.get("owner"),
            bound_snapshot=DeviceSnapshot.from_dict(d["bound_snapshot"]) if d.get("bound_snapshot") else None,
            scheduler_job_id=d.get("scheduler_job_id"),
            last_heartbeat_at=parse_ts(d.get("last_heartbeat_at")),
            created_at=parse_ts(d.get("created_at")),
            claimed_at=parse_ts(d.get("claimed_at")),
            terminal_at=parse_ts(d.get("terminal_at")),
            result=d.get("result"),
            error=ErrorEnvelope.from_dict(d["error"]) if d.get("error") else None,
            submitted_by=d.get("submitted_by"),
        )


@dataclass(frozen=True)
class LifecycleEvent:
    sequence: int
    event_type: str
    timestamp: str
    task_id: str | None = None
    device_id: str | None = None
    payload: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "sequence": self.sequence,
            "event_type": self.event_type,
            "task_id": self.task_id,
            "device_id": self.device_id,
            "timestamp": self.timestamp,
            "payload": self.payload,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> LifecycleEvent:
        return cls(
            int(d["sequence"]),
            d["event_type"],
            d["timestamp"],
            d.get("task_id"),
            d.get("device_id"),
            d.get("payload") or {},
        )


@dataclass(frozen=True)
class AuditEntry:
    task_id: str
    agent_id: str
    attempted: str
    rejected_with: str
    state_at_attempt: str
    timestamp: str

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


class EventLog:
    """Append-only event sequence with a bounded in-memory replay window.

    With a path, every event is also written as one JSON line. Existing
    lines are loaded on start so sequences continue across restarts.
    Listeners are invoked synchronously in append order; they must not block.
    """

    def __init__(self, path: str | os.PathLike | None = None, window: int = DEFAULT_REPLAY_WINDOW) -> None:
        self._lock = threading.Lock()
        self._window: deque[LifecycleEvent] = deque(maxlen=window)
        self._listeners: list[Callable[[LifecycleEvent], None]] = []
        self._next = 1
        self._fh = None
        self.path = os.fspath(path) if path else None
        if self.path:
            if os.path.exists(self.path):
                with open(self.path, encoding="utf-8") as fh:
                    for line in fh:
                        if line.strip():
                            ev = LifecycleEvent.from_dict(json.loads(line))
                            self._window.append(ev)
                            self._next = ev.sequence + 1
            self._fh = open(self.path, "a", encoding="utf-8")

    @property
    def last_sequence(self) -> int:
        return self._next - 1

    @property
    def window_start(self) -> int:
        """Lowest sequence still retained (``last_sequence + 1`` when empty)."""
        with self._lock:
            return self._window[0].sequence if self._window else self._next

    def add_listener(self, fn: Callable[[LifecycleEvent], None]) -> None:
        self._listeners.append(fn)

    def remove_listener(self, fn: Callable[[LifecycleEvent], None]) -> None:
        if fn in self._listeners:
            self._listeners.remove(fn)

    def append(
        self,
        event_type: str,
        *,
        timestamp: datetime,
        task_id: str | None = None,
        device_id: str | None = None,
        payload: dict[str, Any] | None = None,
    ) -> LifecycleEvent:
        with self._lock:
            ev = LifecycleEvent(self._next, event_type, isoformat(timestamp), task_id, device_id, payload or {})
            if self._fh is not None:
                try:
                    self._fh.write(ev.to_json() + "\n")
                    self._fh.flush()
                except OSError as exc:
                    raise VqpuError(STORE_ERROR, f"event log write failed: {exc}") from exc
            self._next += 1
            self._window.append(ev)
        for fn in list(self._listeners):
            fn(ev)
        return ev

    def since(self, after_sequence: int) -> list[LifecycleEvent]:
        """Retained events with sequence > ``after_sequence``."""
        with self._lock:
            return [ev for ev in self._window if ev.sequence > after_sequence]

    def events(self) -> list[LifecycleEvent]:
        with self._lock:
            return list(self._window)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class Database:
    """SQLite write-through persistence for tasks, audit entries, and devices."""

    SCHEMA = """
    CREATE TABLE IF NOT EXISTS tasks (task_id TEXT PRIMARY KEY, body TEXT NOT NULL);
    CREATE TABLE IF NOT EXISTS audit (id INTEGER PRIMARY KEY AUTOINCREMENT, body TEXT NOT NULL);
    CREATE TABLE IF NOT EXISTS devices (
        device_id TEXT NOT NULL, version INTEGER NOT NULL, body TEXT NOT NULL, deleted INTEGER NOT NULL DEFAULT 0,
        PRIMARY KEY (device_id, version)
    );
    """

    def __init__(self, path: str | os.PathLike) -> None:
        self.path = os.fspath(path)
        try:
            self._conn = sqlite3.connect(self.path, check_same_thread=False, isolation_level=None)
            self._conn.execute("PRAGMA journal_mode=WAL")
            self._conn.executescript(self.SCHEMA)
        except sqlite3.Error as exc:
            raise VqpuError(STORE_ERROR, f"cannot open store {self.path}: {exc}") from exc
        self._lock = threading.Lock()

    def _exec(self, sql: str, args: tuple = ()) -> list[tuple]:
        with self._lock:
            try:
                return self._conn.execute(sql, args).fetchall()
            except sqlite3.Error as exc:
                raise VqpuError(STORE_ERROR, f"store write failed: {exc}") from exc

    def put_task(self, rec: TaskRecord) -> None:
        self._exec(
            "INSERT OR REPLACE INTO tasks (task_id, body) VALUES (?, ?)",
            (rec.task_id, json.dumps(rec.to_dict(), separators=(",", ":"))),
        )

    def load_tasks(self) -> list[TaskRecord]:
        return [TaskRecord.from_dict(json.loads(b)) for (b,) in self._exec("SELECT body FROM tasks")]

    def add_audit(self, entry: AuditEntry) -> None:
        self._exec("INSERT INTO audit (body) VALUES (?)", (json.dumps(entry.to_dict()),))

    def load_audit(self) -> list[AuditEntry]:
        return [AuditEntry(**json.loads(b)) for (b,) in self._exec("SELECT body FROM audit ORDER BY id")]

    def put_device(self, snapshot: DeviceSnapshot) -> None:
        self._exec(
            "INSERT OR REPLACE INTO devices (device_id, version, body, deleted) VALUES (?, ?, ?, 0)",
            (snapshot.device_id, snapshot.snapshot_version, snapshot.canonical_json().decode()),
        )

    def delete_device(self, device_id: str) -> None:
        self._exec("UPDATE devices SET deleted = 1 WHERE device_id = ?", (device_id,))

    def load_devices(self) -> list[tuple[DeviceSnapshot, bool]]:
        rows = self._exec("SELECT body, deleted FROM devices ORDER BY device_id, version")
        return [(DeviceSnapshot.from_json(b), bool(d)) for b, d in rows]

    def close(self) -> None:
        with self._lock:
            self._conn.close()


def new_task_id() -> str:
    return uuid.uuid4().hex


class TaskStore:
    """In-memory authoritative task table with optional write-through persistence."""

    def __init__(
        self,
        events: EventLog | None = None,
        db: Database | None = None,
        clock: Callable[[], datetime] = utcnow,
    ) -> None:
        self.lock = threading.RLock()
        self.events = events or EventLog()
        self.db = db
        self.clock = clock
        self._tasks: dict[str, TaskRecord] = {}
        self._queue: list[tuple[datetime, str]] = []
        self._audit: list[AuditEntry] = []
        self._last_created: datetime | None = None
        if db is not None:
            for rec in db.load_tasks():
                self._tasks[rec.task_id] = rec
                if rec.state == QUEUED:
                    heapq.heappush(self._queue, (rec.created_at, rec.task_id))
                if self._last_created is None or rec.created_at > self._last_created:
                    self._last_created = rec.created_at
            self._audit = db.load_audit()

    # -- helpers -------------------------------------------------------

    def _persist(self, rec: TaskRecord) -> None:
        if self.db is not None:
            self.db.put_task(rec)

    def _get(self, task_id: str) -> TaskRecord:
        rec = self._tasks.get(task_id)
        if rec is None:
            raise VqpuError(UNKNOWN_TASK, f"unknown task {task_id}", {"task_id": task_id})
        return rec

    def _commit(self, old: TaskRecord, new: TaskRecord, event_type: str, now: datetime, payload: dict) -> TaskRecord:
        if old.state != new.state and (old.state, new.state) not in EDGES:
            raise AssertionError(f"illegal edge {old.state}->{new.state}")
        self._persist(new)
        self._tasks[new.task_id] = new
        self.events.append(
            event_type,
            timestamp=now,
            task_id=new.task_id,
            device_id=new.device_id,
            payload={"from_state": old.state, "state": new.state, **payload},
        )
        return new

    def _illegal(self, rec: TaskRecord, attempted: str) -> VqpuError:
        return VqpuError(
            ILLEGAL_TRANSITION,
            f"cannot {attempted} task in state {rec.state}",
            {"task_id": rec.task_id, "state": rec.state, "attempted": attempted},
        )

    def _now(self) -> datetime:
        return self.clock()

    # -- operations ----------------------------------------------------

    def enqueue(
        self,
        *,
        circuit_source: str,
        dialect: str,
        shots: int,
        device_id: str,
        seed: int | None = None,
        submitted_by: str | None = None,
        task_id: str | None = None,
    ) -> TaskRecord:
        with self.lock:
            now = self._now()
            created = now
            if self._last_created is not None and created <= self._last_created:
                created = self._last_created + timedelta(microseconds=1)
            rec = TaskRecord(
                task_id=task_id or new_task_id(),
                circuit_source=circuit_source,
                dialect=dialect,
                shots=int(shots),
                device_id=device_id,
                seed=seed if seed is not None else secrets.randbits(64),
                created_at=created,
                submitted_by=submitted_by,
            )
            self._persist(rec)
            self._last_created = created
            self._tasks[rec.task_id] = rec
            heapq.heappush(self._queue, (created, rec.task_id))
            self.events.append(
                TASK_QUEUED,
                timestamp=now,
                task_id=rec.task_id,
                device_id=device_id,
                payload={"from_state": None, "state": QUEUED, "shots": rec.shots},
            )
            return rec

    def claim(
        self, agent_id: str, snapshot_provider: Callable[[str], DeviceSnapshot | None]
    ) -> tuple[TaskRecord, DeviceSnapshot] | None:
        """Grant the oldest QUEUED task to ``agent_id`` and bind its snapshot.

        ``snapshot_provider`` must read the authoritative device store; it is
        called inside the serialization boundary. A task whose device no
        longer exists fails with DEVICE_UNAVAILABLE and the next one is tried.
        """
        if not agent_id:
            raise VqpuError(NOT_OWNER, "agent identity required")
        with self.lock:
            while self._queue:
                _, task_id = heapq.heappop(self._queue)
                rec = self._tasks.get(task_id)
                if rec is None or rec.state != QUEUED:
                    continue  # stale heap entry
                now = self._now()
                snapshot = snapshot_provider(rec.device_id)
                if snapshot is None:
                    err = ErrorEnvelope(
                        DEVICE_UNAVAILABLE,
                        f"device {rec.device_id} no longer exists",
                        {"device_id": rec.device_id},
                    )
                    new = replace(rec, state=FAILED, error=err, terminal_at=now)
                    self._commit(rec, new, TASK_FAILED, now, {"code": DEVICE_UNAVAILABLE})
                    continue
                new = replace(
                    rec,
                    state=RUNNING,
                    owner=agent_id,
                    claimed_at=now,
                    bound_snapshot=snapshot,
                    last_heartbeat_at=now,
                )
                self._commit(
                    rec, new, TASK_RUNNING, now, {"owner": agent_id, "snapshot_version": snapshot.snapshot_version}
                )
                return new, snapshot
            return None

    def report_running(self, task_id: str, agent_id: str, scheduler_job_id: str) -> TaskRecord:
        with self.lock:
            rec = self._get(task_id)
            if rec.state != RUNNING:
                raise self._illegal(rec, "report running on")
            if rec.owner != agent_id:
                raise VqpuError(NOT_OWNER, f"task {task_id} is not owned by {agent_id}", {"task_id": task_id})
            new = replace(rec, scheduler_job_id=scheduler_job_id, last_heartbeat_at=self._now())
            self._persist(new)
            self._tasks[task_id] = new
            return new

    def report_terminal(
        self,
        task_id: str,
        agent_id: str,
        *,
        result: dict[str, Any] | None = None,
        error: ErrorEnvelope | None = None,
    ) -> TaskRecord:
        if (result is None) == (error is None):
            raise ValueError("exactly one of result and error is required")
        attempted = "complete" if result is not None else "fail"
        with self.lock:
            rec = self._get(task_id)
            if rec.state != RUNNING or rec.owner != agent_id:
                code = ILLEGAL_TRANSITION if rec.state != RUNNING else NOT_OWNER
                self._record_audit(rec, agent_id, attempted, code)
                if code == ILLEGAL_TRANSITION:
                    raise self._illegal(rec, attempted)
                raise VqpuError(NOT_OWNER, f"task {task_id} is not owned by {agent_id}", {"task_id": task_id})
            now = self._now()
            if result is not None:
                new = replace(rec, state=COMPLETED, result=result, terminal_at=now)
                return self._commit(rec, new, TASK_COMPLETED, now, {"owner": agent_id})
            new = replace(rec, state=FAILED, error=error, terminal_at=now)
            return self._commit(rec, new, TASK_FAILED, now, {"owner": agent_id, "code": error.code})

    def _record_audit(self, rec: TaskRecord, agent_id: str, attempted: str, code: str) -> None:
        entry = AuditEntry(rec.task_id, agent_id, attempted, code, rec.state, isoformat(self._now()))
        if self.db is not None:
            self.db.add_audit(entry)
        self._audit.append(entry)

    def heartbeat(self, agent_id: str, task_ids: Iterable[str]) -> dict[str, str]:
        acks: dict[str, str] = {}
        with self.lock:
            now = self._now()
            for task_id in task_ids:
                rec = self._tasks.get(task_id)
                if rec is None:
                    acks[task_id] = UNKNOWN_TASK
                elif rec.state != RUNNING:
                    acks[task_id] = ILLEGAL_TRANSITION
                elif rec.owner != agent_id:
                    acks[task_id] = NOT_OWNER
                else:
                    new = replace(rec, last_heartbeat_at=now)
                    self._persist(new)
                    self._tasks[task_id] = new
                    acks[task_id] = ACK_OK
        return acks

    def requeue(self, task_id: str, admin: str) -> TaskRecord:
        with self.lock:
            rec = self._get(task_id)
            if rec.state != RUNNING:
                raise self._illegal(rec, "requeue")
            now = self._now()
            new = replace(
                rec,
                state=QUEUED,
                owner=None,
                bound_snapshot=None,
                claimed_at=None,
                scheduler_job_id=None,
                last_heartbeat_at=None,
            )
            self._commit(rec, new, TASK_REQUEUED, now, {"previous_owner": rec.owner, "by": admin})
            heapq.heappush(self._queue, (new.created_at, task_id))
            return new

    def cancel(self, task_id: str, caller: str, *, is_admin: bool = False) -> TaskRecord:
        with self.lock:
            rec = self._get(task_id)
            if not is_admin and rec.submitted_by is not None and rec.submitted_by != caller:
                raise VqpuError(NOT_OWNER, "only the submitter or an admin may cancel", {"task_id": task_id})
            if rec.is_terminal:
                raise self._illegal(rec, "cancel")
            now = self._now()
            new = replace(rec, state=CANCELLED, terminal_at=now)
            return self._commit(rec, new, TASK_CANCELLED, now, {"by": caller})

    def force_fail(self, task_id: str, admin: str, envelope: ErrorEnvelope) -> TaskRecord:
        with self.lock:
            rec = self._get(task_id)
            if rec.is_terminal:
                raise self._illegal(rec, "force-fail")
            now = self._now()
            new = replace(rec, state=FAILED, error=envelope, terminal_at=now)
            return self._commit(rec, new, TASK_FAILED, now, {"by": admin, "code": envelope.code})

    # -- queries -------------------------------------------------------

    def get(self, task_id: str) -> TaskRecord:
        with self.lock:
            return self._get(task_id)

    def list(
        self, *, state: str | None = None, device_id: str | None = None, owner: str | None = None
    ) -> list[TaskRecord]:
        with self.lock:
            recs = list(self._tasks.values())
        out = [
            r
            for r in recs
            if (state is None or r.state == state)
            and (device_id is None or r.device_id == device_id)
            and (owner is None or r.owner == owner)
        ]
        return sorted(out, key=lambda r: (r.created_at, r.task_id))

    def stale(self, liveness_window_s: float, now: datetime | None = None) -> list[TaskRecord]:
        now = now or self._now()
        window = timedelta(seconds=liveness_window_s)
        return [
            r
            for r in self.list(state=RUNNING)
            if r.last_heartbeat_at is not None and now - r.last_heartbeat_at > window
        ]

    def audit_log(self) -> list[AuditEntry]:
        with self.lock:
            return list(self._audit)

    def __len__(self) -> int:
        return len(self._tasks)

    def __iter__(self) -> Iterator[TaskRecord]:
        with self.lock:
            return iter(list(self._tasks.values()))


def replay_states(events: Iterable[LifecycleEvent]) -> dict[str, list[str]]:
    """State history per task reconstructed purely from the event stream."""
    history: dict[str, list[str]] = {}
    for ev in events:
        if ev.task_id is None or ev.event_type not in STATE_AFTER_EVENT:
            continue
        history.setdefault(ev.task_id, []).append(STATE_AFTER_EVENT[ev.event_type])
    return history
