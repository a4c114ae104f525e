"""Execution-plane reconciliation controller.

Three independent loops share one owned-task table:

* acquisition: claim while a slot is free, materialise the run directory,
  submit the job, report the scheduler job id;
* heartbeat: periodically assert ownership of every owned task;
* finalisation: when a job leaves the active set, classify its artifacts and
  publish exactly one terminal outcome.

The table is only a cache. On start the agent rebuilds it from the server's
view of its RUNNING tasks plus local run directories.
"""

from __future__ import annotations

import json
import logging
import os
import random
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import httpx

from ..client import ApiError, Client
from ..errors import (
    ARTIFACT_MALFORMED,
    ARTIFACT_MISSING,
    ILLEGAL_TRANSITION,
    JOB_KILLED,
    JOB_NEVER_STARTED,
    NOT_OWNER,
    RUNNER_EXCEPTION,
    SUBMIT_REJECTED,
    UNKNOWN_TASK,
    ErrorEnvelope,
    VqpuError,
    isoformat,
    utcnow,
)
from ..rundir import (
    ERROR_FILE,
    META_FILE,
    PAYLOAD_FILE,
    RESULT_FILE,
    TIMINGS_FILE,
    ExecutionPayload,
    check_result,
    dump_json,
    write_atomic,
)
from ..scheduler import KILLED, NEVER_STARTED, STILL_ACTIVE, SchedulerBackend, TerminalRecord, make_backend, render_job
from .config import AgentConfig

log = logging.getLogger("vqpu.agent")

FINALISED_FILE = "finalised.json"

# owned-task statuses
ACTIVE = "active"  # job submitted (or adopted) and being observed
ORPHANED = "orphaned"  # owned on the server, no local evidence: heartbeat only
ABANDONED = "abandoned"  # ownership lost; wait for the job to drain, publish nothing


@dataclass
class OwnedTask:
    task_id: str
    run_dir: Path
    status: str
    payload: ExecutionPayload | None = None
    job_id: str | None = None
    outcome: tuple[str, dict[str, Any]] | None = None  # cached once classified


class Backoff:
    """Exponential backoff with multiplicative jitter."""

    def __init__(self, base: float = 1.0, cap: float = 60.0, jitter: float = 0.2) -> None:
        self.base, self.cap, self.jitter = base, cap, jitter
        self.attempt = 0

    def next_delay(self) -> float:
        delay = min(self.cap, self.base * (2**self.attempt))
        self.attempt += 1
        return delay * random.uniform(1 - self.jitter, 1 + self.jitter)

    def reset(self) -> None:
        self.attempt = 0


def classify(run_dir: Path, payload: ExecutionPayload, terminal: TerminalRecord | None) -> tuple[str, dict[str, Any]]:
    """Turn run-directory evidence into ("completed", result) or ("failed", envelope)."""
    scheduler = terminal.to_dict() if terminal else None
    result_path = run_dir / RESULT_FILE
    if result_path.exists():
        try:
            data = json.loads(result_path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            data, reason = None, f"unreadable result artifact: {exc}"
        else:
            reason = check_result(data, payload)
        if reason is None:
            result = dict(data)
            try:
                result["timings"] = json.loads((run_dir / TIMINGS_FILE).read_text(encoding="utf-8"))
            except (OSError, ValueError):
                result["timings"] = None
            result["scheduler"] = scheduler
            return "completed", result
        env = ErrorEnvelope(ARTIFACT_MALFORMED, reason, {"scheduler": scheduler})
        return "failed", env.to_dict()
    error_path = run_dir / ERROR_FILE
    if error_path.exists():
        try:
            runner_error = json.loads(error_path.read_text(encoding="utf-8"))
            message = f"runner failed: {runner_error.get('code')}: {runner_error.get('message')}"
        except (OSError, ValueError, AttributeError) as exc:
            runner_error, message = None, f"runner failed with unreadable error artifact: {exc}"
        env = ErrorEnvelope(RUNNER_EXCEPTION, message, {"runner_error": runner_error, "scheduler": scheduler})
        return "failed", env.to_dict()
    if terminal is not None and terminal.exit_class == KILLED:
        env = ErrorEnvelope(JOB_KILLED, f"job killed: {terminal.exit_detail}", {"scheduler": scheduler})
    elif terminal is not None and terminal.exit_class == NEVER_STARTED:
        env = ErrorEnvelope(JOB_NEVER_STARTED, "scheduler job never started", {"scheduler": scheduler})
    else:
        env = ErrorEnvelope(ARTIFACT_MISSING, "job ended without a result artifact", {"scheduler": scheduler})
    return "failed", env.to_dict()


def prepare_run_dir(work_dir: Path, task_id: str) -> Path:
    """Fresh directory for a claim; an earlier attempt's directory is archived."""
    run_dir = work_dir / task_id
    if run_dir.exists():
        k = 1
        while (work_dir / f"{task_id}.attempt-{k}").exists():
            k += 1
        os.replace(run_dir, work_dir / f"{task_id}.attempt-{k}")
    run_dir.mkdir(parents=True)
    return run_dir


def _read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError):
        return None


NETWORK_ERRORS = (httpx.TransportError, httpx.TimeoutException)


class Agent:
    def __init__(
        self,
        config: AgentConfig,
        *,
        client: Client | None = None,
        backend: SchedulerBackend | None = None,
    ) -> None:
        self.config = config
        self.client = client or Client(config.server_url, config.api_key, timeout=config.request_timeout_s)
        self.backend = backend or make_backend(config.backend, config.max_slots, name=f"sim-{config.agent_id}")
        self.work_dir = Path(config.work_dir)
        self.work_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._slot_freed = threading.Condition(self._lock)
        self._owned: dict[str, OwnedTask] = {}
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self.recovered = threading.Event()
        self.stats = {"claims": 0, "completed": 0, "failed": 0, "absorbed": 0, "abandoned": 0}

    # -- lifecycle -----------------------------------------------------

    def start(self) -> None:
        for name, target in (
            ("acquisition", self._acquisition_main),
            ("heartbeat", self._heartbeat_loop),
            ("finalisation", self._finalisation_loop),
        ):
            t = threading.Thread(target=self._guard, args=(name, target), name=f"agent-{name}", daemon=True)
            t.start()
            self._threads.append(t)

    def stop(self, timeout: float = 5.0) -> None:
        self._stop.set()
        with self._slot_freed:
            self._slot_freed.notify_all()
        for t in self._threads:
            t.join(timeout)
        self.backend.close()
        self.client.close()

    def wait(self) -> None:
        while not self._stop.wait(1.0):
            pass

    def _guard(self, name: str, target) -> None:
        # a crashing loop restarts instead of halting the other two
        while not self._stop.is_set():
            try:
                target()
                return
            except Exception:
                log.exception("%s loop crashed; restarting", name)
                self._stop.wait(1.0)

    def owned(self) -> dict[str, str]:
        with self._lock:
            return {t.task_id: t.status for t in self._owned.values()}

    def _unfinalised(self) -> int:
        return len(self._owned)

    # -- acquisition ---------------------------------------------------

    def _acquisition_main(self) -> None:
        if not self.recovered.is_set():
            self.recover_on_restart()
        self._acquisition_loop()

    def _acquisition_loop(self) -> None:
        backoff = Backoff(self.config.backoff_base_s, self.config.backoff_cap_s)
        while not self._stop.is_set():
            with self._slot_freed:
                while self._unfinalised() >= self.config.max_slots and not self._stop.is_set():
                    self._slot_freed.wait(1.0)
            if self._stop.is_set():
                return
            try:
                grant = self.client.claim(self.config.agent_id, wait_s=self.config.claim_wait_s)
            except (ApiError, *NETWORK_ERRORS) as exc:
                delay = backoff.next_delay()
                log.warning("claim failed (%s); retrying in %.1fs", exc, delay)
                self._stop.wait(delay)
                continue
            backoff.reset()
            if grant is None:
                self._stop.wait(self.config.poll_interval_s if self.config.claim_wait_s == 0 else 0.0)
                continue
            self.stats["claims"] += 1
            self._launch(grant)

    def _launch(self, grant: dict[str, Any]) -> None:
        payload = ExecutionPayload.from_dict(grant["payload"])
        run_dir = prepare_run_dir(self.work_dir, payload.task_id)
        write_atomic(run_dir / PAYLOAD_FILE, payload.canonical_json())
        task = OwnedTask(payload.task_id, run_dir, ACTIVE, payload)
        with self._lock:
            self._owned[task.task_id] = task
        try:
            job_id = self.backend.submit(render_job(payload.task_id, run_dir))
        except VqpuError as exc:
            env = ErrorEnvelope(SUBMIT_REJECTED, exc.message, {"task_id": task.task_id})
            task.outcome = ("failed", env.to_dict())
            return  # finalisation publishes the failure
        task.job_id = job_id
        write_atomic(run_dir / META_FILE, dump_json({"scheduler_job_id": job_id, "submitted_at": isoformat(utcnow())}))
        self._report_running(task)

    def _report_running(self, task: OwnedTask) -> None:
        backoff = Backoff(self.config.backoff_base_s, self.config.backoff_cap_s)
        while not self._stop.is_set():
            try:
                self.client.report_running(task.task_id, self.config.agent_id, task.job_id)
                return
            except ApiError as exc:
                if exc.code in (NOT_OWNER, ILLEGAL_TRANSITION, UNKNOWN_TASK):
                    self._abandon(task, exc.code)
                    return
                delay = backoff.next_delay()
            except NETWORK_ERRORS:
                delay = backoff.next_delay()
            self._stop.wait(delay)

    def _abandon(self, task: OwnedTask, reason: str) -> None:
        log.info("abandoning %s (%s)", task.task_id, reason)
        with self._slot_freed:
            if task.job_id is None or task.status == ORPHANED:
                self._owned.pop(task.task_id, None)
                self._slot_freed.notify_all()
            else:
                task.status = ABANDONED
        self.stats["abandoned"] += 1

    # -- heartbeat -----------------------------------------------------

    def _heartbeat_loop(self) -> None:
        while not self._stop.is_set():
            self.heartbeat_once()
            self._stop.wait(self.config.heartbeat_interval_s)

    def heartbeat_once(self) -> dict[str, str] | None:
        with self._lock:
            tasks = [t for t in self._owned.values() if t.status != ABANDONED]
        try:
            acks = self.client.heartbeat(self.config.agent_id, [t.task_id for t in tasks])
        except (ApiError, *NETWORK_ERRORS) as exc:
            log.warning("heartbeat failed: %s", exc)
            return None
        for t in tasks:
            ack = acks.get(t.task_id)
            if ack in (NOT_OWNER, ILLEGAL_TRANSITION, UNKNOWN_TASK) and t.outcome is None:
                self._abandon(t, ack)
        return acks

    # -- finalisation --------------------------------------------------

    def _finalisation_loop(self) -> None:
        while not self._stop.is_set():
            self.finalise_once()
            self._stop.wait(self.config.finalise_interval_s)

    def finalise_once(self) -> None:
        with self._lock:
            tasks = list(self._owned.values())
        for task in tasks:
            if task.status == ORPHANED:
                continue
            if task.outcome is None:
                if task.job_id is None:
                    continue  # still being submitted
                term = self.backend.query_terminal(task.job_id)
                if term == STILL_ACTIVE:
                    self._note_pid(task)
                    continue
                if task.status == ABANDONED:
                    self._drop(task)
                    continue
                task.outcome = classify(task.run_dir, task.payload, term)
            self._publish(task)

    def _note_pid(self, task: OwnedTask) -> None:
        pid_of = getattr(self.backend, "pid_of", None)
        pid = pid_of(task.job_id) if pid_of else None
        if pid is None:
            return
        meta_path = task.run_dir / META_FILE
        meta = _read_json(meta_path) or {}
        if meta.get("pid") != pid:
            meta.update({"scheduler_job_id": task.job_id, "pid": pid})
            write_atomic(meta_path, dump_json(meta))

    def _publish(self, task: OwnedTask) -> None:
        kind, body = task.outcome
        try:
            if kind == "completed":
                self.client.report_completed(task.task_id, self.config.agent_id, body)
            else:
                self.client.report_failed(task.task_id, self.config.agent_id, body)
            self.stats[kind] += 1
        except ApiError as exc:
            if exc.code in (NOT_OWNER, ILLEGAL_TRANSITION, UNKNOWN_TASK):
                # someone else already decided this task; absorb
                self.stats["absorbed"] += 1
            else:
                log.warning("publishing %s failed: %s; will retry", task.task_id, exc)
                return
        except NETWORK_ERRORS as exc:
            log.warning("publishing %s failed: %s; will retry", task.task_id, exc)
            return
        write_atomic(
            task.run_dir / FINALISED_FILE,
            dump_json({"outcome": kind, "finalised_at": isoformat(utcnow())}),
        )
        self._drop(task)

    def _drop(self, task: OwnedTask) -> None:
        with self._slot_freed:
            self._owned.pop(task.task_id, None)
            self._slot_freed.notify_all()

    # -- restart recovery ----------------------------------------------

    def recover_on_restart(self) -> None:
        """Rebuild the owned table from the server plus local evidence.

        Never requeues or fails anything on its own: tasks without evidence
        are only heartbeated, leaving recovery to an administrator.
        """
        backoff = Backoff(self.config.backoff_base_s, self.config.backoff_cap_s)
        while not self._stop.is_set():
            try:
                records = self.client.list_tasks(state="RUNNING", owner=self.config.agent_id)
                break
            except (ApiError, *NETWORK_ERRORS) as exc:
                delay = backoff.next_delay()
                log.warning("recovery query failed (%s); retrying in %.1fs", exc, delay)
                self._stop.wait(delay)
        else:
            return
        for rec in records:
            task = self._recover_one(rec)
            with self._lock:
                self._owned[task.task_id] = task
            if task.outcome is not None:
                self._publish(task)
        self.recovered.set()

    def _recover_one(self, rec: dict[str, Any]) -> OwnedTask:
        task_id = rec["task_id"]
        run_dir = self.work_dir / task_id
        try:
            payload = ExecutionPayload.load(run_dir)
        except VqpuError:
            payload = None
        if payload is None or payload.claimed_at != rec.get("claimed_at"):
            return OwnedTask(task_id, run_dir, ORPHANED)
        task = OwnedTask(task_id, run_dir, ACTIVE, payload)
        meta = _read_json(run_dir / META_FILE) or {}
        task.job_id = meta.get("scheduler_job_id")
        if (run_dir / RESULT_FILE).exists() or (run_dir / ERROR_FILE).exists():
            task.outcome = classify(run_dir, payload, None)
            return task
        pid = meta.get("pid")
        if task.job_id and pid and self.backend.adopt(task.job_id, str(run_dir), int(pid)):
            return task
        task.status = ORPHANED
        return task
