"""Local-process backend: runs jobs as child processes with a slot limit."""

from __future__ import annotations

import itertools
import os
import subprocess
import threading
import time
from collections import deque
from dataclasses import dataclass

from ..errors import SUBMIT_REJECTED, UNKNOWN_JOB, VqpuError
from ..rundir import RESULT_FILE
from .base import COMPLETED, FAILED, STILL_ACTIVE, RenderedJob, TerminalRecord, pid_alive, spawn


@dataclass
class _Job:
    job: RenderedJob
    proc: subprocess.Popen | None = None
    adopted_pid: int | None = None
    started_at: float | None = None


class LocalBackend:
    def __init__(self, max_slots: int = 2, poll_s: float = 0.02) -> None:
        if max_slots < 1:
            raise VqpuError(SUBMIT_REJECTED, "max_slots must be positive")
        self.max_slots = max_slots
        self.poll_s = poll_s
        self._lock = threading.Lock()
        self._pending: deque[str] = deque()
        self._running: dict[str, _Job] = {}
        self._jobs: dict[str, _Job] = {}
        self._terminal: dict[str, TerminalRecord] = {}
        self._ids = itertools.count(1)
        self._prefix = f"local-{os.getpid()}-{int(time.time())}"
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, name="local-backend", daemon=True)
        self._thread.start()

    def submit(self, job: RenderedJob) -> str:
        if not os.path.isdir(job.run_directory):
            raise VqpuError(SUBMIT_REJECTED, f"run directory {job.run_directory} does not exist")
        with self._lock:
            job_id = f"{self._prefix}-{next(self._ids)}"
            self._jobs[job_id] = _Job(job)
            self._pending.append(job_id)
            self._tick()
        return job_id

    def adopt(self, job_id: str, run_directory: str, pid: int) -> bool:
        """Resume observing a runner started by a previous agent process."""
        if not pid_alive(pid, run_directory):
            return False
        with self._lock:
            entry = _Job(RenderedJob(job_id, run_directory, ()), adopted_pid=pid, started_at=time.time())
            self._jobs[job_id] = entry
            self._running[job_id] = entry
        return True

    def pid_of(self, job_id: str) -> int | None:
        entry = self._jobs.get(job_id)
        if entry is None:
            return None
        return entry.proc.pid if entry.proc else entry.adopted_pid

    def observe_active(self) -> set[str]:
        with self._lock:
            self._tick()
            return set(self._pending) | set(self._running)

    def query_terminal(self, job_id: str) -> TerminalRecord | str:
        with self._lock:
            if job_id in self._terminal:
                return self._terminal[job_id]
            if job_id in self._jobs:
                return STILL_ACTIVE
        raise VqpuError(UNKNOWN_JOB, f"unknown job {job_id}", {"job_id": job_id})

    def _tick(self) -> None:
        now = time.time()
        for job_id, entry in list(self._running.items()):
            if entry.proc is not None:
                code = entry.proc.poll()
                if code is None:
                    continue
                exit_class = COMPLETED if code == 0 else FAILED
                detail = f"exit code {code}"
            else:
                if pid_alive(entry.adopted_pid, entry.job.run_directory):
                    continue
                # not our child, so the exit status is gone; artifacts decide
                ok = os.path.exists(os.path.join(entry.job.run_directory, RESULT_FILE))
                exit_class = COMPLETED if ok else FAILED
                detail = "adopted process exited"
            del self._running[job_id]
            self._terminal[job_id] = TerminalRecord(job_id, exit_class, detail, entry.started_at, now)
        while self._pending and len(self._running) < self.max_slots:
            job_id = self._pending.popleft()
            entry = self._jobs[job_id]
            try:
                entry.proc = spawn(entry.job)
            except OSError as exc:
                self._terminal[job_id] = TerminalRecord(job_id, FAILED, f"spawn failed: {exc}", None, now)
                continue
            entry.started_at = now
            self._running[job_id] = entry

    def _loop(self) -> None:
        while not self._stop.wait(self.poll_s):
            with self._lock:
                self._tick()

    def close(self) -> None:
        self._stop.set()
        self._thread.join(timeout=2)
