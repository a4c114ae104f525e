"""Deterministic simulated batch scheduler with queue delay, capacity, and faults.

Two clock modes share one state machine:

* ``wall``: a background thread advances on real time and each started job
  spawns the real runner process. A job ends at the later of process exit
  and ``start + run_duration``.
* ``virtual``: time moves only through :meth:`advance`. The runner is invoked
  in-process at start time, so the full (job_id, start, end, exit_class)
  trace is reproducible for a given seed and plan.

Faults: ``NEVER_START`` ends the job at its eligibility time without running
anything; ``KILL_AFTER`` kills the job ``duration`` seconds after start and
discards whatever it wrote (the node is treated as lost); ``LOSE_ARTIFACT``
lets the job finish and then deletes ``result.json``.
"""

from __future__ import annotations

import fnmatch
import os
import subprocess
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from ..errors import SUBMIT_REJECTED, UNKNOWN_JOB, VqpuError
from ..rundir import RESULT_FILE, TIMINGS_FILE
from .base import (
    COMPLETED,
    FAILED,
    KILLED,
    NEVER_STARTED,
    STILL_ACTIVE,
    RenderedJob,
    TerminalRecord,
    kill,
    pid_alive,
    spawn,
)

NEVER_START = "NEVER_START"
KILL_AFTER = "KILL_AFTER"
LOSE_ARTIFACT = "LOSE_ARTIFACT"
FAULTS = (NEVER_START, KILL_AFTER, LOSE_ARTIFACT)


@dataclass(frozen=True)
class Delay:
    """``fixed`` uses ``value``; ``uniform`` draws from [lo, hi]."""

    kind: str = "fixed"
    value: float = 0.0
    lo: float = 0.0
    hi: float = 0.0

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "fixed":
            return self.value
        return float(rng.uniform(self.lo, self.hi))

    @classmethod
    def parse(cls, raw: Any) -> Delay:
        if raw is None:
            return cls()
        if isinstance(raw, (int, float)):
            return cls("fixed", float(raw))
        kind = raw.get("kind", "fixed")
        if kind == "fixed":
            return cls("fixed", float(raw.get("value", 0.0)))
        if kind == "uniform":
            lo, hi = float(raw["lo"]), float(raw["hi"])
            if hi < lo:
                raise ValueError("uniform delay needs lo <= hi")
            return cls("uniform", lo=lo, hi=hi)
        raise ValueError(f"unknown delay kind {kind!r}")


@dataclass(frozen=True)
class Injection:
    fault: str
    ordinal: int | None = None  # 1-based submission ordinal
    pattern: str | None = None  # fnmatch pattern on job_name
    duration: float = 0.0  # for KILL_AFTER

    def matches(self, ordinal: int, job_name: str) -> bool:
        if self.ordinal is not None and self.ordinal != ordinal:
            return False
        if self.pattern is not None and not fnmatch.fnmatchcase(job_name, self.pattern):
            return False
        return self.ordinal is not None or self.pattern is not None

    @classmethod
    def parse(cls, raw: dict[str, Any]) -> Injection:
        fault = raw["fault"]
        if fault not in FAULTS:
            raise ValueError(f"unknown fault {fault!r}")
        match = raw.get("match", {})
        if isinstance(match, int):
            match = {"ordinal": match}
        elif isinstance(match, str):
            match = {"pattern": match}
        return cls(fault, match.get("ordinal"), match.get("pattern"), float(raw.get("duration", 0.0)))


@dataclass(frozen=True)
class FaultPlan:
    queue_delay: Delay = field(default_factory=Delay)
    run_duration: Delay = field(default_factory=Delay)
    capacity: int = 2
    injections: tuple[Injection, ...] = ()
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict[str, Any] | None) -> FaultPlan:
        d = d or {}
        capacity = int(d.get("capacity", 2))
        if capacity < 1:
            raise ValueError("capacity must be positive")
        return cls(
            Delay.parse(d.get("queue_delay")),
            Delay.parse(d.get("run_duration")),
            capacity,
            tuple(Injection.parse(i) for i in d.get("injections", [])),
            int(d.get("seed", 0)),
        )


@dataclass
class _Job:
    job_id: str
    ordinal: int
    job: RenderedJob
    submitted_at: float
    eligible_at: float
    run_duration: float
    fault: Injection | None
    started_at: float | None = None
    proc: subprocess.Popen | None = None
    adopted_pid: int | None = None
    exit_code: int | None = None  # virtual mode: known at start


Executor = Callable[[RenderedJob], int]


def _default_executor(job: RenderedJob) -> int:
    from ..runner import execute

    return execute(job.run_directory)


class SimulatedScheduler:
    def __init__(
        self,
        plan: FaultPlan | None = None,
        *,
        mode: str = "wall",
        executor: Executor | None = None,
        poll_s: float = 0.02,
        name: str = "sim",
    ) -> None:
        if mode not in ("wall", "virtual"):
            raise ValueError(f"unknown mode {mode!r}")
        self.plan = plan or FaultPlan()
        self.mode = mode
        self.executor = executor or _default_executor
        self.name = name
        self._rng = np.random.default_rng(self.plan.seed)
        self._lock = threading.RLock()
        self._ordinal = 0
        self._jobs: dict[str, _Job] = {}
        self._pending: list[str] = []
        self._running: dict[str, _Job] = {}
        self._terminal: dict[str, TerminalRecord] = {}
        self.trace: list[tuple[str, float | None, float | None, str]] = []
        self.max_running_seen = 0
        self._vnow = 0.0
        self._stop = threading.Event()
        self._thread = None
        if mode == "wall":
            self._thread = threading.Thread(target=self._loop, args=(poll_s,), name="sim-scheduler", daemon=True)
            self._thread.start()

    # -- clock ---------------------------------------------------------

    def now(self) -> float:
        return self._vnow if self.mode == "virtual" else time.time()

    def advance(self, seconds: float) -> None:
        """Virtual mode only: move time forward, handling every event in order."""
        if self.mode != "virtual":
            raise RuntimeError("advance() is only meaningful with the virtual clock")
        with self._lock:
            target = self._vnow + seconds
            while True:
                self._tick(self._vnow)
                upcoming = [t for t in self._event_times() if t > self._vnow]
                if not upcoming or min(upcoming) > target:
                    break
                self._vnow = min(upcoming)
            self._vnow = target
            self._tick(self._vnow)

    def _event_times(self) -> list[float]:
        times = [self._end_time(j) for j in self._running.values()]
        times += [self._jobs[i].eligible_at for i in self._pending]
        return times

    def _end_time(self, j: _Job) -> float:
        if j.fault is not None and j.fault.fault == KILL_AFTER:
            return j.started_at + min(j.fault.duration, j.run_duration)
        return j.started_at + j.run_duration

    # -- boundary operations -------------------------------------------

    def submit(self, job: RenderedJob) -> str:
        if not os.path.isdir(job.run_directory):
            raise VqpuError(SUBMIT_REJECTED, f"run directory {job.run_directory} does not exist")
        with self._lock:
            self._ordinal += 1
            ordinal = self._ordinal
            job_id = f"{self.name}-{ordinal}"
            now = self.now()
            delay = self.plan.queue_delay.sample(self._rng)
            duration = self.plan.run_duration.sample(self._rng)
            fault = next((i for i in self.plan.injections if i.matches(ordinal, job.job_name)), None)
            self._jobs[job_id] = _Job(job_id, ordinal, job, now, now + delay, duration, fault)
            self._pending.append(job_id)
            self._tick(now)
            return job_id

    def adopt(self, job_id: str, run_directory: str, pid: int) -> bool:
        if self.mode != "wall" or not pid_alive(pid, run_directory):
            return False
        with self._lock:
            j = _Job(job_id, 0, RenderedJob(job_id, run_directory, ()), self.now(), self.now(), 0.0, None)
            j.started_at = self.now()
            j.adopted_pid = pid
            self._jobs[job_id] = j
            self._running[job_id] = j
        return True

    def pid_of(self, job_id: str) -> int | None:
        j = self._jobs.get(job_id)
        if j is None:
            return None
        return j.proc.pid if j.proc else j.adopted_pid

    def observe_active(self) -> set[str]:
        with self._lock:
            if self.mode == "wall":
                self._tick(self.now())
            return set(self._pending) | set(self._running)

    def query_terminal(self, job_id: str) -> TerminalRecord | str:
        with self._lock:
            if job_id in self._terminal:
                return self._terminal[job_id]
            if job_id in self._jobs:
                return STILL_ACTIVE
        raise VqpuError(UNKNOWN_JOB, f"unknown job {job_id}", {"job_id": job_id})

    # -- state machine -------------------------------------------------

    def _finish(self, j: _Job, exit_class: str, detail: str, ended_at: float) -> None:
        self._running.pop(j.job_id, None)
        if j.job_id in self._pending:
            self._pending.remove(j.job_id)
        rec = TerminalRecord(j.job_id, exit_class, detail, j.started_at, ended_at)
        self._terminal[j.job_id] = rec
        self.trace.append((j.job_id, j.started_at, ended_at, exit_class))

    def _discard_outputs(self, j: _Job) -> None:
        for name in (RESULT_FILE, TIMINGS_FILE):
            try:
                os.unlink(os.path.join(j.job.run_directory, name))
            except FileNotFoundError:
                pass

    def _tick(self, now: float) -> None:
        # zero-length runs free their slot at the instant they start, so
        # repeat until nothing more can finish or start at this time
        while self._step(now):
            pass

    def _step(self, now: float) -> bool:
        before = (len(self._terminal), len(self._running), len(self._pending))
        for j in sorted(self._running.values(), key=lambda j: j.ordinal):
            killing = j.fault is not None and j.fault.fault == KILL_AFTER
            if killing and now >= j.started_at + j.fault.duration:
                if j.proc is not None:
                    kill(j.proc)
                self._discard_outputs(j)
                self._finish(j, KILLED, f"killed {j.fault.duration:g}s after start", now)
                continue
            if now < j.started_at + j.run_duration:
                continue
            if j.adopted_pid is not None:
                if pid_alive(j.adopted_pid, j.job.run_directory):
                    continue
                ok = os.path.exists(os.path.join(j.job.run_directory, RESULT_FILE))
                self._finish(j, COMPLETED if ok else FAILED, "adopted process exited", now)
                continue
            if j.proc is not None:
                code = j.proc.poll()
                if code is None:
                    continue
            else:
                code = j.exit_code
            if j.fault is not None and j.fault.fault == LOSE_ARTIFACT:
                self._discard_outputs(j)
            self._finish(j, COMPLETED if code == 0 else FAILED, f"exit code {code}", now)

        for job_id in list(self._pending):
            j = self._jobs[job_id]
            if now < j.eligible_at:
                continue
            if j.fault is not None and j.fault.fault == NEVER_START:
                self._finish(j, NEVER_STARTED, "job never started", now)
                continue
            if len(self._running) >= self.plan.capacity:
                break  # FIFO: later jobs wait behind this one
            self._pending.remove(job_id)
            j.started_at = now
            self._running[job_id] = j
            self.max_running_seen = max(self.max_running_seen, len(self._running))
            killed_early = j.fault is not None and j.fault.fault == KILL_AFTER and j.fault.duration < j.run_duration
            if self.mode == "wall":
                try:
                    j.proc = spawn(j.job)
                except OSError as exc:
                    self._finish(j, FAILED, f"spawn failed: {exc}", now)
            elif not killed_early:
                j.exit_code = self.executor(j.job)
        return (len(self._terminal), len(self._running), len(self._pending)) != before

    def _loop(self, poll_s: float) -> None:
        while not self._stop.wait(poll_s):
            with self._lock:
                self._tick(self.now())

    def close(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2)
