"""The scheduler boundary: submit, observe_active, query_terminal."""

from __future__ import annotations

import os
import signal
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

COMPLETED = "COMPLETED"
FAILED = "FAILED"
NEVER_STARTED = "NEVER_STARTED"
KILLED = "KILLED"
EXIT_CLASSES = (COMPLETED, FAILED, NEVER_STARTED, KILLED)

STILL_ACTIVE = "STILL_ACTIVE"


@dataclass(frozen=True)
class RenderedJob:
    job_name: str
    run_directory: str
    command: tuple[str, ...]
    resource_hint: dict[str, int] = field(default_factory=lambda: {"slots": 1})


@dataclass(frozen=True)
class TerminalRecord:
    job_id: str
    exit_class: str
    exit_detail: str = ""
    started_at: float | None = None
    ended_at: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


class SchedulerBackend(Protocol):
    def submit(self, job: RenderedJob) -> str: ...

    def observe_active(self) -> set[str]: ...

    def query_terminal(self, job_id: str) -> TerminalRecord | str: ...

    def adopt(self, job_id: str, run_directory: str, pid: int) -> bool: ...

    def close(self) -> None: ...


def runner_command(run_directory: str | os.PathLike) -> tuple[str, ...]:
    return (sys.executable, "-m", "vqpu.runner", os.fspath(run_directory))


def render_job(task_id: str, run_directory: str | os.PathLike) -> RenderedJob:
    return RenderedJob(f"vqpu-{task_id}", os.fspath(run_directory), runner_command(run_directory))


def spawn(job: RenderedJob) -> subprocess.Popen:
    """Start the runner in its own session, logging to the run directory."""
    log = open(Path(job.run_directory, "runner.log"), "ab")
    try:
        return subprocess.Popen(
            list(job.command),
            cwd=job.run_directory,
            stdin=subprocess.DEVNULL,
            stdout=log,
            stderr=subprocess.STDOUT,
            start_new_session=True,
        )
    finally:
        log.close()


def kill(proc: subprocess.Popen) -> None:
    if proc.poll() is None:
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except (ProcessLookupError, PermissionError):
            proc.kill()
        proc.wait()


def pid_alive(pid: int, run_directory: str) -> bool:
    """True if ``pid`` is a live runner process for ``run_directory``."""
    try:
        with open(f"/proc/{pid}/cmdline", "rb") as fh:
            argv = fh.read().split(b"\0")
        with open(f"/proc/{pid}/stat", "rb") as fh:
            state = fh.read().rsplit(b")", 1)[1].split()[0]
    except OSError:
        return False
    return state != b"Z" and os.fsencode(run_directory) in argv
