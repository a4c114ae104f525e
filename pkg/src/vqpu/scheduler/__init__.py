"""Scheduler boundary and its two backends."""

from __future__ import annotations

from typing import Any

from .base import (
    COMPLETED,
    FAILED,
    KILLED,
    NEVER_STARTED,
    STILL_ACTIVE,
    RenderedJob,
    SchedulerBackend,
    TerminalRecord,
    render_job,
)
from .local import LocalBackend
from .simulated import FaultPlan, SimulatedScheduler


def make_backend(settings: dict[str, Any] | None, max_slots: int, name: str = "sim") -> SchedulerBackend:
    """Build a backend from the agent config's ``backend`` section."""
    settings = settings or {"kind": "local"}
    kind = settings.get("kind", "local")
    if kind == "local":
        return LocalBackend(max_slots)
    if kind == "simulated":
        plan = FaultPlan.from_dict({"capacity": max_slots, **settings.get("fault_plan", {})})
        return SimulatedScheduler(plan, mode=settings.get("clock", "wall"), name=name)
    raise ValueError(f"unknown backend kind {kind!r}")


__all__ = [
    "COMPLETED",
    "FAILED",
    "KILLED",
    "NEVER_STARTED",
    "STILL_ACTIVE",
    "FaultPlan",
    "LocalBackend",
    "RenderedJob",
    "SchedulerBackend",
    "SimulatedScheduler",
    "TerminalRecord",
    "make_backend",
    "render_job",
]
