"""Agent configuration file (YAML or JSON), located via VQPU_AGENT_CONFIG."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ..scheduler.simulated import FaultPlan

CONFIG_ENV = "VQPU_AGENT_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass
class AgentConfig:
    server_url: str
    api_key: str
    agent_id: str
    work_dir: str
    poll_interval_s: float = 30.0
    heartbeat_interval_s: float = 30.0
    max_slots: int = 2
    backend: dict[str, Any] = field(default_factory=lambda: {"kind": "local"})
    claim_wait_s: float = 0.0
    finalise_interval_s: float = 0.25
    request_timeout_s: float = 30.0
    backoff_base_s: float = 1.0
    backoff_cap_s: float = 60.0

    def __post_init__(self) -> None:
        for name in ("server_url", "api_key", "agent_id", "work_dir"):
            if not isinstance(getattr(self, name), str) or not getattr(self, name):
                raise ConfigError(f"{name} must be a non-empty string")
        if self.max_slots < 1:
            raise ConfigError("max_slots must be positive")
        for name in ("poll_interval_s", "heartbeat_interval_s", "finalise_interval_s", "request_timeout_s"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.claim_wait_s < 0:
            raise ConfigError("claim_wait_s must be nonnegative")
        kind = self.backend.get("kind", "local")
        if kind not in ("local", "simulated"):
            raise ConfigError(f"unknown backend kind {kind!r}")
        if kind == "simulated":
            if self.backend.get("clock", "wall") != "wall":
                raise ConfigError("a running agent needs the wall-clock simulated backend")
            try:
                FaultPlan.from_dict(self.backend.get("fault_plan", {}))
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"invalid fault_plan: {exc}") from exc

    @classmethod
    def from_dict(cls, data: Any) -> AgentConfig:
        if not isinstance(data, dict):
            raise ConfigError("agent configuration must be a mapping")
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | os.PathLike | None = None) -> AgentConfig:
        path = path or os.environ.get(CONFIG_ENV)
        if not path:
            raise ConfigError(f"no configuration file given and {CONFIG_ENV} is unset")
        try:
            data = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
        return cls.from_dict(data)
