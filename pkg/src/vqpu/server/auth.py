"""Static API-key authentication with three roles."""

from __future__ import annotations

import hmac
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import yaml

from ..errors import AUTH_FAILED, VqpuError

USER = "user"
AGENT = "agent"
ADMIN = "admin"
ROLES = frozenset({USER, AGENT, ADMIN})


@dataclass(frozen=True)
class Principal:
    name: str
    role: str

    @property
    def is_admin(self) -> bool:
        return self.role == ADMIN


class KeyTable:
    def __init__(self, keys: Mapping[str, Principal]) -> None:
        self._keys = dict(keys)

    @classmethod
    def from_mapping(cls, data: Mapping) -> KeyTable:
        """Accepts ``{key: {name, role}}`` or ``{"keys": [{key, name, role}, ...]}``."""
        entries = data.get("keys", data) if isinstance(data, Mapping) else data
        if isinstance(entries, Mapping):
            entries = [{"key": k, **v} for k, v in entries.items()]
        keys = {}
        for e in entries:
            role = e.get("role", USER)
            if role not in ROLES:
                raise ValueError(f"unknown role {role!r}")
            keys[str(e["key"])] = Principal(str(e.get("name") or e.get("principal") or role), role)
        return cls(keys)

    @classmethod
    def load(cls, path: str | Path) -> KeyTable:
        # YAML is a superset of JSON, so one loader covers both file formats
        return cls.from_mapping(yaml.safe_load(Path(path).read_text()))

    def authenticate(self, key: str | None) -> Principal:
        if key:
            for candidate, principal in self._keys.items():
                if hmac.compare_digest(candidate.encode(), key.encode()):
                    return principal
        raise VqpuError(AUTH_FAILED, "missing or unknown API key")


def require(principal: Principal, *roles: str) -> Principal:
    """Admins pass every role check."""
    if principal.role == ADMIN or principal.role in roles:
        return principal
    raise VqpuError(AUTH_FAILED, f"role {principal.role!r} may not perform this operation", {"forbidden": True})
