"""Server configuration from environment variables."""

from __future__ import annotations

import os
from dataclasses import dataclass

from ..lifecycle import DEFAULT_LIVENESS_WINDOW_S, DEFAULT_REPLAY_WINDOW

DEFAULT_BIND = "127.0.0.1:8080"
DEFAULT_CACHE_TTL_S = 5.0
DEFAULT_SUBSCRIBER_CAPACITY = 256
DEFAULT_KEEPALIVE_S = 15.0
MAX_CLAIM_WAIT_S = 25.0


@dataclass
class ServerConfig:
    bind_addr: str = DEFAULT_BIND
    store_path: str | None = None
    event_log_path: str | None = None
    cache_ttl_s: float = DEFAULT_CACHE_TTL_S
    liveness_window_s: float = DEFAULT_LIVENESS_WINDOW_S
    api_keys_file: str | None = None
    replay_window: int = DEFAULT_REPLAY_WINDOW
    subscriber_capacity: int = DEFAULT_SUBSCRIBER_CAPACITY
    keepalive_s: float = DEFAULT_KEEPALIVE_S

    @property
    def host(self) -> str:
        return self.bind_addr.rsplit(":", 1)[0] or "127.0.0.1"

    @property
    def port(self) -> int:
        return int(self.bind_addr.rsplit(":", 1)[1])

    @classmethod
    def from_env(cls, env: dict[str, str] | None = None) -> ServerConfig:
        env = os.environ if env is None else env
        return cls(
            bind_addr=env.get("VQPU_BIND_ADDR", DEFAULT_BIND),
            store_path=env.get("VQPU_STORE_PATH") or None,
            event_log_path=env.get("VQPU_EVENT_LOG_PATH") or None,
            cache_ttl_s=float(env.get("VQPU_CACHE_TTL_S", DEFAULT_CACHE_TTL_S)),
            liveness_window_s=float(env.get("VQPU_LIVENESS_WINDOW_S", DEFAULT_LIVENESS_WINDOW_S)),
            api_keys_file=env.get("VQPU_API_KEYS_FILE") or None,
            subscriber_capacity=int(env.get("VQPU_SSE_QUEUE_CAPACITY", DEFAULT_SUBSCRIBER_CAPACITY)),
            keepalive_s=float(env.get("VQPU_SSE_KEEPALIVE_S", DEFAULT_KEEPALIVE_S)),
        )
