"""TTL snapshot cache with invalidate-on-mutate."""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from typing import Callable

from ..device import DeviceSnapshot


@dataclass
class CacheCounters:
    hits: int = 0
    misses: int = 0
    invalidations: int = 0

    def to_dict(self) -> dict[str, int]:
        return {"hits": self.hits, "misses": self.misses, "invalidations": self.invalidations}


class SnapshotCache:
    """Entries are served only while ``clock() < expires_at``.

    Loading on a miss and invalidation share one lock, so a reader that
    loaded pre-mutation state can never re-insert it after the mutation's
    invalidation has run.
    """

    def __init__(self, ttl_s: float, clock: Callable[[], float] = time.monotonic) -> None:
        self.ttl_s = ttl_s
        self.clock = clock
        self.counters = CacheCounters()
        self._entries: dict[str, tuple[DeviceSnapshot, float]] = {}
        self.lock = threading.RLock()

    def get(self, device_id: str, loader: Callable[[str], DeviceSnapshot | None]) -> DeviceSnapshot | None:
        with self.lock:
            now = self.clock()
            entry = self._entries.get(device_id)
            if entry is not None and now < entry[1]:
                self.counters.hits += 1
                return entry[0]
            self.counters.misses += 1
            snapshot = loader(device_id)
            if snapshot is None:
                self._entries.pop(device_id, None)
            elif self.ttl_s > 0:
                self._entries[device_id] = (snapshot, now + self.ttl_s)
            return snapshot

    def invalidate(self, device_id: str) -> None:
        with self.lock:
            self._entries.pop(device_id, None)
            self.counters.invalidations += 1
