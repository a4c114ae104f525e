"""Server-sent event fan-out with replay and slow-consumer eviction.

Publication happens on the event loop in event-log order. Each subscriber
owns a bounded queue; a subscriber whose queue is full is evicted on the
spot, so a stalled reader can never hold up publication or other readers.
"""

from __future__ import annotations

import asyncio
import itertools
import json
from dataclasses import dataclass, field
from typing import AsyncIterator

from ..errors import REPLAY_WINDOW_EXCEEDED, ErrorEnvelope
from ..lifecycle import EventLog, LifecycleEvent

_ids = itertools.count(1)


@dataclass(eq=False)
class Subscriber:
    capacity: int
    subscriber_id: int = field(default_factory=lambda: next(_ids))
    last_delivered_sequence: int = 0
    evicted: bool = False
    queue: asyncio.Queue = field(init=False)
    closed: asyncio.Event = field(init=False)

    def __post_init__(self) -> None:
        self.queue = asyncio.Queue(self.capacity)
        self.closed = asyncio.Event()


@dataclass
class Subscription:
    subscriber: Subscriber
    replay: list[LifecycleEvent]
    window_error: ErrorEnvelope | None = None


def format_event(ev: LifecycleEvent) -> bytes:
    return f"id: {ev.sequence}\nevent: {ev.event_type}\ndata: {ev.to_json()}\n\n".encode()


def format_error(envelope: ErrorEnvelope) -> bytes:
    return f"event: error\ndata: {json.dumps(envelope.to_dict(), separators=(',', ':'))}\n\n".encode()


KEEPALIVE_FRAME = b": keep-alive\n\n"


class Broker:
    def __init__(self, log: EventLog, capacity: int = 256) -> None:
        self.log = log
        self.capacity = capacity
        self.loop: asyncio.AbstractEventLoop | None = None
        self._subs: set[Subscriber] = set()
        self.evictions = 0

    def start(self, loop: asyncio.AbstractEventLoop | None = None) -> None:
        self.loop = loop or asyncio.get_running_loop()
        self.log.add_listener(self._on_append)

    def stop(self) -> None:
        self.log.remove_listener(self._on_append)
        for sub in list(self._subs):
            self._evict(sub)

    @property
    def subscriber_count(self) -> int:
        return len(self._subs)

    def _on_append(self, ev: LifecycleEvent) -> None:
        # called from whichever thread committed the event; hop onto the loop
        loop = self.loop
        if loop is not None and not loop.is_closed():
            loop.call_soon_threadsafe(self.publish, ev)

    def publish(self, ev: LifecycleEvent) -> None:
        for sub in list(self._subs):
            try:
                sub.queue.put_nowait(ev)
            except asyncio.QueueFull:
                self._evict(sub)

    def _evict(self, sub: Subscriber) -> None:
        if sub in self._subs:
            self._subs.discard(sub)
            sub.evicted = True
            self.evictions += 1
        sub.closed.set()

    def unsubscribe(self, sub: Subscriber) -> None:
        self._subs.discard(sub)
        sub.closed.set()

    def subscribe(self, after_sequence: int | None = None) -> Subscription:
        """Register first, then snapshot the retained window; duplicates are
        filtered by sequence in :meth:`stream`, so nothing falls in between."""
        sub = Subscriber(self.capacity)
        self._subs.add(sub)
        if after_sequence is None:
            sub.last_delivered_sequence = self.log.last_sequence
            return Subscription(sub, [])
        error = None
        start = self.log.window_start
        if after_sequence + 1 < start:
            error = ErrorEnvelope(
                REPLAY_WINDOW_EXCEEDED,
                f"events after {after_sequence} are no longer retained; replaying from {start}",
                {"requested": after_sequence, "window_start": start},
            )
        sub.last_delivered_sequence = after_sequence
        return Subscription(sub, self.log.since(after_sequence), error)

    async def stream(self, subscription: Subscription) -> AsyncIterator[LifecycleEvent]:
        """Replayed events, then live ones, strictly increasing in sequence."""
        sub = subscription.subscriber
        for ev in subscription.replay:
            if ev.sequence > sub.last_delivered_sequence:
                sub.last_delivered_sequence = ev.sequence
                yield ev
        while not sub.evicted:
            ev = await sub.queue.get()
            if ev.sequence > sub.last_delivered_sequence:
                sub.last_delivered_sequence = ev.sequence
                yield ev
