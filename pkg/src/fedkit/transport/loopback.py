"""Deterministic in-process pub/sub fabric for tests and desk-scale runs.

Deliveries are serialized under one fabric lock, so a fixed sequence of
operations always produces the same per-endpoint message sequences. Dropped
clients neither receive nor deliver anything; restoring a client gives it an
empty inbox, like an MQTT reconnect without session persistence.
"""

from __future__ import annotations

import threading
from collections import deque

from fedkit.transport.base import ROLE_SUBSCRIPTIONS, TransportError


class LoopbackEndpoint:
    def __init__(self, fabric: "LoopbackFabric", role: str, endpoint_id: int):
        self.role = role
        self.endpoint_id = endpoint_id
        self.subscriptions = ROLE_SUBSCRIPTIONS[role]
        self._fabric = fabric
        self._inbox: deque[tuple[str, bytes]] = deque()
        self._ready = threading.Condition()
        self._closed = False

    def publish(self, topic: str, payload: bytes) -> None:
        if self._closed:
            raise TransportError(f"endpoint {self.endpoint_id} is closed")
        self._fabric._route(self, topic, payload)

    def receive(self, timeout: float | None = None) -> tuple[str, bytes] | None:
        """Pop the oldest inbox message; None once the timeout elapses."""
        with self._ready:
            if not self._inbox:
                self._ready.wait(timeout)
            if not self._inbox:
                return None
            return self._inbox.popleft()

    def close(self) -> None:
        self._fabric._disconnect(self)
        self._closed = True

    def _deliver(self, topic: str, payload: bytes) -> None:
        with self._ready:
            self._inbox.append((topic, payload))
            self._ready.notify()

    def _clear(self) -> None:
        with self._ready:
            self._inbox.clear()


class LoopbackFabric:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._endpoints: dict[int, LoopbackEndpoint] = {}
        self._dropped: set[int] = set()

    def connect(self, role: str, endpoint_id: int) -> LoopbackEndpoint:
        if role not in ROLE_SUBSCRIPTIONS:
            raise ValueError(f"role must be 'server' or 'client', got {role!r}")
        with self._lock:
            if endpoint_id in self._endpoints:
                raise TransportError(f"endpoint id {endpoint_id} is already connected")
            endpoint = LoopbackEndpoint(self, role, endpoint_id)
            self._endpoints[endpoint_id] = endpoint
            return endpoint

    def drop_client(self, endpoint_id: int) -> None:
        """Sever a client: its publishes are discarded and its inbox stays empty."""
        with self._lock:
            endpoint = self._require(endpoint_id)
            self._dropped.add(endpoint_id)
            endpoint._clear()

    def restore_client(self, endpoint_id: int) -> None:
        """Reattach a dropped client with an empty inbox; missed messages are gone."""
        with self._lock:
            endpoint = self._require(endpoint_id)
            self._dropped.discard(endpoint_id)
            endpoint._clear()

    def _require(self, endpoint_id: int) -> LoopbackEndpoint:
        if endpoint_id not in self._endpoints:
            raise TransportError(f"unknown endpoint id {endpoint_id}")
        return self._endpoints[endpoint_id]

    def _route(self, sender: LoopbackEndpoint, topic: str, payload: bytes) -> None:
        with self._lock:
            if sender.endpoint_id in self._dropped:
                return
            for endpoint in self._endpoints.values():
                if topic in endpoint.subscriptions and endpoint.endpoint_id not in self._dropped:
                    endpoint._deliver(topic, payload)

    def _disconnect(self, endpoint: LoopbackEndpoint) -> None:
        with self._lock:
            self._endpoints.pop(endpoint.endpoint_id, None)
            self._dropped.discard(endpoint.endpoint_id)
