"""Pluggable pub/sub fabrics: deterministic in-process loopback and MQTT."""

from fedkit.transport.base import (
    ROLE_SUBSCRIPTIONS,
    TOPIC_GLOBAL,
    TOPIC_JOIN,
    TOPIC_UPDATES,
    TransportError,
)
from fedkit.transport.loopback import LoopbackEndpoint, LoopbackFabric

__all__ = [
    "LoopbackEndpoint",
    "LoopbackFabric",
    "ROLE_SUBSCRIPTIONS",
    "TOPIC_GLOBAL",
    "TOPIC_JOIN",
    "TOPIC_UPDATES",
    "TransportError",
]
