"""MQTT 3.1.1 backend speaking to any standard broker.

Publishes use QoS 1 with a single in-flight message per endpoint, which keeps
per-publisher ordering at the cost of throughput; duplicates from redelivery
are tolerated because the aggregator deduplicates by (round, client_id).
Connections retry with exponential backoff: 500 ms doubling to an 8 s cap,
six attempts.
"""

from __future__ import annotations

import logging
import queue
import ssl
import threading
import time
from dataclasses import dataclass
from urllib.parse import urlparse

import paho.mqtt.client as paho

from fedkit.transport.base import ROLE_SUBSCRIPTIONS, TransportError

log = logging.getLogger(__name__)

RETRY_INITIAL_S = 0.5
RETRY_CAP_S = 8.0
RETRY_ATTEMPTS = 6


@dataclass
class MqttConfig:
    broker_uri: str = "mqtt://localhost:1883"
    client_id_prefix: str = "fedkit"
    keepalive_s: int = 30
    tls: bool = False
    connect_timeout_s: float = 10.0


def _parse_uri(uri: str) -> tuple[str, int]:
    parsed = urlparse(uri if "//" in uri else "mqtt://" + uri)
    return parsed.hostname or "localhost", parsed.port or 1883


class MqttEndpoint:
    """One connected MQTT session with role-appropriate subscriptions."""

    def __init__(self, config: MqttConfig, role: str, endpoint_id: int):
        self.role = role
        self.endpoint_id = endpoint_id
        self.subscriptions = ROLE_SUBSCRIPTIONS[role]
        self._config = config
        self._inbox: queue.Queue[tuple[str, bytes]] = queue.Queue()
        self._connected = threading.Event()
        self._subscribed = threading.Event()
        self._client = paho.Client(
            paho.CallbackAPIVersion.VERSION2,
            client_id=f"{config.client_id_prefix}-{role}-{endpoint_id}",
            clean_session=True,
        )
        if config.tls:
            self._client.tls_set(cert_reqs=ssl.CERT_REQUIRED)
        self._client.max_inflight_messages_set(1)
        self._client.on_connect = self._on_connect
        self._client.on_message = self._on_message
        self._client.on_subscribe = self._on_subscribe
        self._connect_with_backoff()

    def _connect_with_backoff(self) -> None:
        host, port = _parse_uri(self._config.broker_uri)
        delay = RETRY_INITIAL_S
        last_error: Exception | None = None
        for attempt in range(1, RETRY_ATTEMPTS + 1):
            try:
                self._client.connect(host, port, keepalive=self._config.keepalive_s)
                self._client.loop_start()
                if not self._connected.wait(self._config.connect_timeout_s):
                    raise TimeoutError("no CONNACK from broker")
                if self.subscriptions and not self._subscribed.wait(self._config.connect_timeout_s):
                    raise TimeoutError("no SUBACK from broker")
                return
            except (OSError, TimeoutError, ValueError) as exc:
                last_error = exc
                log.warning("mqtt connect attempt %d/%d to %s:%d failed: %s",
                            attempt, RETRY_ATTEMPTS, host, port, exc)
                self._client.loop_stop()
                if attempt < RETRY_ATTEMPTS:
                    time.sleep(delay)
                    delay = min(delay * 2, RETRY_CAP_S)
        raise TransportError(f"could not connect to {self._config.broker_uri}: {last_error}")

    def _on_connect(self, client, userdata, flags, reason_code, properties) -> None:
        if reason_code != 0:
            log.error("mqtt endpoint %d connect refused: %s", self.endpoint_id, reason_code)
            return
        self._connected.set()
        # (Re)subscribe on every connect so a broker-side session reset heals itself.
        for topic in sorted(self.subscriptions):
            client.subscribe(topic, qos=1)

    def _on_subscribe(self, client, userdata, mid, reason_codes, properties) -> None:
        self._subscribed.set()

    def _on_message(self, client, userdata, msg) -> None:
        self._inbox.put((msg.topic, msg.payload))

    def publish(self, topic: str, payload: bytes) -> None:
        """QoS-1 publish that blocks until the broker acknowledges it."""
        info = self._client.publish(topic, payload, qos=1)
        if info.rc != paho.MQTT_ERR_SUCCESS:
            raise TransportError(f"publish to {topic} failed: rc={info.rc}")
        try:
            info.wait_for_publish(timeout=30.0)
        except (ValueError, RuntimeError) as exc:
            raise TransportError(f"publish to {topic} not acknowledged: {exc}") from exc

    def receive(self, timeout: float | None = None) -> tuple[str, bytes] | None:
        try:
            return self._inbox.get(timeout=timeout)
        except queue.Empty:
            return None

    def close(self) -> None:
        self._client.disconnect()
        self._client.loop_stop()


def connect_mqtt(config: MqttConfig, role: str, endpoint_id: int) -> MqttEndpoint:
    return MqttEndpoint(config, role, endpoint_id)
