"""MQTT backend against a local in-process broker.

Skipped entirely when amqtt is not installed (see conftest.mqtt_broker_uri).
"""

import numpy as np
import pytest

import fedkit.transport.mqtt as mqtt_mod
from fedkit.nn import init_model
from fedkit.transport import TOPIC_GLOBAL, TOPIC_UPDATES, TransportError
from fedkit.transport.mqtt import MqttConfig, connect_mqtt
from tests.conftest import requires_data


@pytest.fixture()
def endpoints(mqtt_broker_uri):
    made = []

    def make(role: str, endpoint_id: int):
        ep = connect_mqtt(MqttConfig(broker_uri=mqtt_broker_uri), role, endpoint_id)
        made.append(ep)
        return ep

    yield make
    for ep in made:
        ep.close()


def test_model_sized_payload_round_trip(endpoints):
    server = endpoints("server", 0)
    client = endpoints("client", 1)
    payload = init_model(1).tobytes()
    assert len(payload) == 101_770 * 4

    server.publish(TOPIC_GLOBAL, payload)
    topic, received = client.receive(timeout=10.0)
    assert topic == TOPIC_GLOBAL
    assert received == payload

    client.publish(TOPIC_UPDATES, payload)
    topic, received = server.receive(timeout=10.0)
    assert (topic, received) == (TOPIC_UPDATES, payload)


def test_per_publisher_order_preserved(endpoints):
    server = endpoints("server", 0)
    client = endpoints("client", 2)
    for i in range(20):
        client.publish(TOPIC_UPDATES, bytes([i]) * 1000)
    seen = [server.receive(timeout=10.0)[1][0] for _ in range(20)]
    assert seen == list(range(20))


def test_connect_failure_after_bounded_retries(monkeypatch):
    monkeypatch.setattr(mqtt_mod, "RETRY_ATTEMPTS", 2)
    monkeypatch.setattr(mqtt_mod, "RETRY_INITIAL_S", 0.05)
    config = MqttConfig(broker_uri="mqtt://127.0.0.1:9", connect_timeout_s=0.5)
    with pytest.raises(TransportError, match="could not connect"):
        connect_mqtt(config, "client", 1)


def test_same_client_id_last_writer_wins(endpoints, mqtt_broker_uri):
    # MQTT 3.1.1 session takeover: the newer session with the same id stays usable
    first = endpoints("client", 7)
    second = endpoints("client", 7)
    server = endpoints("server", 0)
    server.publish(TOPIC_GLOBAL, b"takeover-check")
    topic, payload = second.receive(timeout=10.0)
    assert payload == b"takeover-check"


@requires_data
def test_serve_and_client_processes_complete_a_round(mqtt_broker_uri, data_dir, tmp_path):
    """Split-process deployment: one `fedkit serve` and two `fedkit client`."""
    import subprocess
    import sys

    out = tmp_path / "served.csv"
    serve = subprocess.Popen(
        [sys.executable, "-m", "fedkit.cli", "serve", "--broker", mqtt_broker_uri,
         "--clients", "2", "--rounds", "1", "--seed", "3", "--deadline", "60",
         "--data-dir", str(data_dir), "--out", str(out), "--no-figures"],
        stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True,
    )
    clients = [
        subprocess.Popen(
            [sys.executable, "-m", "fedkit.cli", "client", "--broker", mqtt_broker_uri,
             "--id", str(cid), "--clients", "2", "--epochs", "0", "--seed", "3",
             "--data-dir", str(data_dir), "--max-rounds", "1"],
            stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True,
        )
        for cid in (1, 2)
    ]
    try:
        serve_out, _ = serve.communicate(timeout=120)
        assert serve.returncode == 0, serve_out
        for proc in clients:
            client_out, _ = proc.communicate(timeout=60)
            assert proc.returncode == 0, client_out
            assert "published 1 updates" in client_out
    finally:
        for proc in [serve, *clients]:
            if proc.poll() is None:
                proc.kill()
    assert out.exists()
    lines = out.read_text().strip().split("\n")
    assert len(lines) == 2  # header + one round


@requires_data
def test_transport_parity_bit_for_bit(mqtt_broker_uri, mnist_train, mnist_test):
    """A seeded 3-round/4-client run must aggregate identically on both fabrics."""
    from fedkit.harness import ExperimentSpec, run_federated_detailed

    base = dict(kind="federated", n_clients=4, local_epochs=1, n_rounds=3, seed=11,
                data_dir="unused")
    loop_run = run_federated_detailed(ExperimentSpec(**base), mnist_train, mnist_test)
    mqtt_run = run_federated_detailed(
        ExperimentSpec(**base, transport="mqtt", broker_uri=mqtt_broker_uri),
        mnist_train, mnist_test,
    )
    assert loop_run.round_digests == mqtt_run.round_digests
    assert loop_run.final_params.tobytes() == mqtt_run.final_params.tobytes()
    accs = [(r.accuracy, r.loss) for r in loop_run.records]
    assert accs == [(r.accuracy, r.loss) for r in mqtt_run.records]
