"""Shared fixtures: dataset access (skipped when absent) and a local MQTT broker."""

from __future__ import annotations

import asyncio
import logging
import os
import socket
import threading
import time
import warnings
from pathlib import Path

import pytest

DATA_DIR = Path(os.environ.get("FEDKIT_DATA_DIR", Path(__file__).resolve().parent.parent / "data"))

_DATA_FILES = (
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
)


def dataset_present() -> bool:
    return all((DATA_DIR / f).exists() or (DATA_DIR / (f + ".gz")).exists() for f in _DATA_FILES)


requires_data = pytest.mark.skipif(
    not dataset_present(),
    reason=f"dataset files not found in {DATA_DIR}; run `fedkit fetch-data --data-dir {DATA_DIR}`",
)


@pytest.fixture(scope="session")
def data_dir() -> Path:
    if not dataset_present():
        pytest.skip(f"dataset files not found in {DATA_DIR}")
    return DATA_DIR


@pytest.fixture(scope="session")
def mnist_train(data_dir):
    from fedkit.data import load_split

    return load_split(data_dir, "train")


@pytest.fixture(scope="session")
def mnist_test(data_dir):
    from fedkit.data import load_split

    return load_split(data_dir, "test")


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture(scope="session")
def mqtt_broker_uri():
    """Start an in-process MQTT broker; skip MQTT tests when amqtt is unavailable."""
    amqtt = pytest.importorskip("amqtt.broker")
    for name in ("amqtt", "transitions", "passlib"):
        logging.getLogger(name).setLevel(logging.CRITICAL)

    port = _free_port()
    ready = threading.Event()

    def serve() -> None:
        async def main() -> None:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DeprecationWarning)
                broker = amqtt.Broker({
                    "listeners": {"default": {"type": "tcp", "bind": f"127.0.0.1:{port}"}},
                    "auth": {"allow-anonymous": True},
                })
            await broker.start()
            ready.set()
            await asyncio.Event().wait()

        asyncio.run(main())

    thread = threading.Thread(target=serve, name="mqtt-broker", daemon=True)
    thread.start()
    if not ready.wait(timeout=15):
        pytest.skip("local MQTT broker failed to start")
    time.sleep(0.2)
    return f"mqtt://127.0.0.1:{port}"
