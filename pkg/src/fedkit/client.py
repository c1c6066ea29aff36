"""Edge client: join, receive the global model, train locally, publish the update.

Each client owns a private shard and a seeded generator derived from
(run_seed, client_id), so runs reproduce bit-for-bit on any machine and
parallel execution cannot change any client's published update. An
availability schedule can take the client offline for whole rounds.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field

import numpy as np

from fedkit import wire
from fedkit.data import Shard
from fedkit.nn import TrainConfig, train_epochs
from fedkit.transport.base import TOPIC_JOIN, TOPIC_UPDATES, TransportError

log = logging.getLogger(__name__)

# Multiplier for spreading client ids across the 64-bit seed space.
SEED_MIX = 0x9E3779B97F4A7C15
U64 = 0xFFFFFFFFFFFFFFFF

RECEIVE_POLL_S = 0.05


def derive_client_seed(run_seed: int, client_id: int) -> int:
    """client_seed = run_seed XOR (client_id * SEED_MIX), all arithmetic mod 2^64."""
    return (run_seed ^ ((client_id * SEED_MIX) & U64)) & U64


@dataclass
class ChurnSchedule:
    """Per-round sets of offline client ids."""

    offline: list[frozenset[int]]

    def offline_in(self, round_index: int) -> frozenset[int]:
        if 0 <= round_index < len(self.offline):
            return self.offline[round_index]
        return frozenset()

    def online_count(self, round_index: int, n_clients: int) -> int:
        return n_clients - len(self.offline_in(round_index))


def make_churn_schedule(n_clients: int, drops_per_round: int, n_rounds: int, seed: int) -> ChurnSchedule:
    """Independently sample drops_per_round distinct offline clients for every round.

    Client ids run 1..n_clients. Deterministic for a given seed.
    """
    if drops_per_round >= n_clients:
        raise ValueError(f"drops_per_round {drops_per_round} must be < n_clients {n_clients}")
    rng = np.random.default_rng(seed)
    ids = np.arange(1, n_clients + 1)
    offline = [
        frozenset(rng.choice(ids, size=drops_per_round, replace=False).tolist())
        for _ in range(n_rounds)
    ]
    return ChurnSchedule(offline=offline)


# Salt so a selection schedule never shares a stream with a churn schedule
# built from the same run seed.
SELECTION_SEED_SALT = 0x53454C45


def make_selection_schedule(n_clients: int, fraction: float, n_rounds: int, seed: int) -> ChurnSchedule:
    """Per-round uniform selection of ceil(fraction * n_clients) participants.

    Returned as an offline schedule (the unselected complement), so it composes
    with churn schedules by union.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    selected = int(np.ceil(fraction * n_clients))
    rng = np.random.default_rng(seed ^ SELECTION_SEED_SALT)
    ids = np.arange(1, n_clients + 1)
    offline = [
        frozenset() if selected == n_clients else
        frozenset(np.setdiff1d(ids, rng.choice(ids, size=selected, replace=False)).tolist())
        for _ in range(n_rounds)
    ]
    return ChurnSchedule(offline=offline)


@dataclass
class ClientRuntime:
    """Everything one client needs: identity, shard, config, availability."""

    client_id: int
    shard: Shard
    config: TrainConfig
    run_seed: int
    offline_rounds: frozenset[int] = field(default_factory=frozenset)
    current_round: int = 0

    def is_available(self, round_index: int) -> bool:
        return round_index not in self.offline_rounds

    def make_rng(self) -> np.random.Generator:
        return np.random.default_rng(derive_client_seed(self.run_seed, self.client_id))


def client_loop(
    runtime: ClientRuntime,
    endpoint,
    stop: threading.Event | None = None,
    max_rounds: int | None = None,
) -> int:
    """Participate until stopped: sends a join request, then for every global
    broadcast of a new round trains local_epochs on the private shard and
    publishes the update. Returns the number of updates published.

    Rounds in the runtime's offline set are skipped entirely. Undecodable
    messages are discarded; a transport failure triggers a fresh join request.
    """
    stop = stop or threading.Event()
    rng = runtime.make_rng()
    endpoint.publish(TOPIC_JOIN, wire.encode(wire.join_request(runtime.client_id)))

    published = 0
    last_trained = -1
    while not stop.is_set():
        item = endpoint.receive(timeout=RECEIVE_POLL_S)
        if item is None:
            continue
        _, payload = item
        try:
            msg = wire.decode(payload)
        except wire.WireError as exc:
            log.warning("client %d: discarding undecodable message (%s)", runtime.client_id, exc)
            continue
        if msg.kind is not wire.MessageKind.GLOBAL_MODEL:
            continue
        round_index = msg.round_index
        if round_index <= last_trained:
            continue  # re-broadcast for a joiner, or QoS-1 duplicate
        runtime.current_round = round_index
        if not runtime.is_available(round_index):
            continue
        trained = train_epochs(msg.params, runtime.shard, runtime.config, rng=rng)
        update = wire.client_update(round_index, runtime.client_id, len(runtime.shard), trained)
        try:
            endpoint.publish(TOPIC_UPDATES, wire.encode(update))
        except TransportError as exc:
            log.warning("client %d: publish failed (%s), rejoining", runtime.client_id, exc)
            endpoint.publish(TOPIC_JOIN, wire.encode(wire.join_request(runtime.client_id)))
            continue
        last_trained = round_index
        published += 1
        if max_rounds is not None and published >= max_rounds:
            break
    return published
