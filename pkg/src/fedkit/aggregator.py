"""Coordinator: broadcasts the global model, collects updates, averages them.

Each round: publish the current global model, gather one update per live
client (deduplicating QoS-1 redeliveries and discarding stale rounds), then
replace the global model with the sample-count-weighted mean. Join requests
are answered at any time by re-broadcasting the current round and model, which
is how late joiners resynchronize.
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from fedkit import wire
from fedkit.nn import EvalResult, ModelParams, evaluate
from fedkit.transport.base import TOPIC_GLOBAL, TOPIC_JOIN, TOPIC_UPDATES

log = logging.getLogger(__name__)

RECEIVE_POLL_S = 0.05


class AggregationError(ValueError):
    """Raised when an update batch violates the round protocol."""


@dataclass
class ClientUpdate:
    client_id: int
    round_index: int
    sample_count: int
    params: ModelParams


@dataclass
class RoundState:
    round_index: int = 0
    global_params: ModelParams | None = None
    received: dict[int, ClientUpdate] = field(default_factory=dict)
    expected: int = 0


@dataclass
class RoundMetrics:
    round_index: int
    eval_result: EvalResult
    n_updates: int
    failed: bool
    wall_ms: float


def fedavg_aggregate(updates: list[ClientUpdate]) -> ModelParams:
    """Sample-count-weighted mean of client parameters.

    Accumulates in float64 in ascending client_id order, then rounds to
    float32, so the result is bit-reproducible regardless of arrival order.
    """
    if not updates:
        raise AggregationError("cannot aggregate an empty update list")
    rounds = {u.round_index for u in updates}
    if len(rounds) > 1:
        raise AggregationError(f"updates span multiple rounds: {sorted(rounds)}")
    ordered = sorted(updates, key=lambda u: u.client_id)
    total = sum(u.sample_count for u in ordered)
    sums = [np.zeros(t.shape, dtype=np.float64) for t in ordered[0].params.tensors()]
    for update in ordered:
        weight = np.float64(update.sample_count)
        for acc, tensor in zip(sums, update.params.tensors()):
            acc += weight * tensor.astype(np.float64)
    return ModelParams(*((acc / total).astype(np.float32) for acc in sums))


class Aggregator:
    """The control loop that owns RoundState; transport delivery may be concurrent."""

    def __init__(self, endpoint, initial_params: ModelParams, expected_updates: int,
                 deadline_s: float | None = None):
        self.endpoint = endpoint
        self.state = RoundState(round_index=0, global_params=initial_params,
                                expected=expected_updates)
        self.deadline_s = deadline_s
        self.failed_rounds: list[int] = []
        self.round_digests: list[str] = []
        self.received_history: list[frozenset[int]] = []

    @property
    def global_params(self) -> ModelParams:
        return self.state.global_params

    def broadcast_global(self) -> None:
        msg = wire.global_model(self.state.round_index, self.state.global_params)
        self.endpoint.publish(TOPIC_GLOBAL, wire.encode(msg))

    def serve_join(self) -> None:
        """Re-broadcast the current round and model so joiners resynchronize."""
        log.info("join request served: re-broadcasting round=%d", self.state.round_index)
        self.broadcast_global()

    def run_round(self, expected: int | None = None, deadline_s: float | None = None) -> bool:
        """One full round; returns False when no update arrived by the deadline.

        On a failed round the global model is unchanged but the round index
        still advances, so clients and server stay in step.
        """
        state = self.state
        state.received = {}
        state.expected = self.state.expected if expected is None else expected
        deadline_s = self.deadline_s if deadline_s is None else deadline_s
        self.broadcast_global()

        started = time.monotonic()
        while len(state.received) < state.expected:
            if deadline_s is not None and time.monotonic() - started > deadline_s:
                log.warning("round %d deadline after %.1fs with %d/%d updates",
                            state.round_index, deadline_s, len(state.received), state.expected)
                break
            item = self.endpoint.receive(timeout=RECEIVE_POLL_S)
            if item is None:
                continue
            topic, payload = item
            if topic == TOPIC_JOIN:
                self.serve_join()
                continue
            if topic != TOPIC_UPDATES:
                continue
            try:
                msg = wire.decode(payload)
            except wire.WireError as exc:
                log.warning("round %d: undecodable update dropped (%s)", state.round_index, exc)
                continue
            if msg.kind is wire.MessageKind.JOIN_REQUEST:
                self.serve_join()
                continue
            if msg.kind is not wire.MessageKind.CLIENT_UPDATE:
                continue
            if msg.round_index != state.round_index:
                log.info("update discarded round=%d client=%d reason=stale-round (current %d)",
                         msg.round_index, msg.client_id, state.round_index)
                continue
            if msg.client_id in state.received:
                log.info("update discarded round=%d client=%d reason=duplicate",
                         msg.round_index, msg.client_id)
                continue
            state.received[msg.client_id] = ClientUpdate(
                client_id=msg.client_id,
                round_index=msg.round_index,
                sample_count=msg.sample_count,
                params=msg.params,
            )
            log.info("update received round=%d client=%d n=%d (%d/%d)",
                     msg.round_index, msg.client_id, msg.sample_count,
                     len(state.received), state.expected)

        aggregated = bool(state.received)
        if aggregated:
            state.global_params = fedavg_aggregate(list(state.received.values()))
        else:
            log.warning("round %d failed: no updates, global model unchanged", state.round_index)
            self.failed_rounds.append(state.round_index)
        self.received_history.append(frozenset(state.received))
        self.round_digests.append(hashlib.sha256(state.global_params.tobytes()).hexdigest())
        state.round_index += 1
        return aggregated

    def run_training(
        self,
        n_rounds: int,
        eval_images: np.ndarray,
        eval_labels: np.ndarray,
        before_round: Callable[[int], None] | None = None,
        expected_for_round: Callable[[int], int] | None = None,
    ) -> list[RoundMetrics]:
        """Run n_rounds, evaluating the global model on the full test set after each."""
        metrics: list[RoundMetrics] = []
        for _ in range(n_rounds):
            round_index = self.state.round_index
            if before_round is not None:
                before_round(round_index)
            expected = expected_for_round(round_index) if expected_for_round else None
            started = time.perf_counter()
            ok = self.run_round(expected=expected)
            result = evaluate(self.state.global_params, eval_images, eval_labels)
            wall_ms = (time.perf_counter() - started) * 1000.0
            metrics.append(RoundMetrics(
                round_index=round_index,
                eval_result=result,
                n_updates=len(self.state.received),
                failed=not ok,
                wall_ms=wall_ms,
            ))
            log.info("round %d done: accuracy=%.4f loss=%.4f updates=%d",
                     round_index, result.accuracy, result.mean_loss, len(self.state.received))
        return metrics
