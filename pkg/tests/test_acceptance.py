"""Acceptance gate: every reproduction band and protocol property, one test
per criterion clause, each printing a PASS line with the measured values.

Accuracy reproductions are stochastic, so each band is checked at its
documented seed (fedkit.harness.DOCUMENTED_SEEDS). Run with `-v -s` to see
the per-criterion lines.
"""

import threading
import time

import numpy as np
import pytest

from fedkit import wire
from fedkit.aggregator import Aggregator, fedavg_aggregate, ClientUpdate
from fedkit.client import ClientRuntime, client_loop
from fedkit.data import partition_shards
from fedkit.harness import (
    DOCUMENTED_SEEDS,
    REFERENCE_CENTRALIZED,
    REFERENCE_FL,
    REFERENCE_HOSTILE,
    REFERENCE_SINGLE_PEAK,
    ExperimentSpec,
    run_centralized,
    run_federated,
    run_federated_detailed,
    run_single_client,
)
from fedkit.nn import ModelParams, TrainConfig, init_model, softmax
from fedkit.transport import LoopbackFabric
from tests.conftest import requires_data
from tests.test_nn import oracle_full_batch_step, random_params, _fd_check

pytestmark = requires_data


def report(criterion: str, detail: str) -> None:
    print(f"[acceptance] {criterion} PASS: {detail}")


# --- criterion 1: single-client baseline -----------------------------------------

def test_criterion_1_single_client_baseline(mnist_train, mnist_test):
    started = time.monotonic()
    spec = ExperimentSpec(kind="single_client", epochs=30,
                          seed=DOCUMENTED_SEEDS["single_client"], data_dir="unused")
    records = run_single_client(spec, mnist_train, mnist_test)
    elapsed = time.monotonic() - started

    peak = max(r.accuracy for r in records) * 100
    losses = [r.loss for r in records]
    tail_mean = float(np.mean(losses[-5:]))
    assert 74.0 <= peak <= 82.0, f"single-client peak {peak:.2f}% outside [74, 82]"
    assert tail_mean > min(losses), (
        f"no rising loss tail: final-5 mean {tail_mean:.4f} <= min {min(losses):.4f}")
    assert elapsed < 60.0, f"single-client run took {elapsed:.1f}s"
    report("criterion 1",
           f"peak={peak:.2f}% (reference {REFERENCE_SINGLE_PEAK}), "
           f"tail {tail_mean:.4f} > min {min(losses):.4f}, {elapsed:.1f}s, "
           f"seed={spec.seed}")


# --- criterion 2: centralized baselines --------------------------------------------

def test_criterion_2_centralized_baselines(mnist_train, mnist_test):
    started = time.monotonic()
    peaks = {}
    for n_samples, reference in REFERENCE_CENTRALIZED.items():
        spec = ExperimentSpec(kind="centralized", n_samples=n_samples, epochs=30,
                              seed=DOCUMENTED_SEEDS["centralized"], data_dir="unused")
        records = run_centralized(spec, mnist_train, mnist_test)
        peaks[n_samples] = max(r.accuracy for r in records) * 100
        assert abs(peaks[n_samples] - reference) <= 2.5, (
            f"centralized {n_samples}: peak {peaks[n_samples]:.2f}% "
            f"not within 2.5 of {reference}")
    elapsed = time.monotonic() - started
    assert elapsed < 300.0, f"centralized baselines took {elapsed:.1f}s"
    report("criterion 2",
           ", ".join(f"{n}: {p:.2f}% (ref {REFERENCE_CENTRALIZED[n]})"
                     for n, p in peaks.items()) + f", {elapsed:.0f}s")


# --- criterion 3: friendly federated grid --------------------------------------------

def test_criterion_3_friendly_grid(mnist_train, mnist_test):
    started = time.monotonic()
    seed = DOCUMENTED_SEEDS["federated_grid"]
    finals = {}
    for (n_clients, local_epochs), reference in REFERENCE_FL.items():
        spec = ExperimentSpec(kind="federated", n_clients=n_clients,
                              local_epochs=local_epochs, n_rounds=10, seed=seed,
                              data_dir="unused")
        records = run_federated(spec, mnist_train, mnist_test)
        assert len(records) == 10
        finals[(n_clients, local_epochs)] = records[-1].accuracy * 100
    elapsed = time.monotonic() - started

    for key, reference in REFERENCE_FL.items():
        assert abs(finals[key] - reference) <= 3.0, (
            f"grid cell {key}: {finals[key]:.2f}% not within 3 of {reference}")
    for local_epochs in (1, 3, 5):
        assert finals[(20, local_epochs)] >= finals[(10, local_epochs)], (
            f"20 clients not >= 10 clients at E={local_epochs}")
    for n_clients in (10, 15, 20):
        assert finals[(n_clients, 5)] >= finals[(n_clients, 1)] - 0.5, (
            f"E=5 more than 0.5pt below E=1 at {n_clients} clients")
    assert elapsed < 1200.0, f"grid took {elapsed:.1f}s"
    cells = ", ".join(f"{k[0]}x{k[1]}={v:.2f}" for k, v in finals.items())
    report("criterion 3", f"{cells}, orderings hold, {elapsed:.0f}s, seed={seed}")


# --- criterion 4: hostile runs ----------------------------------------------------------

@pytest.fixture(scope="module")
def hostile_finals(mnist_train, mnist_test):
    seed = DOCUMENTED_SEEDS["hostile"]
    finals = {}
    for drops in (4, 8, 12):
        spec = ExperimentSpec(kind="federated_hostile", n_clients=20, local_epochs=5,
                              n_rounds=10, drops_per_round=drops, seed=seed,
                              data_dir="unused")
        finals[drops] = run_federated(spec, mnist_train, mnist_test)[-1].accuracy * 100
    return finals


def test_criterion_4_hostile_bands(hostile_finals):
    # Known red on drops=12: with aggregation renormalized over the online
    # clients only and IID shards, dropping clients barely moves the final
    # accuracy (observed ~90.9% across seeds), while the reference run
    # degraded to 86.37%. Asserted as stated rather than widened.
    for drops, reference in REFERENCE_HOSTILE.items():
        assert abs(hostile_finals[drops] - reference) <= 3.5, (
            f"hostile drops={drops}: {hostile_finals[drops]:.2f}% "
            f"not within 3.5 of {reference}")
    report("criterion 4 (bands)",
           ", ".join(f"drops={d}: {a:.2f}%" for d, a in hostile_finals.items()))


def test_criterion_4_hostile_ordering_and_comparison(hostile_finals, mnist_train, mnist_test):
    assert hostile_finals[4] >= hostile_finals[12], (
        f"drops=4 ({hostile_finals[4]:.2f}) below drops=12 ({hostile_finals[12]:.2f})")
    spec = ExperimentSpec(kind="federated", n_clients=15, local_epochs=5, n_rounds=10,
                          seed=DOCUMENTED_SEEDS["hostile"], data_dir="unused")
    friendly_15 = run_federated(spec, mnist_train, mnist_test)[-1].accuracy * 100
    assert hostile_finals[4] >= friendly_15 - 1.0, (
        f"drops=4 ({hostile_finals[4]:.2f}) more than 1pt below "
        f"15-client friendly ({friendly_15:.2f})")
    report("criterion 4 (ordering)",
           f"drops4={hostile_finals[4]:.2f} >= drops12={hostile_finals[12]:.2f}; "
           f"drops4 >= 15-client friendly {friendly_15:.2f} - 1pt")


# --- criterion 5: property suite (no network) --------------------------------------------

def test_criterion_5_property_suite(mnist_train, mnist_test):
    started = time.monotonic()

    # gradient check vs central finite differences, double precision
    rng = np.random.default_rng(55)
    params = random_params(rng, np.float64)
    batch = rng.random((5, 784))
    labels = rng.integers(0, 10, 5)
    worst = _fd_check(params, batch, labels, None, 0.0,
                      coords_per_tensor=(600, 128, 1280, 10))
    assert worst < 1e-4, f"gradient check rel err {worst:.2e}"

    # softmax normalization
    probs = softmax(np.random.default_rng(56).normal(0, 4, (200, 10)).astype(np.float32))
    assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-6

    # FedAvg equal-weight mean and exact convex-hull bound
    updates = [ClientUpdate(cid, 0, 300, init_model(cid)) for cid in range(1, 6)]
    aggregated = fedavg_aggregate(updates)
    for i in range(4):
        stack = np.stack([u.params.tensors()[i] for u in updates])
        assert np.abs(aggregated.tensors()[i] - stack.mean(axis=0)).max() < 1e-6
        assert (aggregated.tensors()[i] >= stack.min(axis=0)).all()
        assert (aggregated.tensors()[i] <= stack.max(axis=0)).all()

    # wire round trip bit-exact + fuzz 10,000 random byte strings
    msg = wire.client_update(5, 3, 300, init_model(99))
    encoded = wire.encode(msg)
    assert wire.decode(encoded) == msg
    fuzz_rng = np.random.default_rng(57)
    for i in range(10_000):
        if i % 2 == 0:
            blob = fuzz_rng.bytes(int(fuzz_rng.integers(0, 200)))
        else:
            corrupted = bytearray(encoded[:int(fuzz_rng.integers(0, len(encoded)))])
            if corrupted:
                corrupted[int(fuzz_rng.integers(0, len(corrupted)))] ^= 0xFF
            blob = bytes(corrupted)
        try:
            wire.decode(blob)
        except wire.WireError:
            pass

    # every per-label count of both splits
    train_counts = np.bincount(mnist_train.labels, minlength=10).tolist()
    test_counts = np.bincount(mnist_test.labels, minlength=10).tolist()
    assert train_counts == [5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949]
    assert test_counts == [980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009]

    # shard disjointness by source index
    order = np.random.default_rng(42).permutation(len(mnist_train))
    shards = partition_shards(mnist_train, 20, 300, seed=42)
    used = set()
    for i, shard in enumerate(shards):
        idx = set(order[i * 300:(i + 1) * 300].tolist())
        assert not (idx & used)
        used |= idx
    assert len(used) == 6000

    # seeded end-to-end loopback run, bit-identical across two executions
    spec = ExperimentSpec(kind="federated", n_clients=4, local_epochs=1, n_rounds=2,
                          seed=5, data_dir="unused")
    first = run_federated_detailed(spec, mnist_train, mnist_test)
    second = run_federated_detailed(spec, mnist_train, mnist_test)
    assert first.round_digests == second.round_digests
    assert first.final_params.tobytes() == second.final_params.tobytes()
    assert [(r.accuracy, r.loss) for r in first.records] == \
        [(r.accuracy, r.loss) for r in second.records]

    elapsed = time.monotonic() - started
    assert elapsed < 120.0, f"property suite took {elapsed:.1f}s"
    report("criterion 5",
           f"gradient rel err {worst:.2e}, 10k fuzz clean, label counts exact, "
           f"shards disjoint, rerun bit-identical, {elapsed:.0f}s")


# --- criterion 6: transport parity --------------------------------------------------------

def test_criterion_6_transport_parity(mqtt_broker_uri, mnist_train, mnist_test):
    started = time.monotonic()
    base = dict(kind="federated", n_clients=4, local_epochs=1, n_rounds=3, seed=11,
                data_dir="unused")
    loop_run = run_federated_detailed(ExperimentSpec(**base), mnist_train, mnist_test)
    mqtt_run = run_federated_detailed(
        ExperimentSpec(**base, transport="mqtt", broker_uri=mqtt_broker_uri),
        mnist_train, mnist_test)
    elapsed = time.monotonic() - started
    assert loop_run.round_digests == mqtt_run.round_digests, "per-round parameters differ"
    assert loop_run.final_params.tobytes() == mqtt_run.final_params.tobytes()
    assert elapsed < 120.0, f"parity run took {elapsed:.1f}s"
    report("criterion 6",
           f"3 rounds x 4 clients bit-identical on loopback and mqtt, {elapsed:.0f}s")


# --- criterion 7: one-round full-batch degenerate case ------------------------------------

def test_criterion_7_fedsgd_degenerate_case(mnist_train):
    # one client, one round, one full-batch epoch, no dropout: the aggregated
    # global model must equal a single plain gradient step
    shard = partition_shards(mnist_train, 1, 300, seed=7)[0]
    config = TrainConfig(client_fraction=1.0, local_epochs=1, batch_size=300,
                         learning_rate=0.065, dropout_rate=0.0, seed=7)

    fabric = LoopbackFabric()
    server = fabric.connect("server", 0)
    endpoint = fabric.connect("client", 1)
    initial = init_model(7)
    aggregator = Aggregator(server, initial, expected_updates=1)
    runtime = ClientRuntime(client_id=1, shard=shard, config=config, run_seed=7)
    stop = threading.Event()
    thread = threading.Thread(target=client_loop, args=(runtime, endpoint, stop), daemon=True)
    thread.start()
    try:
        assert aggregator.run_round() is True
    finally:
        stop.set()
        thread.join(timeout=5)

    oracle = oracle_full_batch_step(initial, shard.images, shard.labels, 0.065)
    worst = max(
        np.abs(a.astype(np.float64) - b.astype(np.float64)).max()
        for a, b in zip(aggregator.global_params.tensors(), oracle.tensors())
    )
    assert worst < 1e-5, f"max parameter deviation {worst:.2e}"
    report("criterion 7", f"global model equals one full-batch step, max dev {worst:.2e}")
