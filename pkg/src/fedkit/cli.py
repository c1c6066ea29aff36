"""Command line interface.

Subcommands mirror the experiment families: `run federated|hostile|centralized|
single`, the full `grid`, `fetch-data`, and the split-process `serve`/`client`
pair for real-broker deployments. Metrics files get companion PNG figures
unless --no-figures is passed.
"""

from __future__ import annotations

import logging
import sys
import threading
from pathlib import Path

import click

from fedkit import harness
from fedkit.data import fetch_dataset, load_split, partition_shards
from fedkit.harness import DEFAULT_BASELINE_EPOCHS, DEFAULT_ROUNDS, SHARD_SIZE, ExperimentSpec
from fedkit.nn import TrainConfig, init_model

log = logging.getLogger(__name__)


def _render_figures(records, out: Path) -> None:
    from fedkit.plotting import plot_metrics

    fig_path = out.with_suffix(".png")
    plot_metrics(records, fig_path)
    click.echo(f"wrote {fig_path}")


def _finish_run(records, out: str, fmt: str, figures: bool) -> None:
    out_path = Path(out)
    harness.emit_metrics(records, out_path, fmt=fmt)
    click.echo(f"wrote {out_path}")
    if figures:
        _render_figures(records, out_path)
    final = records[-1]
    click.echo(f"final: accuracy={final.accuracy:.4f} loss={final.loss:.4f}")


common_options = [
    click.option("--batch", type=int, default=32, show_default=True, help="Minibatch size."),
    click.option("--lr", type=float, default=0.065, show_default=True, help="SGD step size."),
    click.option("--dropout", type=float, default=0.35, show_default=True, help="Dropout rate."),
    click.option("--seed", type=int, default=42, show_default=True, help="Run seed."),
    click.option("--data-dir", envvar="FEDKIT_DATA_DIR", default="data", show_default=True,
                 help="Directory with the dataset files (or FEDKIT_DATA_DIR)."),
    click.option("--out", default="metrics.csv", show_default=True, help="Metrics output file."),
    click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv",
                 show_default=True, help="Metrics file format."),
    click.option("--figures/--no-figures", default=True, show_default=True,
                 help="Render PNG figures next to the metrics file."),
]

shard_size_option = click.option("--shard-size", type=int, default=SHARD_SIZE,
                                 show_default=True, help="Samples per client shard.")


def add_options(options):
    def wrap(fn):
        for option in reversed(options):
            fn = option(fn)
        return fn
    return wrap


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Enable debug logging.")
@click.version_option()
def main(verbose: bool) -> None:
    """Federated averaging experiments on MNIST over loopback or MQTT."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


@main.command("fetch-data")
@click.option("--data-dir", envvar="FEDKIT_DATA_DIR", default="data", show_default=True)
def fetch_data(data_dir: str) -> None:
    """Download and verify the four dataset archives."""
    fetch_dataset(data_dir)
    click.echo(f"dataset ready in {data_dir}")


@main.group()
def run() -> None:
    """Run a single experiment."""


@run.command("federated")
@click.option("--clients", type=int, default=20, show_default=True)
@click.option("--epochs", type=int, default=5, show_default=True, help="Local epochs per round.")
@click.option("--rounds", type=int, default=DEFAULT_ROUNDS, show_default=True)
@click.option("--fraction", type=float, default=1.0, show_default=True,
              help="Fraction of clients expected per round.")
@click.option("--transport", type=click.Choice(["loopback", "mqtt"]), default="loopback",
              show_default=True)
@click.option("--broker", default="mqtt://localhost:1883", show_default=True)
@shard_size_option
@add_options(common_options)
def run_federated_cmd(clients, epochs, rounds, fraction, transport, broker, shard_size,
                      batch, lr, dropout, seed, data_dir, out, fmt, figures) -> None:
    """Friendly-environment federated run."""
    spec = ExperimentSpec(
        kind="federated", n_clients=clients, local_epochs=epochs, n_rounds=rounds,
        client_fraction=fraction, batch_size=batch, learning_rate=lr, dropout_rate=dropout,
        shard_size=shard_size, seed=seed, transport=transport, broker_uri=broker,
        data_dir=data_dir,
    )
    _finish_run(harness.run_federated(spec), out, fmt, figures)


@run.command("hostile")
@click.option("--clients", type=int, default=20, show_default=True)
@click.option("--epochs", type=int, default=5, show_default=True)
@click.option("--rounds", type=int, default=DEFAULT_ROUNDS, show_default=True)
@click.option("--drops", type=int, required=True, help="Clients disconnected each round.")
@click.option("--transport", type=click.Choice(["loopback", "mqtt"]), default="loopback",
              show_default=True)
@click.option("--broker", default="mqtt://localhost:1883", show_default=True)
@shard_size_option
@add_options(common_options)
def run_hostile_cmd(clients, epochs, rounds, drops, transport, broker, shard_size,
                    batch, lr, dropout, seed, data_dir, out, fmt, figures) -> None:
    """Federated run with per-round client disconnections."""
    spec = ExperimentSpec(
        kind="federated_hostile", n_clients=clients, local_epochs=epochs, n_rounds=rounds,
        drops_per_round=drops, batch_size=batch, learning_rate=lr, dropout_rate=dropout,
        shard_size=shard_size, seed=seed, transport=transport, broker_uri=broker,
        data_dir=data_dir,
    )
    _finish_run(harness.run_federated(spec), out, fmt, figures)


@run.command("centralized")
@click.option("--samples", type=int, default=6000, show_default=True)
@click.option("--epochs", type=int, default=DEFAULT_BASELINE_EPOCHS, show_default=True)
@add_options(common_options)
def run_centralized_cmd(samples, epochs, batch, lr, dropout, seed, data_dir, out, fmt, figures) -> None:
    """Centralized baseline on pooled data."""
    spec = ExperimentSpec(
        kind="centralized", n_samples=samples, epochs=epochs, batch_size=batch,
        learning_rate=lr, dropout_rate=dropout, seed=seed, data_dir=data_dir,
    )
    _finish_run(harness.run_centralized(spec), out, fmt, figures)


@run.command("single")
@click.option("--epochs", type=int, default=DEFAULT_BASELINE_EPOCHS, show_default=True)
@shard_size_option
@add_options(common_options)
def run_single_cmd(epochs, shard_size, batch, lr, dropout, seed, data_dir, out, fmt, figures) -> None:
    """Single-client baseline on one private shard."""
    spec = ExperimentSpec(
        kind="single_client", epochs=epochs, batch_size=batch, shard_size=shard_size,
        learning_rate=lr, dropout_rate=dropout, seed=seed, data_dir=data_dir,
    )
    _finish_run(harness.run_single_client(spec), out, fmt, figures)


@main.command()
@click.option("--out", default="summary.json", show_default=True)
@click.option("--rounds", type=int, default=DEFAULT_ROUNDS, show_default=True)
@click.option("--epochs", type=int, default=DEFAULT_BASELINE_EPOCHS, show_default=True,
              help="Baseline epochs.")
@click.option("--grid-seed", type=int, default=None,
              help="Override the documented per-family seeds with one seed.")
@click.option("--batch", type=int, default=32, show_default=True)
@click.option("--lr", type=float, default=0.065, show_default=True)
@click.option("--dropout", type=float, default=0.35, show_default=True)
@click.option("--data-dir", envvar="FEDKIT_DATA_DIR", default="data", show_default=True)
@click.option("--figures/--no-figures", default=True, show_default=True)
def grid(out, rounds, epochs, grid_seed, batch, lr, dropout, data_dir, figures) -> None:
    """Run the full comparison grid and write a summary with reference values."""
    base = ExperimentSpec(
        kind="federated", n_rounds=rounds, epochs=epochs, batch_size=batch,
        learning_rate=lr, dropout_rate=dropout, data_dir=data_dir,
    )
    seeds = None
    if grid_seed is not None:
        seeds = {key: grid_seed for key in harness.DOCUMENTED_SEEDS}
    summary = harness.run_grid(base, seeds=seeds, progress=click.echo)
    harness.write_grid_summary(summary, out)
    click.echo(f"wrote {out}")
    if figures:
        from fedkit.plotting import plot_grid_summary

        fig_path = Path(out).with_suffix(".png")
        plot_grid_summary(summary, fig_path)
        click.echo(f"wrote {fig_path}")


@main.command()
@click.option("--broker", default="mqtt://localhost:1883", show_default=True)
@click.option("--clients", type=int, default=20, show_default=True,
              help="Updates expected per round.")
@click.option("--rounds", type=int, default=DEFAULT_ROUNDS, show_default=True)
@click.option("--deadline", type=float, default=120.0, show_default=True,
              help="Per-round collection deadline in seconds.")
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--data-dir", envvar="FEDKIT_DATA_DIR", default="data", show_default=True)
@click.option("--out", default="metrics.csv", show_default=True)
@click.option("--figures/--no-figures", default=True, show_default=True)
def serve(broker, clients, rounds, deadline, seed, data_dir, out, figures) -> None:
    """Run the aggregator against a real broker (pair with `fedkit client`)."""
    from fedkit.aggregator import Aggregator
    from fedkit.transport.mqtt import MqttConfig, connect_mqtt

    test = load_split(data_dir, "test")
    endpoint = connect_mqtt(MqttConfig(broker_uri=broker), "server", 0)
    aggregator = Aggregator(endpoint, init_model(seed), expected_updates=clients,
                            deadline_s=deadline)
    try:
        metrics = aggregator.run_training(rounds, test.images, test.labels)
    finally:
        endpoint.close()
    records = [
        harness.MetricsRecord(f"federated_mqtt_c{clients}", m.round_index,
                              m.eval_result.accuracy, m.eval_result.mean_loss, m.wall_ms)
        for m in metrics
    ]
    _finish_run(records, out, "csv", figures)


@main.command("client")
@click.option("--id", "client_id", type=int, required=True, help="Client id, 1-based.")
@click.option("--broker", default="mqtt://localhost:1883", show_default=True)
@click.option("--clients", type=int, default=20, show_default=True,
              help="Total client count (fixes the shard layout).")
@click.option("--epochs", type=int, default=5, show_default=True)
@click.option("--batch", type=int, default=32, show_default=True)
@click.option("--lr", type=float, default=0.065, show_default=True)
@click.option("--dropout", type=float, default=0.35, show_default=True)
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--data-dir", envvar="FEDKIT_DATA_DIR", default="data", show_default=True)
@click.option("--shard-size", type=int, default=SHARD_SIZE, show_default=True)
@click.option("--max-rounds", type=int, default=None, help="Stop after this many updates.")
def client_cmd(client_id, broker, clients, epochs, batch, lr, dropout, seed, data_dir,
               shard_size, max_rounds) -> None:
    """Run one edge client process against a real broker."""
    from fedkit.client import ClientRuntime, client_loop
    from fedkit.transport.mqtt import MqttConfig, connect_mqtt

    if not 1 <= client_id <= clients:
        raise click.BadParameter(f"--id must be in 1..{clients}")
    train = load_split(data_dir, "train")
    shard = partition_shards(train, clients, shard_size, seed)[client_id - 1]
    config = TrainConfig(local_epochs=epochs, batch_size=batch, learning_rate=lr,
                         dropout_rate=dropout, seed=seed)
    runtime = ClientRuntime(client_id=client_id, shard=shard, config=config, run_seed=seed)
    endpoint = connect_mqtt(MqttConfig(broker_uri=broker), "client", client_id)
    stop = threading.Event()
    try:
        published = client_loop(runtime, endpoint, stop, max_rounds=max_rounds)
    except KeyboardInterrupt:
        stop.set()
        published = 0
    finally:
        endpoint.close()
    click.echo(f"client {client_id} published {published} updates")


if __name__ == "__main__":
    sys.exit(main())
