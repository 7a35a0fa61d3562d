"""Command-line front end: ``run``, ``sweep``, ``check`` and ``partition-info``.

Exit codes: 0 on success, 1 on a failed check or a runtime error, 2 on a configuration error.
"""

import logging
from collections.abc import Callable
from pathlib import Path
from typing import Any

import click
from dotenv import load_dotenv

from fedlga_sim import configure_logging
from fedlga_sim.config import format_config, load_config
from fedlga_sim.errors import ConfigError, FedLGAError
from fedlga_sim.history import RunHistory, get_run_history
from fedlga_sim.persistence import write_checkpoint, write_jsonl, write_metrics
from fedlga_sim.server import Strategy
from fedlga_sim.simulation import FederatedSimulator, rounds_to_target
from fedlga_sim.sweep import run_sweep
from fedlga_sim.verify import SUITES, run_suite

logger = logging.getLogger(__name__)

EXIT_FAILURE = 1
EXIT_CONFIG_ERROR = 2

_STRATEGIES = [s.value for s in Strategy]


def _fail(ctx: click.Context, exc: Exception) -> None:
    if isinstance(exc, ConfigError):
        keys = f" [{', '.join(exc.keys)}]" if exc.keys else ""
        click.echo(f"❌ Config error{keys}: {exc}", err=True)
        ctx.exit(EXIT_CONFIG_ERROR)
    click.echo(f"❌ {exc}", err=True)
    ctx.exit(EXIT_FAILURE)


def _split(option: str, raw: str | None, convert: Callable[[str], Any]) -> list[Any]:
    if not raw:
        return []
    values = []
    for item in raw.split(","):
        try:
            values.append(convert(item.strip()))
        except ValueError as exc:
            key = option.lstrip("-").replace("-", "_")
            msg = f"{option}: cannot parse '{item}'"
            raise ConfigError(msg, (key,)) from exc
    return values


@click.group()
@click.option(
    "--log-level",
    type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
    default=None,
    help="Log level; defaults to FEDLGA_LOG_LEVEL or INFO.",
)
def main(log_level: str | None) -> None:
    """Simulate heterogeneous federated learning with FedLGA and its baselines."""
    load_dotenv()
    configure_logging(log_level)


@main.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--seed", type=int, default=None, help="Master seed (overrides the config).")
@click.option("--strategy", type=click.Choice(_STRATEGIES), default=None)
@click.option("--rounds", type=int, default=None)
@click.option("--workers", type=int, default=None, help="Threads for per-slot training.")
@click.option(
    "--out", "out_dir", type=click.Path(file_okay=False), default="runs", show_default=True
)
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None)
@click.option(
    "--history",
    "history_path",
    is_flag=False,
    flag_value="",
    default=None,
    help="Record the run in a SQLite history (default FEDLGA_HISTORY_DB).",
)
@click.pass_context
def run(
    ctx: click.Context,
    config_path: str | None,
    seed: int | None,
    strategy: str | None,
    rounds: int | None,
    workers: int | None,
    out_dir: str,
    checkpoint: str | None,
    history_path: str | None,
) -> None:
    """Run one experiment and write its metrics CSV."""
    try:
        config = load_config(
            config_path,
            seed=seed,
            strategy=Strategy(strategy) if strategy else None,
            rounds=rounds,
            workers=workers,
        )
        with FederatedSimulator(config) as simulator:
            params, records = simulator.run_experiment()
    except FedLGAError as exc:
        _fail(ctx, exc)
        return

    metrics_path = write_metrics(
        records, Path(out_dir) / f"{config.strategy.value}_seed{config.seed}.csv"
    )
    click.echo(f"✓ {len(records)} rounds written to {metrics_path}")
    if checkpoint:
        write_checkpoint(params, checkpoint)
        click.echo(f"✓ Checkpoint written to {checkpoint}")

    hit = None
    if config.target_accuracy is not None:
        hit = rounds_to_target(records, config.target_accuracy)
        reached = f"round {hit}" if hit is not None else "not reached"
        click.echo(f"  target {config.target_accuracy}: {reached}")
    if history_path is not None:
        history = RunHistory(history_path) if history_path else get_run_history()
        run_id = history.log_run(
            config.strategy.value, config.seed, format_config(config), records, hit
        )
        click.echo(f"✓ Recorded as run {run_id} in {history.db_path}")


@main.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option(
    "--out", "out_dir", type=click.Path(file_okay=False), default="sweep", show_default=True
)
@click.option("--strategy", "strategies", default=None, help="Comma list, e.g. fedavg,fedlga.")
@click.option("--rho", default=None, help="Comma list of straggler ratios.")
@click.option("--local-steps", default=None, help="Comma list of E values.")
@click.option("--k-selected", default=None, help="Comma list of K values.")
@click.option("--n-devices", default=None, help="Comma list of N values.")
@click.option("--tau-max", default=None, help="Comma list of tau_max values.")
@click.option("--seed", "seeds", default=None, help="Comma list of seeds.")
@click.option("--rounds", type=int, default=None)
@click.option("--workers", type=int, default=1, show_default=True, help="Cells run in parallel.")
@click.pass_context
def sweep(
    ctx: click.Context,
    config_path: str | None,
    out_dir: str,
    strategies: str | None,
    rho: str | None,
    local_steps: str | None,
    k_selected: str | None,
    n_devices: str | None,
    tau_max: str | None,
    seeds: str | None,
    rounds: int | None,
    workers: int,
) -> None:
    """Run the cross product of the listed values; one CSV per cell plus summary.csv."""
    try:
        base = load_config(config_path, rounds=rounds)
        axes = {
            "strategy": _split("--strategy", strategies, lambda s: Strategy(s.lower())),
            "rho": _split("--rho", rho, float),
            "local_steps": _split("--local-steps", local_steps, int),
            "k_selected": _split("--k-selected", k_selected, int),
            "n_devices": _split("--n-devices", n_devices, int),
            "tau_max": _split("--tau-max", tau_max, int),
            "seed": _split("--seed", seeds, int),
        }
        summaries = run_sweep(base, axes, out_dir, workers=workers)
    except FedLGAError as exc:
        _fail(ctx, exc)
        return

    for summary in summaries:
        config = summary.cell.config
        reached = summary.rounds_to_target if summary.rounds_to_target is not None else "-"
        marker = "❌" if summary.diverged else "✓"
        click.echo(
            f"{marker} cell {summary.cell.index:03d} {config.strategy.value} seed={config.seed} "
            f"rho={config.rho} E={config.local_steps} K={config.k_selected} "
            f"N={config.n_devices} rounds_to_target={reached}"
        )
    click.echo(f"✓ Summary written to {Path(out_dir) / 'summary.csv'}")


@main.command()
@click.option(
    "--suite",
    type=click.Choice([*SUITES, "all"]),
    default="all",
    show_default=True,
)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--report", type=click.Path(dir_okay=False), default=None, help="JSONL report.")
@click.pass_context
def check(ctx: click.Context, suite: str, config_path: str | None, report: str | None) -> None:
    """Run verification suites; exits 1 if any suite fails."""
    try:
        config = load_config(config_path)
        results = run_suite(suite, config)
    except FedLGAError as exc:
        _fail(ctx, exc)
        return

    for result in results:
        marker = "✓" if result.passed else "❌"
        click.echo(f"{marker} {result.name} ({result.elapsed_ms:.0f} ms)")
    if report:
        write_jsonl(report, (r.to_dict() for r in results))
        click.echo(f"  report written to {report}")
    if not all(r.passed for r in results):
        ctx.exit(EXIT_FAILURE)


@main.command("partition-info")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.pass_context
def partition_info(ctx: click.Context, config_path: str | None) -> None:
    """Print every device's shard size and class set."""
    try:
        config = load_config(config_path)
        simulator = FederatedSimulator(config, workers=1)
    except FedLGAError as exc:
        _fail(ctx, exc)
        return

    click.echo(f"{len(simulator.train)} training samples over {config.n_devices} devices")
    for device_id in simulator.list_all_devices():
        details = simulator.get_device_details(device_id)
        metadata = details["metadata"]
        classes = ",".join(str(c) for c in metadata["class_set"])
        click.echo(f"device {device_id:3d}: size={metadata['size']:5d} classes={classes}")
