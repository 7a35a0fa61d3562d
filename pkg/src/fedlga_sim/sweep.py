"""Grid sweeps over experiment settings with one metrics file per cell and a summary table."""

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

from fedlga_sim.data import Dataset
from fedlga_sim.errors import DivergenceError
from fedlga_sim.persistence import write_csv, write_metrics
from fedlga_sim.simulation import (
    ExperimentConfig,
    FederatedSimulator,
    RoundRecord,
    load_data,
    rounds_to_target,
)

logger = logging.getLogger(__name__)

SWEEP_AXES = ("strategy", "rho", "local_steps", "k_selected", "n_devices", "tau_max", "seed")

SUMMARY_HEADER = (
    "cell",
    "strategy",
    "seed",
    "rho",
    "local_steps",
    "k_selected",
    "n_devices",
    "tau_max",
    "rounds_to_target",
    "best_accuracy",
    "final_accuracy",
    "mean_round_ms",
    "total_ms_to_target",
)


@dataclass(frozen=True)
class SweepCell:
    index: int
    config: ExperimentConfig

    @property
    def filename(self) -> str:
        return f"cell_{self.index:03d}_{self.config.strategy.value}_seed{self.config.seed}.csv"


@dataclass
class CellSummary:
    """Headline numbers of one finished cell."""

    cell: SweepCell
    rounds_to_target: int | None
    best_accuracy: float | None
    final_accuracy: float | None
    mean_round_ms: float | None
    total_ms_to_target: float | None
    diverged: bool = False

    @classmethod
    def of(
        cls, cell: SweepCell, records: list[RoundRecord], diverged: bool = False
    ) -> "CellSummary":
        target = cell.config.target_accuracy
        hit = rounds_to_target(records, target) if target is not None else None
        total = None
        if hit is not None:
            total = sum(r.wall_ms for r in records if r.round <= hit)
        return cls(
            cell=cell,
            rounds_to_target=hit,
            best_accuracy=max((r.test_accuracy for r in records), default=None),
            final_accuracy=records[-1].test_accuracy if records else None,
            mean_round_ms=sum(r.wall_ms for r in records) / len(records) if records else None,
            total_ms_to_target=total,
            diverged=diverged,
        )

    def to_row(self) -> list[Any]:
        config = self.cell.config
        return [
            self.cell.index,
            config.strategy.value,
            config.seed,
            config.rho,
            config.local_steps,
            config.k_selected,
            config.n_devices,
            config.effective_tau_max,
            self.rounds_to_target,
            self.best_accuracy,
            self.final_accuracy,
            self.mean_round_ms,
            self.total_ms_to_target,
        ]


def expand_grid(base: ExperimentConfig, axes: dict[str, list[Any]]) -> list[SweepCell]:
    """Cross product of the axis values applied on top of ``base``.

    Axes vary in :data:`SWEEP_AXES` order with the last axis fastest. When ``local_steps``
    varies and ``tau_max`` does not, every cell uses ``tau_max = local_steps - 1``.

    Raises:
        KeyError: An axis is not sweepable
        ConfigError: A cell violates a config invariant
    """
    unknown = sorted(set(axes) - set(SWEEP_AXES))
    if unknown:
        msg = f"cannot sweep over {unknown}; sweepable keys are {', '.join(SWEEP_AXES)}"
        raise KeyError(msg)
    names = [name for name in SWEEP_AXES if axes.get(name)]
    cells = []
    for index, combo in enumerate(itertools.product(*(axes[name] for name in names))):
        overrides = dict(zip(names, combo, strict=True))
        if "local_steps" in overrides and "tau_max" not in overrides:
            overrides["tau_max"] = overrides["local_steps"] - 1
        cells.append(SweepCell(index, replace(base, **overrides)))
    return cells


def _run_cell(cell: SweepCell, data: tuple[Dataset, Dataset], out_dir: Path) -> CellSummary:
    try:
        with FederatedSimulator(cell.config, data=data, workers=1) as simulator:
            _, records = simulator.run_experiment()
        diverged = False
    except DivergenceError as exc:
        logger.warning("Cell %d diverged: %s", cell.index, exc)
        records, diverged = [], True
    write_metrics(records, out_dir / cell.filename)
    return CellSummary.of(cell, records, diverged)


def run_sweep(
    base: ExperimentConfig,
    axes: dict[str, list[Any]],
    out_dir: str | Path,
    workers: int = 1,
) -> list[CellSummary]:
    """Run every cell of the grid and write ``summary.csv`` once all cells are done.

    Args:
        base: Settings shared by every cell
        axes: Sweep values per axis name
        out_dir: Directory receiving one metrics CSV per cell plus ``summary.csv``
        workers: Cells run concurrently on this many threads

    Returns:
        Cell summaries in cell order
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = expand_grid(base, axes)
    data = load_data(base)
    logger.info("Sweeping %d cells into %s", len(cells), out_dir)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(lambda cell: _run_cell(cell, data, out_dir), cells))
    else:
        summaries = [_run_cell(cell, data, out_dir) for cell in cells]

    write_csv(out_dir / "summary.csv", SUMMARY_HEADER, (s.to_row() for s in summaries))
    return summaries
