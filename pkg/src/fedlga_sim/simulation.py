"""Round orchestration: sample, plan, train locally, correct, aggregate, evaluate.

A :class:`FederatedSimulator` owns the data of one experiment and the registry of simulated
devices. Rounds run strictly one after another; inside a round the per-slot local training
may run on a thread pool. Every random draw comes from a stream keyed by
``(seed, round, slot, purpose)`` and the aggregation runs in slot order, so the outcome does
not depend on the number of worker threads.
"""

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from enum import Enum
from typing import Any

import numpy as np

from fedlga_sim import model
from fedlga_sim.data import (
    Dataset,
    PartitionSpec,
    Shard,
    load_idx,
    partition_noniid,
    split_dataset,
    synth_dataset,
)
from fedlga_sim.device import LocalUpdate, RemoteDevice, local_train
from fedlga_sim.errors import ConfigError, DivergenceError, FedLGAError, PartitionError
from fedlga_sim.model import ModelKind, ModelSpec, ParamVector
from fedlga_sim.rng import Purpose, RngStream
from fedlga_sim.server import (
    ApproxDiagnostics,
    RoundPlan,
    SlotResult,
    Strategy,
    StrategyConfig,
    aggregate,
    correct_stragglers,
    plan_round,
    sample_devices,
    straggler_count,
)

logger = logging.getLogger(__name__)


class DataSourceKind(str, Enum):
    """Where training data comes from."""

    SYNTHETIC = "synthetic"
    IDX = "idx"


class Participation(str, Enum):
    """Device participation scheme."""

    PARTIAL = "partial"
    FULL = "full"


@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of one experiment. Field names are the config file keys."""

    n_devices: int = 50
    k_selected: int = 10
    local_steps: int = 5
    batch_size: int = 10
    eta_l: float = 0.05
    eta_g: float = 1.0
    gamma: float = 0.0
    rho: float = 0.5
    tau_max: int | None = None
    rounds: int = 100
    strategy: Strategy = Strategy.FEDLGA
    mu: float = 1.0
    participation: Participation = Participation.PARTIAL
    model: ModelKind = ModelKind.LOGISTIC
    hidden_dim: int = 400
    data_source: DataSourceKind = DataSourceKind.SYNTHETIC
    num_classes: int = 10
    input_dim: int = 20
    samples_per_class: int = 300
    test_per_class: int = 100
    class_sep: float = 3.0
    noise_sigma: float = 1.0
    idx_images: str | None = None
    idx_labels: str | None = None
    idx_test_images: str | None = None
    idx_test_labels: str | None = None
    classes_per_device: int = 2
    seed: int = 0
    data_seed: int = 0
    partition_seed: int = 0
    target_accuracy: float | None = None
    early_stop: bool = False
    eval_every: int = 1
    workers: int | None = None

    def __post_init__(self) -> None:
        self._validate()

    def _validate(self) -> None:
        def fail(message: str, *keys: str) -> None:
            raise ConfigError(message, keys)

        for key in ("n_devices", "k_selected", "local_steps", "batch_size", "eval_every"):
            if getattr(self, key) < 1:
                fail(f"{key}={getattr(self, key)} must be at least 1", key)
        if self.k_selected > self.n_devices:
            fail(
                f"k_selected={self.k_selected} must not exceed n_devices={self.n_devices}",
                "k_selected",
                "n_devices",
            )
        if self.rounds < 0:
            fail(f"rounds={self.rounds} must be nonnegative", "rounds")
        if self.eta_l <= 0:
            fail(f"eta_l={self.eta_l} must be positive", "eta_l")
        if self.eta_g <= 0:
            fail(f"eta_g={self.eta_g} must be positive", "eta_g")
        if not 0.0 <= self.gamma < 1.0:
            fail(f"gamma={self.gamma} must lie in [0, 1)", "gamma")
        if not 0.0 <= self.rho <= 1.0:
            fail(f"rho={self.rho} must lie in [0, 1]", "rho")
        tau_max = self.effective_tau_max
        if not 0 <= tau_max <= self.local_steps - 1:
            fail(
                f"tau_max={tau_max} must lie in [0, local_steps-1={self.local_steps - 1}]",
                "tau_max",
                "local_steps",
            )
        if straggler_count(self.rho, self.slots_per_round) and tau_max < 2:
            fail(
                f"rho={self.rho} designates stragglers, which needs tau_max >= 2 "
                f"(got tau_max={tau_max})",
                "rho",
                "tau_max",
            )
        if self.strategy is Strategy.FEDPROX and self.mu <= 0:
            fail(f"mu={self.mu} must be positive for fedprox", "mu")
        if self.model is ModelKind.MLP and self.hidden_dim < 1:
            fail(f"hidden_dim={self.hidden_dim} must be positive for the mlp", "hidden_dim")
        if self.classes_per_device < 1:
            fail(
                f"classes_per_device={self.classes_per_device} must be positive",
                "classes_per_device",
            )
        if self.workers is not None and self.workers < 1:
            fail(f"workers={self.workers} must be at least 1", "workers")
        if self.target_accuracy is not None and self.target_accuracy < 0:
            fail(f"target_accuracy={self.target_accuracy} must be nonnegative", "target_accuracy")

        if self.data_source is DataSourceKind.IDX:
            if not self.idx_images or not self.idx_labels:
                fail("data_source=idx needs idx_images and idx_labels", "idx_images", "idx_labels")
            if bool(self.idx_test_images) != bool(self.idx_test_labels):
                fail(
                    "idx_test_images and idx_test_labels must be given together",
                    "idx_test_images",
                    "idx_test_labels",
                )
            return

        if self.num_classes < 2:
            fail(f"num_classes={self.num_classes} must be at least 2", "num_classes")
        if self.input_dim < 1:
            fail(f"input_dim={self.input_dim} must be positive", "input_dim")
        if self.test_per_class < 1 or self.samples_per_class <= self.test_per_class:
            fail(
                f"samples_per_class={self.samples_per_class} must exceed "
                f"test_per_class={self.test_per_class} >= 1",
                "samples_per_class",
                "test_per_class",
            )
        try:
            self.partition_spec.validate(self.num_classes)
        except PartitionError as exc:
            raise ConfigError(str(exc), ("n_devices", "classes_per_device", "num_classes")) from exc

    @property
    def effective_tau_max(self) -> int:
        """Largest staleness: ``tau_max`` when set, else ``local_steps - 1``."""
        return self.local_steps - 1 if self.tau_max is None else self.tau_max

    @property
    def slots_per_round(self) -> int:
        """K, or N under full participation."""
        return self.n_devices if self.participation is Participation.FULL else self.k_selected

    @property
    def strategy_config(self) -> StrategyConfig:
        return StrategyConfig(self.strategy, self.eta_g, self.mu)

    @property
    def partition_spec(self) -> PartitionSpec:
        return PartitionSpec(self.n_devices, self.classes_per_device, self.partition_seed)

    def to_dict(self) -> dict[str, Any]:
        """Field values with enums replaced by their tags."""
        values = {}
        for item in fields(self):
            value = getattr(self, item.name)
            values[item.name] = value.value if isinstance(value, Enum) else value
        return values


@dataclass(frozen=True)
class RoundRecord:
    """Metrics of one evaluated round."""

    round: int
    strategy: str
    seed: int
    train_loss: float
    test_loss: float
    test_accuracy: float
    rho_effective: float
    eta_l: float
    wall_ms: float

    def to_row(self) -> list[Any]:
        """Values in metrics CSV column order."""
        return [
            self.round,
            self.strategy,
            self.seed,
            self.train_loss,
            self.test_loss,
            self.test_accuracy,
            self.rho_effective,
            self.eta_l,
            self.wall_ms,
        ]

    def to_dict(self) -> dict[str, Any]:
        return {
            "round": self.round,
            "strategy": self.strategy,
            "seed": self.seed,
            "train_loss": self.train_loss,
            "test_loss": self.test_loss,
            "test_acc": self.test_accuracy,
            "rho_effective": self.rho_effective,
            "eta_l": self.eta_l,
            "wall_ms": self.wall_ms,
        }


def lr_schedule(eta_l0: float, gamma: float, t: int) -> float:
    """Local learning rate of round ``t``: ``eta_l0 * (1 - gamma)**t``."""
    if not 0.0 <= gamma < 1.0:
        msg = f"gamma must lie in [0, 1), got {gamma}"
        raise ValueError(msg)
    return eta_l0 * (1.0 - gamma) ** t


def rounds_to_target(records: list[RoundRecord], target_accuracy: float) -> int | None:
    """First round whose test accuracy reaches the target, or None."""
    for record in records:
        if record.test_accuracy >= target_accuracy:
            return record.round
    return None


def _load_idx_pair(
    images: str, labels: str, keys: tuple[str, str], num_classes: int | None = None
) -> Dataset:
    try:
        return load_idx(images, labels, num_classes)
    except FedLGAError:
        raise
    except OSError as exc:
        msg = f"cannot read IDX files: {exc}"
        raise ConfigError(msg, keys) from exc
    except ValueError as exc:
        msg = f"unusable IDX data in {images}: {exc}"
        raise ConfigError(msg, keys) from exc


def load_data(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Build the ``(train, test)`` datasets described by the config.

    Raises:
        ConfigError: An IDX file cannot be read, or its labels miss a class
        IdxFormatError: An IDX file is corrupt
    """
    if config.data_source is DataSourceKind.IDX:
        train = _load_idx_pair(config.idx_images, config.idx_labels, ("idx_images", "idx_labels"))
        if config.idx_test_images:
            test = _load_idx_pair(
                config.idx_test_images,
                config.idx_test_labels,
                ("idx_test_images", "idx_test_labels"),
                train.num_classes,
            )
            return train, test
        return split_dataset(train, config.test_per_class, config.data_seed)

    full = synth_dataset(
        config.num_classes,
        config.input_dim,
        config.samples_per_class,
        config.class_sep,
        config.noise_sigma,
        config.data_seed,
    )
    return split_dataset(full, config.test_per_class, config.data_seed)


class FederatedSimulator:
    """Aggregator plus simulated devices for one experiment."""

    def __init__(
        self,
        config: ExperimentConfig,
        data: tuple[Dataset, Dataset] | None = None,
        workers: int | None = None,
    ) -> None:
        """Build the data, the shards and the device registry.

        Args:
            config: Experiment configuration
            data: Pre-built ``(train, test)`` datasets, shared between simulators of a sweep
            workers: Thread count for per-slot training; defaults to ``config.workers``,
                then the ``FEDLGA_WORKERS`` environment variable, then 1
        """
        self.config = config
        self.train, self.test = data if data is not None else load_data(config)
        self.spec = ModelSpec(
            config.model,
            self.train.input_dim,
            self.train.num_classes,
            config.hidden_dim if config.model is ModelKind.MLP else 0,
        )
        self.strategy = config.strategy_config
        self.devices: dict[int, RemoteDevice] = {}
        for shard in partition_noniid(self.train, config.partition_spec):
            self.register_device(RemoteDevice(shard.device_id, shard))

        if workers is None:
            workers = config.workers or int(os.getenv("FEDLGA_WORKERS", "1"))
        self.workers = workers
        self._executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
        self.last_plan: RoundPlan | None = None
        self.last_diagnostics: list[ApproxDiagnostics] = []

    def __enter__(self) -> "FederatedSimulator":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()

    def close(self) -> None:
        """Shut down the worker pool, if any."""
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    # ========== Device registry ==========

    def register_device(self, device: RemoteDevice) -> int:
        """Add a device to the registry.

        Raises:
            ValueError: A device with the same id is already registered
        """
        if device.device_id in self.devices:
            msg = f"device {device.device_id} is already registered"
            raise ValueError(msg)
        self.devices[device.device_id] = device
        return device.device_id

    def get_device(self, device_id: int) -> RemoteDevice:
        """Look up a registered device.

        Raises:
            KeyError: Unknown device id
        """
        if device_id not in self.devices:
            msg = f"device {device_id} is not registered"
            raise KeyError(msg)
        return self.devices[device_id]

    def list_all_devices(self) -> list[int]:
        return sorted(self.devices)

    def get_device_details(self, device_id: int) -> dict[str, Any] | None:
        """Shard metadata and participation counters of a device, or None if unknown."""
        device = self.devices.get(device_id)
        if device is None:
            return None
        return {"metadata": device.get_metadata().to_dict(), "current_state": device.get_status()}

    @property
    def shards(self) -> list[Shard]:
        return [self.devices[i].shard for i in self.list_all_devices()]

    # ========== Training ==========

    def init_params(self) -> ParamVector:
        """Initial joint model, derived from the run seed."""
        stream = RngStream(self.config.seed, 0, 0, Purpose.INIT).generator()
        return model.init_params(self.spec, int(stream.integers(0, 2**63)))

    def plan(self, t: int) -> RoundPlan:
        """Sample this round's slots and designate its stragglers."""
        config = self.config
        if config.participation is Participation.FULL:
            selected = list(range(config.n_devices))
        else:
            sampler = RngStream(config.seed, t, 0, Purpose.SAMPLING).generator()
            selected = sample_devices(config.n_devices, config.k_selected, sampler)
        planner = RngStream(config.seed, t, 0, Purpose.PLANNING).generator()
        return plan_round(selected, config.rho, config.effective_tau_max, planner)

    def _train_slot(
        self, w_t: ParamVector, t: int, plan: RoundPlan, slot: int, eta_l: float
    ) -> LocalUpdate:
        config = self.config
        return local_train(
            self.spec,
            w_t,
            self.devices[plan.selected[slot]].shard,
            plan.local_steps(slot, config.local_steps),
            eta_l,
            config.batch_size,
            self.strategy.local_objective(),
            RngStream(config.seed, t, slot, Purpose.BATCHES).sampler_state(),
            config.local_steps,
        )

    def evaluate(
        self, params: ParamVector, device_ids: list[int] | None = None
    ) -> dict[str, float]:
        """Training loss on the given devices' shards plus test loss and accuracy."""
        ids = sorted(set(device_ids)) if device_ids is not None else self.list_all_devices()
        features = np.concatenate([self.devices[i].shard.features for i in ids])
        labels = np.concatenate([self.devices[i].shard.labels for i in ids])
        train_batch = model.Batch(features, labels)
        test_batch = self.test.as_batch()
        return {
            "train_loss": model.forward_loss(self.spec, params, train_batch),
            "test_loss": model.forward_loss(self.spec, params, test_batch),
            "test_accuracy": model.accuracy(self.spec, params, test_batch),
        }

    def run_round(
        self, w_t: ParamVector, t: int, evaluate: bool = True
    ) -> tuple[ParamVector, RoundRecord | None]:
        """Execute round ``t`` from the joint model ``w_t``.

        Returns:
            The next joint model and, if ``evaluate`` is set, the round's record

        Raises:
            DivergenceError: Local training or aggregation produced non-finite parameters
        """
        if not model.is_finite(w_t):
            msg = f"round {t} received a non-finite joint model"
            raise DivergenceError(msg, round_index=t, strategy=self.strategy.variant.value)
        start = time.perf_counter()
        config = self.config
        eta_l = lr_schedule(config.eta_l, config.gamma, t)
        plan = self.plan(t)
        slots = range(len(plan.selected))

        try:
            if self._executor is None:
                updates = [self._train_slot(w_t, t, plan, slot, eta_l) for slot in slots]
            else:
                updates = list(
                    self._executor.map(lambda s: self._train_slot(w_t, t, plan, s, eta_l), slots)
                )
        except DivergenceError as exc:
            msg = f"round {t} ({self.strategy.variant.value}): {exc}"
            logger.warning(msg)
            raise DivergenceError(msg, round_index=t, strategy=self.strategy.variant.value) from exc

        if self.strategy.corrects_stragglers:
            results = correct_stragglers(w_t, updates, eta_l)
        else:
            results = [SlotResult(slot, u, u.delta) for slot, u in enumerate(updates)]
        w_next = aggregate(self.strategy, w_t, results)
        if not model.is_finite(w_next):
            msg = f"round {t} ({self.strategy.variant.value}): aggregated model is not finite"
            logger.warning(msg)
            raise DivergenceError(msg, round_index=t, strategy=self.strategy.variant.value)

        stragglers = set(plan.straggler_slots)
        for slot, device_id in enumerate(plan.selected):
            self.devices[device_id].record_participation(t, slot in stragglers)
        self.last_plan = plan
        self.last_diagnostics = [r.diagnostics for r in results if r.diagnostics is not None]

        if not evaluate:
            return w_next, None
        metrics = self.evaluate(w_next, list(plan.selected))
        record = RoundRecord(
            round=t,
            strategy=self.strategy.variant.value,
            seed=config.seed,
            train_loss=metrics["train_loss"],
            test_loss=metrics["test_loss"],
            test_accuracy=metrics["test_accuracy"],
            rho_effective=plan.rho_effective,
            eta_l=eta_l,
            wall_ms=(time.perf_counter() - start) * 1000.0,
        )
        logger.debug(
            "round %d %s: train_loss=%.4f test_acc=%.4f",
            t,
            record.strategy,
            record.train_loss,
            record.test_accuracy,
        )
        return w_next, record

    def run_experiment(
        self, initial: ParamVector | None = None
    ) -> tuple[ParamVector, list[RoundRecord]]:
        """Run all configured rounds, stopping early only when ``early_stop`` is set."""
        config = self.config
        params = self.init_params() if initial is None else initial
        records: list[RoundRecord] = []
        logger.info(
            "Starting %s run: seed=%d rounds=%d rho=%s K=%d E=%d",
            config.strategy.value,
            config.seed,
            config.rounds,
            config.rho,
            config.slots_per_round,
            config.local_steps,
        )
        for t in range(config.rounds):
            evaluate = (t + 1) % config.eval_every == 0 or t == config.rounds - 1
            params, record = self.run_round(params, t, evaluate=evaluate)
            if record is None:
                continue
            records.append(record)
            target = config.target_accuracy
            if config.early_stop and target is not None and record.test_accuracy >= target:
                logger.info("Target accuracy %.4f reached in round %d; stopping", target, t)
                break
        if records:
            logger.info(
                "Finished %s run: final test_acc=%.4f",
                config.strategy.value,
                records[-1].test_accuracy,
            )
        return params, records


def run_round(
    w_t: ParamVector,
    config: ExperimentConfig,
    t: int,
    simulator: FederatedSimulator | None = None,
) -> tuple[ParamVector, RoundRecord]:
    """One evaluated round of the experiment described by ``config``."""
    if simulator is None:
        with FederatedSimulator(config) as sim:
            return sim.run_round(w_t, t)
    return simulator.run_round(w_t, t)


def run_experiment(
    config: ExperimentConfig, data: tuple[Dataset, Dataset] | None = None
) -> tuple[ParamVector, list[RoundRecord]]:
    """Run a full experiment and return the final joint model and the round records."""
    with FederatedSimulator(config, data=data) as simulator:
        return simulator.run_experiment()
