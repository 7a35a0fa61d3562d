"""Empirical checks of the algorithm's structural claims.

Studies return plain report dataclasses; the check suites wrap them with pass/fail thresholds
for the ``check`` command.
"""

import logging
import math
import tempfile
import time
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from fedlga_sim import model
from fedlga_sim.data import Dataset, PartitionSpec, Shard, encode_idx, load_idx, partition_noniid
from fedlga_sim.device import LocalObjective, continue_train, local_train
from fedlga_sim.errors import DivergenceError
from fedlga_sim.model import ModelKind, ModelSpec, ParamVector
from fedlga_sim.persistence import read_checkpoint, write_checkpoint, write_metrics
from fedlga_sim.rng import Purpose, RngStream
from fedlga_sim.server import (
    Strategy,
    approximate_update,
    estimate_full_model,
    hessian_vector_apply,
    sample_devices,
)
from fedlga_sim.simulation import (
    ExperimentConfig,
    FederatedSimulator,
    load_data,
    rounds_to_target,
)

logger = logging.getLogger(__name__)

DEFAULT_ETA_GRID = (1e-3, 3e-3, 1e-2, 3e-2, 1e-1)


# ========== Approximation error ==========


@dataclass(frozen=True)
class ApproxTrial:
    """One straggler whose true full-run update is known."""

    eta_l: float
    tau: int
    corrected_error: float
    raw_error: float
    grad_norm: float

    @property
    def corrected_wins(self) -> bool:
        return self.corrected_error < self.raw_error


@dataclass
class ApproxErrorReport:
    """Outcome of :func:`approximation_error_study`."""

    trials: list[ApproxTrial]
    win_rate: float
    eta_exponent: float
    tau_exponent: float
    eta_medians: dict[float, float]
    tau_medians: dict[int, float]
    empirical_m: float
    diverged: int = 0

    @property
    def tau_monotone(self) -> bool:
        """True when the median error never decreases as tau grows."""
        medians = [self.tau_medians[tau] for tau in sorted(self.tau_medians)]
        return all(a <= b for a, b in zip(medians, medians[1:], strict=False))

    def to_dict(self) -> dict[str, Any]:
        return {
            "trials": len(self.trials),
            "diverged": self.diverged,
            "win_rate": self.win_rate,
            "eta_exponent": self.eta_exponent,
            "tau_exponent": self.tau_exponent,
            "eta_medians": {str(k): v for k, v in self.eta_medians.items()},
            "tau_medians": {str(k): v for k, v in self.tau_medians.items()},
            "tau_monotone": self.tau_monotone,
            "empirical_m": self.empirical_m,
        }


def measure_approximation(
    spec: ModelSpec,
    w_t: ParamVector,
    target: Shard,
    full_workers: list[Shard],
    total_steps: int,
    tau: int,
    eta_l: float,
    batch_size: int,
    stream: RngStream,
) -> ApproxTrial:
    """Compare the corrected and raw straggler updates against the true full-run update.

    The straggler trains ``E - tau + 1`` steps, then the same batch stream is resumed for the
    remaining ``tau - 1`` steps, which yields the update it would have sent as a full worker.
    """
    objective = LocalObjective.plain()
    local_steps = total_steps - tau + 1
    update = local_train(
        spec,
        w_t,
        target,
        local_steps,
        eta_l,
        batch_size,
        objective,
        stream.child(0, Purpose.BATCHES).sampler_state(),
        total_steps,
    )
    grad_norm = float(np.linalg.norm(update.delta)) / (eta_l * local_steps)
    if tau == 1:
        return ApproxTrial(eta_l, tau, 0.0, 0.0, grad_norm)

    w_full = continue_train(
        spec, update.final_params, target, tau - 1, eta_l, batch_size, update.sampler_state
    )
    if not model.is_finite(w_full):
        msg = f"oracle continuation diverged (eta_l={eta_l}, tau={tau})"
        raise DivergenceError(msg)
    true_delta = w_full - w_t

    full_updates = [
        local_train(
            spec,
            w_t,
            shard,
            total_steps,
            eta_l,
            batch_size,
            objective,
            stream.child(slot, Purpose.BATCHES).sampler_state(),
            total_steps,
        )
        for slot, shard in enumerate(full_workers, start=1)
    ]
    w_hat = estimate_full_model(w_t, full_updates)
    corrected, _ = approximate_update(update, w_t, w_hat, eta_l, used_fallback=not full_updates)
    return ApproxTrial(
        eta_l=eta_l,
        tau=tau,
        corrected_error=float(np.linalg.norm(true_delta - corrected)),
        raw_error=float(np.linalg.norm(true_delta - update.delta)),
        grad_norm=grad_norm,
    )


def _loglog_slope(xs: list[float], ys: list[float]) -> float:
    points = [(x, y) for x, y in zip(xs, ys, strict=True) if x > 0 and y > 0]
    if len(points) < 2:
        return math.nan
    log_x = np.log([p[0] for p in points])
    log_y = np.log([p[1] for p in points])
    return float(np.polyfit(log_x, log_y, 1)[0])


def approximation_error_study(
    config: ExperimentConfig,
    trials: int,
    eta_grid: tuple[float, ...] = DEFAULT_ETA_GRID,
    data: tuple[Dataset, Dataset] | None = None,
) -> ApproxErrorReport:
    """Measure how far corrected and raw straggler updates land from the true full update.

    Trials cycle through the grid ``eta_grid x {2..tau_max}``. Each trial samples K devices;
    slot 0 is the straggler and the other slots act as full workers for the estimate of the
    full-run model. Slopes are least-squares fits on log-log scale of the per-grid-point
    median error; the tau medians are normalized by ``eta_l`` so every tau mixes the same
    learning rates.

    Raises:
        ValueError: Fewer than 30 trials, or ``tau_max < 2``
    """
    if trials < 30:
        msg = f"the study needs at least 30 trials, got {trials}"
        raise ValueError(msg)
    if config.effective_tau_max < 2:
        msg = f"the study needs tau_max >= 2, got {config.effective_tau_max}"
        raise ValueError(msg)

    simulator = FederatedSimulator(config, data=data, workers=1)
    shards = simulator.shards
    taus = list(range(2, config.effective_tau_max + 1))
    results: list[ApproxTrial] = []
    diverged = 0
    for index in range(trials):
        eta_l = eta_grid[index % len(eta_grid)]
        tau = taus[(index // len(eta_grid)) % len(taus)]
        stream = RngStream(config.seed, index, 0, Purpose.TRIAL)
        selected = sample_devices(
            config.n_devices, config.k_selected, stream.child(0, Purpose.SAMPLING).generator()
        )
        init_seed = int(stream.child(0, Purpose.INIT).generator().integers(0, 2**63))
        w_t = model.init_params(simulator.spec, init_seed)
        try:
            trial = measure_approximation(
                simulator.spec,
                w_t,
                shards[selected[0]],
                [shards[i] for i in selected[1:]],
                config.local_steps,
                tau,
                eta_l,
                config.batch_size,
                stream,
            )
        except DivergenceError as exc:
            logger.warning("Trial %d diverged: %s", index, exc)
            diverged += 1
            continue
        results.append(trial)

    if not results:
        msg = "every trial of the approximation study diverged"
        raise DivergenceError(msg)

    eta_medians = {
        eta: float(np.median([r.corrected_error for r in results if r.eta_l == eta]))
        for eta in eta_grid
        if any(r.eta_l == eta for r in results)
    }
    tau_medians = {
        tau: float(np.median([r.corrected_error / r.eta_l for r in results if r.tau == tau]))
        for tau in taus
        if any(r.tau == tau for r in results)
    }
    bounds = [
        r.corrected_error / (r.eta_l**2 * r.tau**2 * r.grad_norm**2)
        for r in results
        if r.grad_norm > 0
    ]
    report = ApproxErrorReport(
        trials=results,
        win_rate=sum(r.corrected_wins for r in results) / len(results),
        eta_exponent=_loglog_slope(list(eta_medians), list(eta_medians.values())),
        tau_exponent=_loglog_slope(
            [float(t) for t in tau_medians], list(tau_medians.values())
        ),
        eta_medians=eta_medians,
        tau_medians=tau_medians,
        empirical_m=max(bounds) if bounds else 0.0,
        diverged=diverged,
    )
    logger.info(
        "Approximation study: %d trials, win_rate=%.3f, eta exponent=%.3f",
        len(results),
        report.win_rate,
        report.eta_exponent,
    )
    return report


# ========== Sampling ==========


@dataclass
class SamplingReport:
    """Per-device selection frequency over many simulated rounds."""

    frequencies: list[float]
    expected: float
    max_deviation: float
    sigma: float
    trials: int

    @property
    def threshold(self) -> float:
        """Three standard deviations of a device's selection frequency."""
        return 3.0 * self.sigma

    @property
    def within_threshold(self) -> bool:
        return self.max_deviation <= self.threshold

    def to_dict(self) -> dict[str, Any]:
        return {
            "trials": self.trials,
            "expected": self.expected,
            "max_deviation": self.max_deviation,
            "sigma": self.sigma,
            "threshold": self.threshold,
            "within_threshold": self.within_threshold,
            "frequencies": self.frequencies,
        }


def sampling_study(n_devices: int, k_selected: int, trials: int, seed: int) -> SamplingReport:
    """Count how often each device is selected over ``trials`` rounds.

    A device's frequency is its selection count divided by ``trials`` (expected ``K/N``);
    its standard deviation is ``sqrt(K * (1/N) * (1 - 1/N) / trials)``.
    """
    if trials < 10_000:
        msg = f"the sampling study needs at least 10000 trials, got {trials}"
        raise ValueError(msg)
    rng = RngStream(seed, 0, 0, Purpose.SAMPLING).generator()
    counts = np.zeros(n_devices, dtype=np.int64)
    for _ in range(trials):
        for device_id in sample_devices(n_devices, k_selected, rng):
            counts[device_id] += 1
    frequencies = counts / trials
    expected = k_selected / n_devices
    p = 1.0 / n_devices
    return SamplingReport(
        frequencies=[float(f) for f in frequencies],
        expected=expected,
        max_deviation=float(np.max(np.abs(frequencies - expected))),
        sigma=math.sqrt(k_selected * p * (1.0 - p) / trials),
        trials=trials,
    )


# ========== FedAvg degeneracy ==========


@dataclass
class DegeneracyReport:
    """Comparison of a fedlga trajectory against fedavg on identical inputs."""

    identical: bool
    rounds_compared: int
    first_divergence: tuple[int, int] | None = None
    max_abs_diff: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "identical": self.identical,
            "rounds_compared": self.rounds_compared,
            "first_divergence": list(self.first_divergence) if self.first_divergence else None,
            "max_abs_diff": self.max_abs_diff,
        }


def degeneracy_check(
    config: ExperimentConfig, data: tuple[Dataset, Dataset] | None = None
) -> DegeneracyReport:
    """Run fedlga (as configured) and fedavg side by side and compare every joint model.

    Returns:
        Report with the first ``(round, coordinate)`` at which the models differ, if any
    """
    data = data if data is not None else load_data(config)
    lga_config = replace(config, strategy=Strategy.FEDLGA)
    avg_config = replace(config, strategy=Strategy.FEDAVG)
    max_diff = 0.0
    with (
        FederatedSimulator(lga_config, data=data) as lga,
        FederatedSimulator(avg_config, data=data) as avg,
    ):
        w_lga = lga.init_params()
        w_avg = avg.init_params()
        for t in range(config.rounds):
            try:
                w_lga, _ = lga.run_round(w_lga, t, evaluate=False)
            except DivergenceError:
                return DegeneracyReport(False, t + 1, (t, -1), math.inf)
            w_avg, _ = avg.run_round(w_avg, t, evaluate=False)
            diff = np.abs(w_lga - w_avg)
            max_diff = max(max_diff, float(diff.max()) if diff.size else 0.0)
            mismatched = np.flatnonzero(w_lga != w_avg)
            if mismatched.size:
                return DegeneracyReport(False, t + 1, (t, int(mismatched[0])), max_diff)
    return DegeneracyReport(True, config.rounds, None, max_diff)


# ========== Check suites ==========


@dataclass
class SuiteResult:
    """Outcome of one check suite."""

    name: str
    passed: bool
    details: dict[str, Any] = field(default_factory=dict)
    elapsed_ms: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "suite": self.name,
            "passed": self.passed,
            "elapsed_ms": self.elapsed_ms,
            **self.details,
        }


def _random_instance(rng: np.random.Generator) -> tuple[ModelSpec, ParamVector, model.Batch]:
    kind = ModelKind.MLP if rng.random() < 0.5 else ModelKind.LOGISTIC
    input_dim = int(rng.integers(1, 9))
    num_classes = int(rng.integers(2, 6))
    hidden = int(rng.integers(1, 6)) if kind is ModelKind.MLP else 0
    spec = ModelSpec(kind, input_dim, num_classes, hidden)
    n = int(rng.integers(1, 8))
    while True:
        params = rng.normal(0.0, 0.5, size=spec.num_params)
        features = rng.normal(0.0, 1.0, size=(n, input_dim))
        if kind is ModelKind.LOGISTIC:
            break
        (w1, b1), _ = model.unpack_params(spec, params)
        if np.min(np.abs(features @ w1 + b1)) > 1e-3:
            break
    labels = rng.integers(0, num_classes, size=n)
    return spec, params, model.Batch(features, labels)


def check_gradient(config: ExperimentConfig) -> SuiteResult:
    rng = RngStream(config.seed, 0, 0, Purpose.ORACLE).generator()
    worst = 0.0
    for _ in range(100):
        spec, params, batch = _random_instance(rng)
        analytic = model.gradient(spec, params, batch)
        numeric = model.finite_diff_gradient(spec, params, batch, h=1e-5)
        scale = max(float(np.linalg.norm(numeric)), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric)) / scale)
    return SuiteResult("gradient", worst < 1e-5, {"instances": 100, "max_rel_error": worst})


def check_hessian(config: ExperimentConfig) -> SuiteResult:
    rng = RngStream(config.seed, 0, 1, Purpose.ORACLE).generator()
    worst = 0.0
    for _ in range(1000):
        dim = int(rng.integers(1, 51))
        g = rng.normal(size=dim)
        v = rng.normal(size=dim)
        dense = np.outer(g, g) @ v
        worst = max(worst, float(np.max(np.abs(hessian_vector_apply(g, v) - dense))))
    return SuiteResult("hessian", worst <= 1e-12, {"cases": 1000, "max_abs_diff": worst})


def check_partition(config: ExperimentConfig) -> SuiteResult:
    failures = []
    grid = [(c, n, p) for c in (2, 3, 5, 10) for n in (5, 10, 30, 50) for p in (1, 2, 3)]
    cases = 0
    for num_classes, n_devices, per_device in grid:
        if per_device > num_classes or (n_devices * per_device) % num_classes:
            continue
        cases += 1
        per_class = 3 * n_devices * per_device // num_classes + 1
        total = num_classes * per_class
        features = np.arange(total, dtype=np.float64).reshape(-1, 1)
        labels = np.repeat(np.arange(num_classes), per_class)
        dataset = Dataset(features, labels, num_classes)
        shards = partition_noniid(dataset, PartitionSpec(n_devices, per_device, config.seed))
        owned = np.concatenate([s.features[:, 0] for s in shards])
        if len(owned) != total or len(np.unique(owned)) != total:
            failures.append(f"C={num_classes} N={n_devices} P={per_device}: coverage")
        if any(len(s.class_set) != per_device for s in shards):
            failures.append(f"C={num_classes} N={n_devices} P={per_device}: class count")
    return SuiteResult("partition", not failures, {"cases": cases, "failures": failures})


def check_sampling(config: ExperimentConfig) -> SuiteResult:
    report = sampling_study(50, 10, 100_000, config.seed)
    return SuiteResult("sampling", report.within_threshold, report.to_dict())


def check_degeneracy(config: ExperimentConfig) -> SuiteResult:
    report = degeneracy_check(replace(config, rho=0.0, eta_g=1.0, rounds=50))
    return SuiteResult("degeneracy", report.identical, report.to_dict())


def check_approximation(config: ExperimentConfig) -> SuiteResult:
    if config.effective_tau_max < 2:
        reason = f"needs tau_max >= 2, got {config.effective_tau_max}"
        return SuiteResult("approximation", False, {"skipped": reason})
    report = approximation_error_study(config, trials=200)
    passed = (
        1.5 <= report.eta_exponent <= 2.5 and report.tau_monotone and report.win_rate > 0.5
    )
    return SuiteResult("approximation", passed, report.to_dict())


def check_heterogeneity(config: ExperimentConfig) -> SuiteResult:
    base = replace(
        config,
        n_devices=50,
        k_selected=10,
        local_steps=5,
        rho=0.5,
        tau_max=4,
        model=ModelKind.LOGISTIC,
        num_classes=10,
        input_dim=20,
        class_sep=3.0,
        noise_sigma=1.0,
        rounds=300,
        target_accuracy=0.80,
        early_stop=True,
    )
    data = load_data(base)
    reached: dict[str, list[float]] = {"fedlga": [], "fedavg": []}
    for strategy in (Strategy.FEDLGA, Strategy.FEDAVG):
        for seed in range(5):
            run = replace(base, strategy=strategy, seed=seed)
            try:
                with FederatedSimulator(run, data=data) as simulator:
                    _, records = simulator.run_experiment()
                hit = rounds_to_target(records, 0.80)
            except DivergenceError as exc:
                logger.warning("%s seed %d diverged: %s", strategy.value, seed, exc)
                hit = None
            reached[strategy.value].append(math.inf if hit is None else float(hit))
    lga = float(np.median(reached["fedlga"]))
    avg = float(np.median(reached["fedavg"]))
    details = {
        "fedlga_median_rounds": lga,
        "fedavg_median_rounds": avg,
        "fedlga_rounds": reached["fedlga"],
        "fedavg_rounds": reached["fedavg"],
    }
    return SuiteResult("heterogeneity", lga <= avg and lga < 300, details)


def check_determinism(config: ExperimentConfig) -> SuiteResult:
    run = replace(config, rounds=20)
    data = load_data(run)
    with (
        FederatedSimulator(run, data=data, workers=1) as serial,
        FederatedSimulator(run, data=data, workers=4) as threaded,
    ):
        w_serial = serial.init_params()
        w_threaded = threaded.init_params()
        for t in range(run.rounds):
            w_serial, _ = serial.run_round(w_serial, t, evaluate=False)
            w_threaded, _ = threaded.run_round(w_threaded, t, evaluate=False)
            if not np.array_equal(w_serial, w_threaded):
                return SuiteResult("determinism", False, {"first_divergent_round": t})
    return SuiteResult("determinism", True, {"rounds": run.rounds})


def check_formats(config: ExperimentConfig) -> SuiteResult:
    failures = []
    rng = RngStream(config.seed, 0, 2, Purpose.ORACLE).generator()
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        for dim in (0, 1, 10_000):
            params = rng.normal(size=dim)
            path = write_checkpoint(params, root / f"ckpt_{dim}.bin")
            restored = read_checkpoint(path, expected_dim=dim)
            if restored.tobytes() != params.tobytes():
                failures.append(f"checkpoint dim={dim}")

        pixels = np.array([[[0, 255], [51, 102]], [[255, 0], [0, 153]]], dtype=np.uint8)
        image_bytes, label_bytes = encode_idx(pixels, np.array([1, 0]))
        (root / "img.idx").write_bytes(image_bytes)
        (root / "lbl.idx").write_bytes(label_bytes)
        decoded = load_idx(root / "img.idx", root / "lbl.idx")
        expected = np.array([[0.0, 1.0, 0.2, 0.4], [1.0, 0.0, 0.0, 0.6]])
        if not np.array_equal(decoded.features, expected) or decoded.labels.tolist() != [1, 0]:
            failures.append("idx decode")

        run = replace(config, rounds=3)
        texts = []
        for attempt in range(2):
            with FederatedSimulator(run) as simulator:
                _, records = simulator.run_experiment()
            path = write_metrics(records, root / f"metrics_{attempt}.csv")
            lines = path.read_text(encoding="utf-8").splitlines()
            texts.append([line.rsplit(",", 1)[0] for line in lines])
        if texts[0] != texts[1]:
            failures.append("metrics csv stability")
    return SuiteResult("formats", not failures, {"failures": failures})


SUITES: dict[str, Callable[[ExperimentConfig], SuiteResult]] = {
    "gradient": check_gradient,
    "hessian": check_hessian,
    "partition": check_partition,
    "sampling": check_sampling,
    "degeneracy": check_degeneracy,
    "approximation": check_approximation,
    "heterogeneity": check_heterogeneity,
    "determinism": check_determinism,
    "formats": check_formats,
}


def run_suite(name: str, config: ExperimentConfig) -> list[SuiteResult]:
    """Run one named suite, or every suite for ``all``."""
    if name == "all":
        names = list(SUITES)
    elif name in SUITES:
        names = [name]
    else:
        msg = f"unknown suite '{name}'; choose from {', '.join([*SUITES, 'all'])}"
        raise KeyError(msg)

    results = []
    for suite in names:
        start = time.perf_counter()
        result = SUITES[suite](config)
        result.elapsed_ms = (time.perf_counter() - start) * 1000.0
        logger.info("Suite %s %s", suite, "passed" if result.passed else "failed")
        results.append(result)
    return results
