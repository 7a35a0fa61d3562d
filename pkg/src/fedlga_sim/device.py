"""Device-side local training and the remote device registry entries."""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any

import numpy as np

from fedlga_sim.data import SamplerState, Shard, ShardSummary, sample_batch
from fedlga_sim.errors import DivergenceError, EmptyDatasetError
from fedlga_sim.model import ModelSpec, ParamVector, gradient, is_finite

logger = logging.getLogger(__name__)


class ObjectiveVariant(str, Enum):
    """Local objective families."""

    PLAIN = "plain"
    PROX = "prox"


@dataclass(frozen=True)
class LocalObjective:
    """Local objective: plain empirical loss, or loss plus ``mu/2 * ||w - w_t||^2``."""

    variant: ObjectiveVariant = ObjectiveVariant.PLAIN
    mu: float = 0.0

    def __post_init__(self) -> None:
        if self.mu < 0:
            msg = f"mu must be nonnegative, got {self.mu}"
            raise ValueError(msg)
        if self.variant is ObjectiveVariant.PROX and self.mu <= 0:
            msg = f"the proximal objective needs mu > 0, got {self.mu}"
            raise ValueError(msg)

    @classmethod
    def plain(cls) -> "LocalObjective":
        return cls(ObjectiveVariant.PLAIN, 0.0)

    @classmethod
    def prox(cls, mu: float) -> "LocalObjective":
        return cls(ObjectiveVariant.PROX, mu)


@dataclass(frozen=True, eq=False)
class LocalUpdate:
    """What a device sends back after a round.

    Args:
        device_id: Device that trained
        delta: ``w_final - w_t``
        tau: Staleness ``E - E_i + 1``
        epochs_run: Local steps actually performed ``E_i``
        sample_count: Size of the device's shard
        final_params: Parameters after the last step
        sampler_state: Batch stream position after the last step
        path_length: ``eta_l * sum ||g_step||`` over the performed steps
    """

    device_id: int
    delta: ParamVector
    tau: int
    epochs_run: int
    sample_count: int
    final_params: ParamVector | None = None
    sampler_state: SamplerState | None = None
    path_length: float = 0.0

    @property
    def is_full(self) -> bool:
        """True for a device that ran all configured local steps."""
        return self.tau == 1


def _train_steps(
    spec: ModelSpec,
    start: ParamVector,
    shard: Shard,
    steps: int,
    eta_l: float,
    batch_size: int,
    objective: LocalObjective,
    anchor: ParamVector,
    rng_state: SamplerState,
) -> tuple[ParamVector, SamplerState, float]:
    params = start.copy()
    state = rng_state
    path = 0.0
    prox = objective.variant is ObjectiveVariant.PROX
    for _ in range(steps):
        batch, state = sample_batch(shard, batch_size, state)
        step = gradient(spec, params, batch)
        if prox:
            step = step + objective.mu * (params - anchor)
        path += eta_l * float(np.linalg.norm(step))
        params = params - eta_l * step
    return params, state, path


def local_train(
    spec: ModelSpec,
    w_t: ParamVector,
    shard: Shard,
    local_steps: int,
    eta_l: float,
    batch_size: int,
    objective: LocalObjective,
    rng_state: SamplerState,
    total_steps: int,
) -> LocalUpdate:
    """Run ``local_steps`` SGD steps from the received joint model.

    Args:
        spec: Model shape
        w_t: Joint model received this round
        shard: The device's data
        local_steps: Steps this device completes (E_i)
        eta_l: Local learning rate
        batch_size: Minibatch size
        objective: Plain or proximal local objective (anchored at ``w_t``)
        rng_state: Start of the device's batch stream for this round
        total_steps: Configured local steps of the round (E)

    Returns:
        The device's update with ``tau = E - E_i + 1``

    Raises:
        ValueError: ``local_steps`` outside ``[1, total_steps]`` or ``eta_l <= 0``
        EmptyDatasetError: The shard has no samples
        DivergenceError: Training produced non-finite parameters
    """
    if not 1 <= local_steps <= total_steps:
        msg = f"local_steps must lie in [1, {total_steps}], got {local_steps}"
        raise ValueError(msg)
    if eta_l <= 0:
        msg = f"eta_l must be positive, got {eta_l}"
        raise ValueError(msg)
    if len(shard) == 0:
        msg = f"device {shard.device_id} has an empty shard"
        raise EmptyDatasetError(msg)

    final, state, path = _train_steps(
        spec, w_t, shard, local_steps, eta_l, batch_size, objective, w_t, rng_state
    )
    if not is_finite(final):
        msg = f"device {shard.device_id} diverged after {local_steps} local steps"
        raise DivergenceError(msg)
    return LocalUpdate(
        device_id=shard.device_id,
        delta=final - w_t,
        tau=total_steps - local_steps + 1,
        epochs_run=local_steps,
        sample_count=len(shard),
        final_params=final,
        sampler_state=state,
        path_length=path,
    )


def continue_train(
    spec: ModelSpec,
    w_partial: ParamVector,
    shard: Shard,
    extra_steps: int,
    eta_l: float,
    batch_size: int,
    rng_state: SamplerState,
    objective: LocalObjective | None = None,
    anchor: ParamVector | None = None,
) -> ParamVector:
    """Resume the SGD recursion for ``extra_steps`` more steps.

    Passing the ``final_params`` and ``sampler_state`` of a :class:`LocalUpdate` continues
    that exact trajectory.
    """
    if extra_steps < 0:
        msg = f"extra_steps must be nonnegative, got {extra_steps}"
        raise ValueError(msg)
    if extra_steps == 0:
        return w_partial
    objective = objective or LocalObjective.plain()
    if objective.variant is ObjectiveVariant.PROX and anchor is None:
        msg = "continuing a proximal objective needs the round's anchor"
        raise ValueError(msg)
    final, _, _ = _train_steps(
        spec,
        w_partial,
        shard,
        extra_steps,
        eta_l,
        batch_size,
        objective,
        w_partial if anchor is None else anchor,
        rng_state,
    )
    return final


# ========== Device registry entries ==========


@dataclass
class RemoteDevice:
    """A simulated remote device holding one private shard."""

    device_id: int
    shard: Shard
    times_selected: int = 0
    times_straggled: int = 0
    last_round: int | None = None

    def get_metadata(self) -> ShardSummary:
        """Static description of the device's data."""
        return ShardSummary.of(self.shard)

    def record_participation(self, round_index: int, straggled: bool) -> None:
        self.times_selected += 1
        if straggled:
            self.times_straggled += 1
        self.last_round = round_index

    def get_status(self) -> dict[str, Any]:
        return {
            "times_selected": self.times_selected,
            "times_straggled": self.times_straggled,
            "last_round": self.last_round,
        }
