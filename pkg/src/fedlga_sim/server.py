"""Aggregator-side logic: sampling, straggler planning, the FedLGA correction and aggregation.

The correction replaces a straggler's partial update with a first-order Taylor estimate of
the update it would have sent after the full ``E`` steps. The Hessian is approximated by the
outer product of the straggler's average gradient, applied as a Hessian-vector product so the
cost stays linear in the parameter count.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from fedlga_sim.device import LocalObjective, LocalUpdate
from fedlga_sim.errors import DimensionMismatchError
from fedlga_sim.model import ParamVector

logger = logging.getLogger(__name__)


class Strategy(str, Enum):
    """Aggregation strategies."""

    FEDLGA = "fedlga"
    FEDAVG = "fedavg"
    FEDPROX = "fedprox"
    FEDNOVA = "fednova"


@dataclass(frozen=True)
class StrategyConfig:
    """Strategy and its server-side hyperparameters.

    Args:
        variant: Strategy tag
        eta_g: Global learning rate (fedlga and fednova; fedavg and fedprox always use 1)
        mu: Proximal weight (fedprox only)
    """

    variant: Strategy = Strategy.FEDLGA
    eta_g: float = 1.0
    mu: float = 1.0

    def __post_init__(self) -> None:
        if self.eta_g <= 0:
            msg = f"eta_g must be positive, got {self.eta_g}"
            raise ValueError(msg)
        if self.variant is Strategy.FEDPROX and self.mu <= 0:
            msg = f"fedprox needs mu > 0, got {self.mu}"
            raise ValueError(msg)

    @property
    def global_rate(self) -> float:
        if self.variant in (Strategy.FEDLGA, Strategy.FEDNOVA):
            return self.eta_g
        return 1.0

    @property
    def corrects_stragglers(self) -> bool:
        return self.variant is Strategy.FEDLGA

    def local_objective(self) -> LocalObjective:
        if self.variant is Strategy.FEDPROX:
            return LocalObjective.prox(self.mu)
        return LocalObjective.plain()


@dataclass(frozen=True)
class RoundPlan:
    """Who trains this round and how many steps each slot completes.

    Args:
        selected: Device id per slot (repeats allowed)
        straggler_slots: Slots designated as stragglers, ascending
        tau_draws: Staleness per slot (1 for full workers)
    """

    selected: tuple[int, ...]
    straggler_slots: tuple[int, ...]
    tau_draws: tuple[int, ...]

    def local_steps(self, slot: int, total_steps: int) -> int:
        """E_i of the slot: ``E - tau + 1``."""
        return total_steps - self.tau_draws[slot] + 1

    @property
    def rho_effective(self) -> float:
        return len(self.straggler_slots) / len(self.selected)


@dataclass(frozen=True)
class ApproxDiagnostics:
    """Per-straggler record of the correction applied."""

    slot: int
    device_id: int
    raw_norm: float
    correction_norm: float
    used_fallback: bool

    def to_dict(self) -> dict[str, object]:
        return {
            "slot": self.slot,
            "device_id": self.device_id,
            "raw_norm": self.raw_norm,
            "correction_norm": self.correction_norm,
            "used_fallback": self.used_fallback,
        }


@dataclass
class SlotResult:
    """A slot's update together with the delta that enters aggregation."""

    slot: int
    update: LocalUpdate
    delta: ParamVector
    diagnostics: ApproxDiagnostics | None = field(default=None)


def straggler_count(rho: float, k: int) -> int:
    """round(rho * K), halves rounded up."""
    return min(k, math.floor(rho * k + 0.5))


def sample_devices(
    n_devices: int, k_selected: int, rng: np.random.Generator, replace: bool = True
) -> list[int]:
    """Pick K device slots uniformly from N devices.

    Args:
        n_devices: Device count N
        k_selected: Slots per round K
        rng: Sampling stream of the round
        replace: With replacement (default); without replacement requires ``K <= N``

    Returns:
        Device id per slot
    """
    if n_devices < 1 or k_selected < 1:
        msg = f"need N >= 1 and K >= 1, got N={n_devices} K={k_selected}"
        raise ValueError(msg)
    if not replace and k_selected > n_devices:
        msg = f"cannot draw K={k_selected} distinct devices out of N={n_devices}"
        raise ValueError(msg)
    if replace:
        return [int(i) for i in rng.integers(0, n_devices, size=k_selected)]
    return [int(i) for i in rng.choice(n_devices, size=k_selected, replace=False)]


def plan_round(
    selected: Sequence[int], rho: float, tau_max: int, rng: np.random.Generator
) -> RoundPlan:
    """Designate ``round(rho*K)`` straggler slots and draw their staleness from ``{2..tau_max}``.

    Raises:
        ValueError: ``rho`` outside [0, 1], or ``rho > 0`` with ``tau_max < 2``
    """
    if not 0.0 <= rho <= 1.0:
        msg = f"rho must lie in [0, 1], got {rho}"
        raise ValueError(msg)
    k = len(selected)
    count = straggler_count(rho, k)
    if count and tau_max < 2:
        msg = f"rho={rho} designates stragglers but tau_max={tau_max} < 2"
        raise ValueError(msg)

    slots = sorted(int(s) for s in rng.choice(k, size=count, replace=False)) if count else []
    taus = [1] * k
    if slots:
        draws = rng.integers(2, tau_max + 1, size=count)
        for slot, tau in zip(slots, draws, strict=True):
            taus[slot] = int(tau)
    return RoundPlan(tuple(int(d) for d in selected), tuple(slots), tuple(taus))


def full_participation_plan(
    n_devices: int, rho: float, tau_max: int, rng: np.random.Generator
) -> RoundPlan:
    """Plan a round in which every device trains exactly once."""
    return plan_round(list(range(n_devices)), rho, tau_max, rng)


def estimate_full_model(w_t: ParamVector, full_updates: Sequence[LocalUpdate]) -> ParamVector:
    """First-order estimate of where a full local run lands: ``w_t`` plus the mean full delta.

    With no full workers the estimate falls back to ``w_t``.
    """
    if not full_updates:
        return w_t.copy()
    total = np.zeros_like(w_t)
    for update in full_updates:
        total = total + update.delta
    return w_t + total / len(full_updates)


def hessian_vector_apply(g: ParamVector, v: ParamVector) -> ParamVector:
    """Product of the outer-product Hessian surrogate ``g g^T`` with ``v``."""
    if g.shape != v.shape:
        msg = f"g has shape {g.shape} but v has shape {v.shape}"
        raise DimensionMismatchError(msg)
    return g * float(g @ v)


def approximate_update(
    update: LocalUpdate,
    w_t: ParamVector,
    w_hat: ParamVector,
    eta_l: float,
    used_fallback: bool = False,
    slot: int = 0,
) -> tuple[ParamVector, ApproxDiagnostics]:
    """Taylor-corrected update of a straggler.

    The straggler's end point is ``w_i = w_t + delta`` and its average gradient
    ``g = -delta / (eta_l * E_i)``; the result is ``delta + g g^T (w_hat - w_i)``.

    Args:
        update: The straggler's update (``tau > 1``)
        w_t: Joint model of the round
        w_hat: Estimated full-run end point (:func:`estimate_full_model`)
        eta_l: Local learning rate used this round
        used_fallback: Whether ``w_hat`` came from the no-full-worker fallback
        slot: Slot index, recorded in the diagnostics

    Returns:
        Corrected delta and its diagnostics
    """
    if eta_l <= 0:
        msg = f"eta_l must be positive, got {eta_l}"
        raise ValueError(msg)
    if update.tau == 1:
        msg = f"device {update.device_id} ran all local steps; full workers are not corrected"
        raise ValueError(msg)
    w_local = w_t + update.delta
    g = -update.delta / (eta_l * update.epochs_run)
    correction = hessian_vector_apply(g, w_hat - w_local)
    diagnostics = ApproxDiagnostics(
        slot=slot,
        device_id=update.device_id,
        raw_norm=float(np.linalg.norm(update.delta)),
        correction_norm=float(np.linalg.norm(correction)),
        used_fallback=used_fallback,
    )
    return update.delta + correction, diagnostics


def correct_stragglers(
    w_t: ParamVector, updates: Sequence[LocalUpdate], eta_l: float
) -> list[SlotResult]:
    """Apply the FedLGA correction to every straggler slot, leaving full workers untouched."""
    full = [u for u in updates if u.is_full]
    used_fallback = not full
    if used_fallback and len(full) != len(updates):
        logger.warning("No full workers this round; estimating the full model as w_t")
    w_hat = estimate_full_model(w_t, full)

    results = []
    for slot, update in enumerate(updates):
        if update.is_full:
            results.append(SlotResult(slot, update, update.delta))
            continue
        corrected, diagnostics = approximate_update(
            update, w_t, w_hat, eta_l, used_fallback=used_fallback, slot=slot
        )
        results.append(SlotResult(slot, update, corrected, diagnostics))
    return results


def aggregate(
    strategy: StrategyConfig, w_t: ParamVector, results: Sequence[SlotResult]
) -> ParamVector:
    """Combine the slot deltas into the next joint model.

    Summation always runs in slot order starting from zeros.

    - fedlga: ``w_t + eta_g * mean(delta)`` where stragglers carry corrected deltas
    - fedavg, fedprox: ``w_t + mean(delta)``
    - fednova: ``w_t + eta_g * tau_eff * mean(delta / E_i)`` with ``tau_eff = mean(E_i)``
    """
    if not results:
        msg = "aggregate needs at least one update"
        raise ValueError(msg)
    k = len(results)
    total = np.zeros_like(w_t)
    for result in sorted(results, key=lambda r: r.slot):
        if result.delta.shape != w_t.shape:
            msg = f"slot {result.slot} delta has shape {result.delta.shape}, expected {w_t.shape}"
            raise DimensionMismatchError(msg)
        if strategy.variant is Strategy.FEDNOVA:
            total = total + result.delta / result.update.epochs_run
        else:
            total = total + result.delta

    if strategy.variant is Strategy.FEDNOVA:
        tau_eff = sum(r.update.epochs_run for r in results) / k
        return w_t + strategy.eta_g * tau_eff * (total / k)
    return w_t + strategy.global_rate * (total / k)
