"""Counter-based random streams keyed by ``(master_seed, round, slot, purpose)``.

Every random decision in a run draws from its own stream, so results never depend on the
order in which threads happen to consume randomness.
"""

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from fedlga_sim.data import SamplerState

_SEED_MASK = (1 << 64) - 1


class Purpose(IntEnum):
    """What a stream is used for; part of the derivation key."""

    SAMPLING = 1
    PLANNING = 2
    BATCHES = 3
    INIT = 4
    TRIAL = 5
    ORACLE = 6


@dataclass(frozen=True)
class RngStream:
    """Derivation key of one independent random stream.

    Args:
        master_seed: Seed of the whole run
        round_index: Communication round ``t`` (or trial index for studies)
        slot: Slot index inside the round, 0 when the stream is round-wide
        purpose: Tag separating streams that share the other fields
    """

    master_seed: int
    round_index: int = 0
    slot: int = 0
    purpose: Purpose = Purpose.SAMPLING

    @property
    def key(self) -> tuple[int, ...]:
        return (self.master_seed & _SEED_MASK, self.round_index, self.slot, int(self.purpose))

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(self.key))))

    def sampler_state(self) -> SamplerState:
        """Batch-sampler state positioned at the first batch of this stream."""
        return SamplerState(key=self.key)

    def child(self, slot: int, purpose: Purpose) -> "RngStream":
        return RngStream(self.master_seed, self.round_index, slot, purpose)
