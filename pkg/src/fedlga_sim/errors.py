"""Exception hierarchy for the simulator.

Every error derives from :class:`FedLGAError` and from the builtin exception a caller would
naturally catch, so ``except ValueError`` keeps working for config and format problems.
"""


class FedLGAError(Exception):
    """Base class for all simulator errors."""


class ConfigError(FedLGAError, ValueError):
    """A configuration value is unknown, malformed or violates an invariant.

    Attributes:
        keys: Config keys involved in the problem, in the order they are named
    """

    def __init__(self, message: str, keys: tuple[str, ...] | list[str] = ()) -> None:
        super().__init__(message)
        self.keys = tuple(keys)


class DimensionMismatchError(FedLGAError, ValueError):
    """Parameter or feature dimensions do not agree."""


class EmptyDatasetError(FedLGAError, ValueError):
    """An operation needs at least one sample."""


class PartitionError(FedLGAError, ValueError):
    """A non-i.i.d. partition cannot be built for the requested layout."""


class IdxFormatError(FedLGAError, ValueError):
    """Base class for IDX decoding problems."""


class BadMagicError(IdxFormatError):
    """The IDX magic number is not the expected one."""


class TruncatedFileError(IdxFormatError):
    """The IDX file ends before its header or payload is complete."""


class CountMismatchError(IdxFormatError):
    """Image and label files hold a different number of items."""


class CheckpointError(FedLGAError, ValueError):
    """Base class for checkpoint decoding problems."""


class CheckpointMagicError(CheckpointError):
    """The checkpoint does not start with the expected magic bytes."""


class CheckpointTruncatedError(CheckpointError):
    """The checkpoint payload is shorter than its header announces."""


class CheckpointDimensionError(CheckpointError):
    """The checkpoint dimension differs from the one the caller expects."""


class DivergenceError(FedLGAError, ArithmeticError):
    """Training produced non-finite parameters.

    Attributes:
        round_index: Communication round in which divergence was detected (None for local runs)
        strategy: Strategy tag of the run, if known
    """

    def __init__(
        self, message: str, round_index: int | None = None, strategy: str | None = None
    ) -> None:
        super().__init__(message)
        self.round_index = round_index
        self.strategy = strategy
