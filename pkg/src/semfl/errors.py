"""Exception hierarchy shared across the package."""

from __future__ import annotations


class SemflError(Exception):
    """Base class for all package errors."""


class InvalidInputError(SemflError):
    """An argument violates a documented precondition."""


class InfeasiblePartitionError(SemflError):
    """The requested partition cannot be satisfied by the dataset."""


class ConfigError(SemflError):
    """A configuration is malformed or internally inconsistent."""


class StateError(SemflError):
    """An operation was called before its required state was established."""


class ProviderError(SemflError):
    """A feature provider is unavailable or failed to produce output."""


class IntegrityError(SemflError):
    """Persisted data does not match its recorded manifest."""


class FormatError(SemflError):
    """Persisted data is truncated or structurally unreadable."""


class ReducedRankError(SemflError):
    """Requested projection rank exceeds the rank of the data.

    Carries ``achievable``, the largest rank the data supports.
    """

    def __init__(self, message: str, achievable: int):
        super().__init__(message)
        self.achievable = achievable


class TrainingDivergedError(SemflError):
    """Local training produced a non-finite loss.

    Carries ``epoch`` (and optionally ``client_id`` / ``round_idx``) for context.
    """

    def __init__(self, message: str, epoch: int, client_id: int | None = None,
                 round_idx: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.client_id = client_id
        self.round_idx = round_idx
