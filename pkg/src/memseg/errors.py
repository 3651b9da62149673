"""Exception taxonomy shared across the package.

Everything raised on purpose derives from MemsegError so callers can catch
one base class at CLI boundaries and map it to an exit code.
"""


class MemsegError(Exception):
    """Base class for all deliberate failures."""


class DimensionError(MemsegError):
    """Array rank or extents incompatible with the requested operation."""


class ContractError(MemsegError):
    """A documented precondition was violated by the caller."""


class StateError(MemsegError):
    """Operation invoked in the wrong lifecycle state (e.g. uninitialized bank)."""


class FormatError(MemsegError):
    """A serialized artifact (checkpoint, bank, PGM, config) failed to parse."""


class InsufficientDataError(MemsegError):
    """Not enough samples/tokens to carry out the requested fit."""


class NonFiniteError(MemsegError):
    """A NaN or Inf showed up where only finite values are allowed."""


class TrainingDiverged(MemsegError):
    """Training hit a non-finite loss; the message carries a diagnostics dump
    (epoch, last K, weight norm) so the run can be post-mortemed."""
