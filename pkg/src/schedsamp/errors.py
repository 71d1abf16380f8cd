"""Exception hierarchy shared by the engine, model, trainer and CLI."""


class SchedSampError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(SchedSampError, ValueError):
    """Operand shapes do not conform for an operation."""


class NumericError(SchedSampError, ArithmeticError):
    """A non-finite value appeared in a forward or backward computation."""


class ContractError(SchedSampError, ValueError):
    """A precondition of an operation was violated."""


class DegenerateBatchError(ContractError):
    """Every position of a batch is padding, so no loss can be formed."""


class SequenceLengthError(ContractError):
    """A sequence is longer than the model's positional table."""


class UnsupportedCombinationError(ContractError):
    """Mixing strategy cannot be combined with backprop through the first pass."""


class ConfigError(SchedSampError, ValueError):
    pass


class DataError(SchedSampError, ValueError):
    pass


class FormatError(SchedSampError, ValueError):
    """Checkpoint bytes do not follow the expected layout."""
