"""Exception hierarchy shared by every fedlm module."""


class FedLMError(Exception):
    """Base class for all errors raised by fedlm."""


class ConfigError(FedLMError, ValueError):
    """Invalid configuration or violated precondition on inputs."""


class DimensionError(FedLMError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(FedLMError, ValueError):
    """Two parameter vectors do not share names, order and shapes."""


class UsageError(FedLMError, RuntimeError):
    """An API was called in a state where it is not allowed."""


class NumericError(FedLMError, FloatingPointError):
    """A NaN or infinity appeared where finite values are required."""

    def __init__(self, message, *, round=None, client=None, step=None):
        context = [
            f"{key}={value}"
            for key, value in (("round", round), ("client", client), ("step", step))
            if value is not None
        ]
        if context:
            message = f"{message} ({', '.join(context)})"
        super().__init__(message)
        self.round = round
        self.client = client
        self.step = step


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""


class CapacityError(FedLMError):
    """The model does not fit the available accelerator memory."""


class RoundFailure(FedLMError):
    """A federated round could not be completed (e.g. ring broken by a dropout)."""


class IntegrityError(FedLMError):
    """A serialized file is truncated, corrupt, or of an unsupported version."""


class TokenIndexError(FedLMError, IndexError):
    """A token id or target lies outside the vocabulary."""


class UnknownClientError(FedLMError, LookupError):
    """A client id is not part of the shard plan."""


class ParseError(FedLMError, ValueError):
    """A metrics or table file does not have the expected structure."""
