"""Exception hierarchy. Each class carries the CLI exit code for its category."""


class TicfmError(Exception):
    exit_code = 1


class ContractError(TicfmError, ValueError):
    """A documented precondition was violated by the caller."""

    exit_code = 3


class ShapeError(ContractError):
    pass


class ParameterError(ContractError):
    pass


class ConfigurationError(ContractError):
    pass


class NonFiniteError(TicfmError, ArithmeticError):
    exit_code = 4


class DegenerateTaskError(ContractError):
    """The context holds a single class, so there is nothing to decide."""

    exit_code = 5


class ProtocolError(TicfmError):
    """An evaluation protocol cannot be executed as requested."""

    exit_code = 6


class InvalidRunError(ProtocolError):
    """A query label does not occur among the context labels."""


class ParseError(TicfmError):
    exit_code = 7


class DatasetError(TicfmError):
    exit_code = 7


class IntegrityError(TicfmError):
    """A checkpoint file is corrupt, truncated, or inconsistent with its config."""

    exit_code = 8


class StorageError(TicfmError, OSError):
    exit_code = 8


class TrainingDivergenceError(TicfmError):
    exit_code = 9

    def __init__(self, step: int, message: str = "loss is not finite"):
        super().__init__(f"training diverged at step {step}: {message}")
        self.step = step


class TreeIntegrityError(TicfmError):
    exit_code = 10
