"""Exception hierarchy shared across the package."""


class UniSummError(Exception):
    """Base class for all package errors."""


class DimensionError(UniSummError, ValueError):
    pass


class ContractError(UniSummError, ValueError):
    """A caller violated an operation's precondition."""


class StateError(UniSummError, RuntimeError):
    pass


class ConfigError(UniSummError, ValueError):
    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("invalid configuration: " + "; ".join(self.violations))


class UnknownTaskError(UniSummError, KeyError):
    def __str__(self):
        return f"unknown task id {self.args[0]!r}"


class DataError(UniSummError, ValueError):
    pass


class NumericalError(UniSummError, FloatingPointError):
    """Raised when a loss goes non-finite; ``diagnostics`` holds step/task/batch ids."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class CheckpointError(UniSummError, ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class HashMismatchError(CheckpointError):
    pass
