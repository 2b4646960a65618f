"""Exception hierarchy shared across the package."""


class RRLabError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(RRLabError, ValueError):
    pass


class EvaluationError(RRLabError):
    """A numeric evaluation produced a non-finite value or had no valid input."""


class AttackError(EvaluationError):
    pass


class TrainingError(RRLabError):
    def __init__(self, message: str, epoch: int | None = None, step: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class ParseError(RRLabError, ValueError):
    """Malformed file content. ``location`` is a line number or byte offset."""

    def __init__(self, message: str, location: int | None = None):
        super().__init__(message)
        self.location = location


class VersionError(RRLabError):
    pass


class ConfigError(RRLabError, ValueError):
    pass
