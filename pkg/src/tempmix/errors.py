"""Exception types shared across the package."""


class TempmixError(Exception):
    """Base class for all package errors."""


class InvalidInputError(TempmixError, ValueError):
    pass


class DomainError(TempmixError, ValueError):
    """A numeric argument lies outside the domain of the function."""


class MissingDataError(TempmixError, FileNotFoundError):
    pass


class UnsupportedPlanError(TempmixError, TypeError):
    pass


class DivergedError(TempmixError, FloatingPointError):
    """Model parameters or losses became non-finite."""


class ConfigError(TempmixError, ValueError):
    """Experiment configuration could not be parsed or validated.

    ``key`` names the offending config entry (``section.key``) when one can
    be identified; the message always mentions it too.
    """

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key
