"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class EGDError(Exception):
    """Base class for every error raised by this package."""


class ScheduleError(EGDError, ValueError):
    pass


class ShapeError(EGDError, ValueError):
    pass


class PreconditionError(EGDError, ValueError):
    pass


class RangeError(EGDError, ValueError):
    pass


class RulesError(EGDError, KeyError):
    """A type pair or type has no entry in the active TypeRules."""


class DecodeError(EGDError, ValueError):
    pass


class ExtractionError(EGDError, ValueError):
    pass


class RegistryError(EGDError, KeyError):
    pass


class InjectionError(EGDError, ValueError):
    pass


class ConfigError(EGDError, ValueError):
    """Invalid run or experiment configuration.

    ``field`` names the offending key path (e.g. ``objectives.entries[0].target``).
    """

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class BudgetError(EGDError, RuntimeError):
    """Declared budget parity between experiment arms does not hold."""
