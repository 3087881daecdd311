"""Exception types raised across the package."""


class AdvalignError(Exception):
    """Base class for all package errors."""


class StateSpaceTooLarge(AdvalignError):
    pass


class DivergedValueFit(AdvalignError):
    pass


class WeightOverflow(AdvalignError):
    """An advantage weight exp(adv / lambda) exceeded the configured cap."""


class NonFiniteParameters(AdvalignError):
    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


class ConfigError(AdvalignError):
    """Invalid experiment configuration; ``key`` names the offending entry."""

    def __init__(self, message, key=None, line=None):
        super().__init__(message)
        self.key = key
        self.line = line
