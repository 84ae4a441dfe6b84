"""Exception types raised across the package."""


class ProxyCtlError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ProxyCtlError, ValueError):
    """An argument is outside its admissible range or non-finite."""


class DimensionError(ProxyCtlError, ValueError):
    """Array shapes do not conform."""


class NotPSDError(ProxyCtlError, ValueError):
    """A matrix expected to be positive semi-definite is not."""


class UnderIdentifiedError(ProxyCtlError, ValueError):
    """Fewer instruments than endogenous regressors."""


class ConfigError(ProxyCtlError):
    """A run configuration is incomplete or inconsistent."""


class ParseError(ProxyCtlError):
    """Input data could not be parsed."""
