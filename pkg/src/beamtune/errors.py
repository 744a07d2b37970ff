"""Exception types shared across the package."""


class BeamtuneError(Exception):
    """Base class for all package-specific errors."""


class InvalidParameterError(BeamtuneError, ValueError):
    """A physical parameter is outside its valid domain (non-finite, out of limits)."""


class ConfigurationError(BeamtuneError, ValueError):
    """A config file, scenario, or range specification is inconsistent."""


class PolicyFormatError(BeamtuneError, ValueError):
    """A policy weights file does not match the expected schema or shapes."""
