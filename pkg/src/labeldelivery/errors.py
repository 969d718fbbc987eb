"""Exception and warning types shared across the package."""


class LabelDeliveryError(Exception):
    """Base class for package errors."""


class ConfigurationError(LabelDeliveryError, ValueError):
    """Invalid sizes, unknown methods, missing inputs a method requires."""


class InvalidInputError(LabelDeliveryError, ValueError):
    """Malformed arrays: unnormalized distributions, length mismatches, empty sets."""


class NumericFaultError(LabelDeliveryError, FloatingPointError):
    """A NaN or infinity appeared where a finite value is required."""


class DegenerateWarning(UserWarning):
    """A statistic is undefined on the given input and a fallback value was returned."""
