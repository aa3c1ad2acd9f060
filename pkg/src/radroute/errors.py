"""Shared exception types."""


class ConfigurationError(ValueError):
    """Invalid configuration or degenerate request."""


class ShapeError(ValueError):
    """Incompatible array shapes."""


class NumericError(RuntimeError):
    """Non-finite values or a numerically invalid state."""


class DegenerateBatchError(RuntimeError):
    """A loss was asked to average over an empty contributing set."""


class AssociationError(RuntimeError):
    """No trajectory/prediction pairs could be matched."""


class SamplingError(RuntimeError):
    """Crop sampling requested from a mask with no labeled pixels."""


class InputError(ValueError):
    """Malformed or unordered input stream."""
