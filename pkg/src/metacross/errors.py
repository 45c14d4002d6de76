"""Exception types shared across the package.

Validation problems (shapes, configs, masks, inputs, files) are ValueErrors
so they can be mapped to a single CLI exit code; numeric failures get their
own branch because they signal a broken run rather than a bad request.
"""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DegenerateMaskError(ValueError):
    """An attention row has no available position to normalize over."""


class NoModalityError(ValueError):
    """An availability pattern with zero available modalities."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or out of range."""


class EmptyInputError(ValueError):
    """An operation received an empty collection it cannot act on."""


class CheckpointError(ValueError):
    """A checkpoint file is missing, truncated, or version-incompatible."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the math guarantees finiteness."""
