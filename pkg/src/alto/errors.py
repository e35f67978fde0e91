"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not line up."""


class ConfigError(ValueError):
    """A configuration or parameter set is inconsistent."""


class ContractError(ValueError):
    """An operation was called outside its precondition."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf appeared where finite numbers are required."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or incompatible."""
