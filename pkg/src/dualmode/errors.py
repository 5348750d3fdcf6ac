"""Exception types raised across the package."""


class DualModeError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(DualModeError, ValueError):
    pass


class MaskError(DualModeError, ValueError):
    pass


class ConfigError(DualModeError, ValueError):
    pass


class FrozenParameterError(DualModeError, RuntimeError):
    """An update was about to be applied to a parameter flagged trainable=False."""


class NonDeterminismError(DualModeError, RuntimeError):
    pass


class CheckpointError(DualModeError, ValueError):
    pass


class BudgetError(DualModeError, ValueError):
    pass
