"""Exception hierarchy.

The CLI maps ``InputError`` subclasses to exit code 2 and ``DomainError`` to 3.
"""


class MsviperError(Exception):
    pass


class InputError(MsviperError, ValueError):
    """Bad configuration, bad file, or an argument outside the supported set."""


class ConfigError(InputError):
    pass


class LayoutError(InputError):
    pass


class DimensionError(InputError):
    pass


class EmptyDatasetError(InputError):
    pass


class ParameterError(InputError):
    pass


class EncoderError(InputError):
    pass


class PlacementError(MsviperError, RuntimeError):
    """No free cell or pose for the robot, goal, or obstacles."""


class LifecycleError(MsviperError, RuntimeError):
    pass


class TrainingError(MsviperError, RuntimeError):
    pass


class DomainError(MsviperError, ArithmeticError):
    """A metric is undefined for the supplied values (e.g. zero denominators)."""
