"""Exception types shared across the package.

Configuration-ish problems subclass ValueError, runtime protocol problems
subclass RuntimeError, so callers that don't care about the fine-grained
types can still catch something sensible.
"""


class SplitSimError(Exception):
    """Base class for every error this package raises deliberately."""


class ShapeError(SplitSimError, ValueError):
    """Operands have incompatible shapes; the message names both sides."""


class ConfigError(SplitSimError, ValueError):
    """A configuration value is missing, malformed, or inconsistent."""


class DataError(SplitSimError, ValueError):
    """A dataset file, label vector, or metric input violates its contract."""


class PlanError(SplitSimError, ValueError):
    """A vertical partition plan is overlapping, incomplete, or mismatched."""


class StragglerError(SplitSimError, RuntimeError):
    """A merge strategy that needs every client saw an absent one."""


class ProtocolError(SplitSimError, RuntimeError):
    """The simulated message flow was driven with inconsistent state."""
