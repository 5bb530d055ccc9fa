"""Exception hierarchy shared by every module."""


class RoboAttnError(Exception):
    """Base class for all toolkit errors."""


class InvalidInput(RoboAttnError, ValueError):
    pass


class ShapeError(RoboAttnError, ValueError):
    pass


class DegenerateMap(RoboAttnError, ValueError):
    """A map with no mass or no variance where one is required."""


class DegenerateUncertainty(RoboAttnError, ValueError):
    """The optimal log-variance is unbounded below (label matches exactly)."""


class DegenerateReference(RoboAttnError, ValueError):
    """The reference model of an mCD ratio has a zero denominator."""


class OptimizerDiverged(RoboAttnError, RuntimeError):
    pass


class MissingAttention(RoboAttnError, ValueError):
    """A sample lacks the predicted attention map an operation needs."""


class KernelTooLarge(RoboAttnError, ValueError):
    pass


class IoError(RoboAttnError, OSError):
    """Unreadable, truncated or unsupported file; message carries the path."""
