"""Exception hierarchy shared by all muxctl modules."""


class MuxError(Exception):
    """Base class for every error raised by muxctl."""


class DimensionMismatch(MuxError, ValueError):
    pass


class InvalidWeight(MuxError, ValueError):
    pass


class ZeroNotAdmissible(MuxError, ValueError):
    pass


class InvalidMatrix(MuxError, ValueError):
    """Symmetry or definiteness requirement violated."""


class UnboundedActionSet(MuxError, ValueError):
    pass


class MissingR(MuxError, ValueError):
    pass


class MissingQ(MuxError, ValueError):
    pass


class ModeMismatch(MuxError, ValueError):
    pass


class NonFiniteState(MuxError, FloatingPointError):
    """NaN or Inf encountered during integration.

    ``node`` is the grid index (or Jacobian column) where it was detected.
    """

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class FiniteEscape(MuxError, FloatingPointError):
    pass


class NoConvergence(MuxError, RuntimeError):
    """Shooting did not reach the residual tolerance.

    The best available report is attached as ``report``.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ConfigError(MuxError, ValueError):
    pass


class ParseError(ConfigError):
    """Malformed input text; ``line`` is 1-based when known."""

    def __init__(self, message, line=None, key=None):
        super().__init__(message)
        self.line = line
        self.key = key


class ValidationError(ConfigError):
    """Well-formed input violating a model invariant; ``key`` names the entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
