"""
Exception types raised by safedyn.

Errors that signal bad arguments also derive from ValueError, so callers that only
know about the standard exception still catch them.
"""


class SafeDynError(Exception):
    """Base class of all safedyn errors."""


class ShapeError(SafeDynError, ValueError):
    """Operand shapes of a tape node are incompatible."""


class BindingError(SafeDynError, ValueError):
    """A tape input is unbound, unknown or bound with the wrong shape."""


class DomainError(SafeDynError, ValueError):
    """A math operation was evaluated outside of its domain."""


class BackwardError(SafeDynError):
    """Backward pass requested on a tape that cannot be differentiated."""


class LayoutError(SafeDynError, ValueError):
    """Invalid hazard layout."""


class ProtocolError(SafeDynError):
    """Environment used out of protocol, e.g. stepping a finished episode."""


class ProblemError(SafeDynError, ValueError):
    """Unknown analytic test problem."""


class ConfigError(SafeDynError, ValueError):
    """Invalid or unreadable configuration."""


class TrainingError(SafeDynError):
    """
    Model fitting failed.

    Attributes:
        diagnostics (dict): Member index, epoch, step and loss value where the failure occurred.
    """

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class EvaluationError(SafeDynError):
    """
    Imagined rollout produced non-finite values.

    Attributes:
        step (int): First imagination step holding a non-finite value.
        member (int): Ensemble member index, if known.
    """

    def __init__(self, message, step=None, member=None):
        super().__init__(message)
        self.step = step
        self.member = member


class InfeasibleIterate(SafeDynError):
    """
    The constraint value is not strictly negative where strict feasibility is required.

    Attributes:
        value (float): The offending constraint value.
    """

    def __init__(self, value, message=None):
        super().__init__(message or f"infeasible iterate: constraint value {value!r} >= 0")
        self.value = value
