"""Exception hierarchy shared by every module."""


class MalConvError(Exception):
    """Base class for all errors raised by this package."""


class InputError(MalConvError, ValueError):
    """Caller supplied data that violates an operation's preconditions."""


class NumericalError(MalConvError, ArithmeticError):
    """A NaN/Inf appeared during forward, backward or an optimizer step."""


class FormatError(MalConvError, ValueError):
    """A checkpoint or manifest file is malformed."""


class InternalError(MalConvError, RuntimeError):
    """An internal invariant was broken (e.g. an out-of-range argmax)."""
