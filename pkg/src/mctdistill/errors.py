"""Exception hierarchy shared by every module."""


class MctError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(MctError, ValueError):
    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        shown = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"shape mismatch in {op}: {shown}")


class GradientError(MctError):
    pass


class NonFiniteError(MctError, FloatingPointError):
    pass


class FormatError(MctError, ValueError):
    """A binary or IDX file does not match its declared layout."""


class DegenerateSegmentError(MctError, ValueError):
    """Start and target parameters coincide, or a trajectory segment has zero length."""


class ConfigError(MctError, ValueError):
    pass


def with_context(exc: Exception, context: str) -> Exception:
    """A copy of ``exc`` with ``context`` prefixed to its message, same type when possible."""
    custom_init = any("__init__" in vars(k) for k in type(exc).__mro__ if k.__module__ == __name__)
    if isinstance(exc, MctError) and not custom_init:
        return type(exc)(f"{context}: {exc}")
    return MctError(f"{context}: {exc}")
