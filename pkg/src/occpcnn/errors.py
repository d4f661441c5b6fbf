"""Exception types raised across the package."""


class OccError(Exception):
    """Base class for all package errors."""


class ParseError(OccError):
    """A mesh, cloud or checkpoint file could not be parsed."""


class DegenerateGeometry(OccError):
    """Geometry with zero extent or zero-area faces."""


class NotWatertight(OccError):
    """An inside/outside query was made against an open mesh."""


class InvalidSpec(OccError):
    """A shape specification violates its invariants."""


class EmptyShape(OccError):
    """No grid vertex falls inside the shape."""


class EmptyField(OccError):
    """The scalar field never crosses the iso level."""


class DimensionMismatch(OccError, ValueError):
    """Array shapes disagree with declared channel or point counts."""


class TapeIncomplete(OccError):
    """Backward was requested on a tape that did not end in a scalar."""


class NonFiniteLoss(OccError, FloatingPointError):
    """Training produced a NaN or infinite loss."""


class CheckpointError(ParseError):
    """A checkpoint file is truncated or corrupt; ``section`` names the failed part."""

    def __init__(self, section: str, detail: str = ""):
        self.section = section
        super().__init__(f"checkpoint section '{section}' is invalid" + (f": {detail}" if detail else ""))


class IoError(OccError, OSError):
    """A file or directory could not be read or written."""
