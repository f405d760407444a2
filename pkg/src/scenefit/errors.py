"""Exception hierarchy.

Every error raised by the library derives from :class:`SceneFitError`. The
CLI maps :class:`ValidationError` subclasses to exit code 2 and
:class:`NumericalError` subclasses to exit code 3.
"""

from __future__ import annotations


class SceneFitError(Exception):
    """Base class for all library errors."""


class ValidationError(SceneFitError, ValueError):
    """Inputs violate a precondition."""


class NumericalError(SceneFitError, ArithmeticError):
    """A computation failed numerically."""


class DepthNonPositive(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class EmptyMesh(EmptyInput):
    pass


class EmptyMask(EmptyInput):
    pass


class AllFacesCulled(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class SizeMismatch(ShapeMismatch):
    pass


class InsufficientPoints(ValidationError):
    pass


class DegenerateCloud(ValidationError):
    pass


class LayoutOverflow(ValidationError):
    pass


class MissingPlane(ValidationError):
    pass


class NoConsensus(NumericalError):
    pass


class Diverged(NumericalError):
    pass


class NonFinite(NumericalError):
    pass


class SamplingFailed(NumericalError):
    pass


class ParseError(ValidationError):
    """Malformed file. ``position`` is a 1-based line or a 0-based byte offset."""

    def __init__(self, message: str, position: int | None = None):
        if position is not None:
            message = f"{message} (at {position})"
        super().__init__(message)
        self.position = position


class UnsupportedVariant(ParseError):
    pass


class BadMagic(ParseError):
    pass


class BadVersion(ParseError):
    pass


class TruncatedPayload(ParseError):
    pass
