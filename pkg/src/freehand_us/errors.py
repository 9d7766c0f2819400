"""Exception hierarchy.

Every error raised by the package derives from :class:`FreehandError`.
Input/contract violations derive from :class:`ValidationError` and numerical
breakdowns from :class:`NumericalError`; the CLI maps them to exit codes 2
and 3 respectively.
"""

from __future__ import annotations


class FreehandError(Exception):
    """Base class for all package errors."""


class ValidationError(FreehandError, ValueError):
    """Input does not satisfy an operation's preconditions."""


class NumericalError(FreehandError, ArithmeticError):
    """A solver or geometric computation could not produce a valid result."""


# geom
class FrameMismatch(ValidationError):
    pass


class OutsideRoi(ValidationError):
    pass


# intrinsics calibration
class TooFewFrames(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class NoActiveRegion(NumericalError):
    pass


class NoLines(NumericalError):
    pass


class NoValidTriplet(NumericalError):
    pass


class SnapDivergence(NumericalError):
    pass


# pose tracking
class DegenerateConfiguration(NumericalError):
    pass


class NoConvergence(NumericalError):
    pass


class InsufficientConsensus(NumericalError):
    pass


class NonMonotonicTimestamp(ValidationError):
    pass


# reconstruction
class EmptyCloud(NumericalError):
    pass


class EmptySurface(NumericalError):
    pass


class OpenMesh(NumericalError):
    pass


class NonPositiveAxis(ValidationError):
    pass


# verification
class TooFewRuns(ValidationError):
    pass


# simulation
class NonStarConvex(ValidationError):
    pass


class EmptyMask(NumericalError):
    pass


class BehindCamera(ValidationError):
    pass


class PathMissesPhantom(ValidationError):
    pass
