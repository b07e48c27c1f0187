"""Exception types raised across the package."""


class MotionLiftError(Exception):
    """Base class for all package errors."""


# core types / IO
class CyclicHierarchy(MotionLiftError, ValueError):
    pass


class MultipleRoots(MotionLiftError, ValueError):
    pass


class TooFewJoints(MotionLiftError, ValueError):
    pass


class InvalidValue(MotionLiftError, ValueError):
    """A field violates a documented invariant (shape, finiteness, sign)."""


class IoFailure(MotionLiftError, OSError):
    pass


class FormatVersionMismatch(MotionLiftError, ValueError):
    pass


class CorruptHeader(MotionLiftError, ValueError):
    pass


# camera
class AllPointsBehindCamera(MotionLiftError, ValueError):
    pass


class PointAtCameraPlane(MotionLiftError, ValueError):
    pass


# schedule
class InvalidT(MotionLiftError, ValueError):
    pass


class TimestepOutOfRange(MotionLiftError, ValueError):
    pass


class InvalidGrid(MotionLiftError, ValueError):
    pass


# denoiser / trainer
class SequenceTooLong(MotionLiftError, ValueError):
    pass


class ShapeMismatch(MotionLiftError, ValueError):
    pass


class EmptyDataset(MotionLiftError, ValueError):
    pass


class InconsistentJoints(MotionLiftError, ValueError):
    pass


class VersionMismatch(MotionLiftError, ValueError):
    pass


# guidance / sampler
class NonFiniteUpdate(MotionLiftError, FloatingPointError):
    pass


class GridMismatch(MotionLiftError, ValueError):
    pass


# metrics
class DegenerateFrame(MotionLiftError, ValueError):
    pass


class TooFewFrames(MotionLiftError, ValueError):
    pass


class TooFewHypotheses(MotionLiftError, ValueError):
    pass


class SingularCovariance(MotionLiftError, ValueError):
    pass


# toy GP
class NonPSDAfterJitter(MotionLiftError, ValueError):
    pass
