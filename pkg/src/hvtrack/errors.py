"""Exception hierarchy shared by all modules."""


class TrackingError(Exception):
    """Base class for every error raised by hvtrack."""


class DegenerateQuad(TrackingError):
    pass


class PointAtInfinity(TrackingError):
    pass


class Singular(TrackingError):
    pass


class ShapeMismatch(TrackingError):
    pass


class WeightTopologyMismatch(TrackingError):
    pass


class InsufficientSupport(TrackingError):
    pass


class QuadOutOfFrame(TrackingError):
    pass


class LostTrack(TrackingError):
    pass


class DegenerateDataset(TrackingError):
    pass


class LengthMismatch(TrackingError):
    pass


class ParseError(TrackingError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
