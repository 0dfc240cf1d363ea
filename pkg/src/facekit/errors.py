"""Exception hierarchy shared by every facekit module."""


class FacekitError(Exception):
    """Base class for all facekit errors."""


class ValidationError(FacekitError, ValueError):
    """Input violates a documented precondition or invariant."""


class ParseError(FacekitError, ValueError):
    """A file could not be decoded.

    ``location`` is a 1-based line number for text formats and a byte
    offset for binary payloads.
    """

    def __init__(self, message, location=None):
        self.location = location
        if location is not None:
            message = f"{message} (at {location})"
        super().__init__(message)


class NumericalError(FacekitError, RuntimeError):
    """A solver hit a singular or otherwise ill-posed system."""


class DegenerateLandmarksError(NumericalError):
    """The landmark configuration cannot constrain the camera."""


class AlignmentError(NumericalError):
    """Prediction and ground truth share no depth-rendered pixels."""
