"""Exception hierarchy shared by all artifit modules."""


class ArtifitError(Exception):
    """Base class for every error raised by artifit."""


class DimensionMismatch(ArtifitError, ValueError):
    pass


class DegenerateRotation(ArtifitError, ValueError):
    pass


class EmptyCloud(ArtifitError, ValueError):
    pass


class EmptyModel(ArtifitError, ValueError):
    pass


class DegeneratePosterior(ArtifitError, ValueError):
    pass


class NonFiniteEnergy(ArtifitError, FloatingPointError):
    """Raised by the fitters when the energy stops being finite.

    ``diagnostics`` holds a snapshot of the iteration state.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DegenerateMesh(ArtifitError, ValueError):
    pass


class KTooLarge(ArtifitError, ValueError):
    pass


class LengthMismatch(ArtifitError, ValueError):
    pass


class MissingCorrespondence(ArtifitError, ValueError):
    pass


class ParseError(ArtifitError, ValueError):
    """Malformed input file; ``location`` names the line or byte offset."""

    def __init__(self, message, location=None):
        if location is not None:
            message = f"{message} (at {location})"
        super().__init__(message)
        self.location = location


class UnsupportedFormat(ArtifitError, ValueError):
    pass
