"""Exception types shared across the satref package."""


class SatrefError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(SatrefError, ValueError):
    """An argument violates an operation's preconditions."""


class FormatError(SatrefError, ValueError):
    """A serialized raster, payload, or diff is malformed."""


class NoObservablePixelsError(SatrefError):
    """A quality metric was requested over an empty valid-pixel set."""


class DegenerateFitError(SatrefError):
    """Illumination fit is underdetermined (too few or constant clear pixels)."""


class InvalidModelError(SatrefError):
    """A cloud decision tree references bands the image does not have."""


class InvalidReferenceError(SatrefError):
    """A reference entry does not match the detection configuration."""


class RateInfeasibleError(SatrefError):
    """The bit budget cannot fit even the coarsest quantizer for a tile."""


class BootstrapRequiredError(SatrefError):
    """A partial reference diff arrived for a cell with no cached entry."""


class ReconstructionImpossibleError(SatrefError):
    """Ground reconstruction needs a full-resolution prior image it lacks."""


class CalibrationFailedError(SatrefError):
    """Threshold calibration received an empty or unusable history."""


class StorageBudgetError(SatrefError):
    """Onboard storage exceeded its budget; hard simulator failure."""


class UsageError(SatrefError):
    """Bad command-line arguments or configuration file."""
