"""Exception hierarchy shared by every module in the package."""


class HomogenizeError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(HomogenizeError):
    """Malformed input: wrong shape, non-finite entries, broken symmetry."""


class StabilityError(HomogenizeError):
    """A spectral precondition (positive drag floor) is violated or unverifiable."""


class NumericError(HomogenizeError):
    """A solver produced a result that fails its own residual certificate."""


class ConfigurationError(HomogenizeError):
    """Bad run configuration: unknown keys, out-of-range values, bad overrides."""


class FieldError(HomogenizeError):
    """A user-supplied field expression failed to parse or evaluate."""


class ResolutionError(HomogenizeError):
    """A requested diagnostic needs a finer grid than the one provided."""
