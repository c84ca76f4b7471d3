"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not match what an operation requires."""


class FormatError(ValueError):
    """File content violates the expected raster/record format."""


class ManifestError(ValueError):
    """A manifest file or row failed validation."""


class TrainingAborted(RuntimeError):
    """Training stopped on a non-finite loss; the last good checkpoint is kept."""


class NonFiniteGradient(RuntimeError):
    """An optimizer step saw a NaN/inf gradient; message names the parameter."""
