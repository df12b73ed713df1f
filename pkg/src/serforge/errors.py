"""Exception taxonomy shared across the pipeline.

Every error raised by this package derives from :class:`SerForgeError` so
callers (notably the CLI) can map failures to exit codes without string
matching.
"""


class SerForgeError(Exception):
    """Base class for all errors raised by ser-forge."""


class DimensionError(SerForgeError):
    """Tensor shapes are incompatible; the message names the offending axes."""


class FormatError(SerForgeError):
    """A file (WAV, SERF, SERC, manifest) does not match its declared format."""


class DataError(SerForgeError):
    """Input values are structurally valid but semantically unusable."""


class FrameAlignmentError(DataError):
    """Two feature streams disagree on frame count beyond the fusion tolerance."""


class ConfigError(SerForgeError):
    """An experiment or training configuration is invalid. CLI exit code 2."""


class TrainingError(SerForgeError):
    """Optimization failed (divergence, non-finite gradients)."""


class NumericError(SerForgeError):
    """A forward pass produced non-finite values; the message names the layer."""
