"""Exception types shared across the package."""


class SyncAnimError(Exception):
    """Base class for all package-specific errors."""


class NotARotation(SyncAnimError):
    """Matrix fails the orthonormality / determinant checks."""


class GimbalLock(SyncAnimError):
    """Middle rotation angle is inside the lock guard; extraction is not invertible."""


class EmptySequence(SyncAnimError):
    """Operation needs more elements than the input provides."""


class UnsupportedFormat(SyncAnimError):
    """Audio file is not 16-bit PCM RIFF, or the sample rate is not supported."""


class CorruptHeader(SyncAnimError):
    """Audio or container file is truncated or malformed."""


class ClipTooShort(SyncAnimError):
    """Audio clip is shorter than one analysis window."""


class IndexOutOfRange(SyncAnimError):
    """Frame index outside the track."""


class MissingTarget(SyncAnimError):
    """Train-mode call without the ground-truth target it must encode."""


class ShapeMismatch(SyncAnimError):
    """Tensor shapes are inconsistent with the model configuration."""


class SizeMismatch(SyncAnimError):
    """Images or masks with differing dimensions."""


class LengthMismatch(SyncAnimError):
    """Parallel tracks have different frame counts."""


class MissingFile(SyncAnimError):
    """A file referenced by a dataset manifest does not exist."""


class StatsMismatch(SyncAnimError):
    """Manifest statistics disagree with statistics recomputed from the tracks."""


class ConfigInvalid(SyncAnimError):
    """Configuration failed validation before any work started."""


class NonFiniteLoss(SyncAnimError):
    """A training loss became NaN or infinite; the run is aborted."""


class DegenerateEye(SyncAnimError):
    """Eye landmarks with zero horizontal span."""


class TooShort(SyncAnimError):
    """Track has too few frames for the statistic."""
