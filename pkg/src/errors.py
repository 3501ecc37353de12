"""
Exception hierarchy for the MADF inpainting toolkit.

Every error raised on purpose by the package derives from MadfError so the
CLI can turn it into a one-line diagnostic and a non-zero exit code.
"""


class MadfError(Exception):
    """Base exception for all toolkit errors"""
    pass


class ConfigurationError(MadfError):
    """Raised when shapes, specs, presets or config files do not fit together"""
    pass


class ValidationError(MadfError):
    """Raised when an input value violates a documented precondition"""
    pass


class NumericError(MadfError):
    """Raised when a non-finite value enters or leaves a computation"""
    pass


class TapeError(MadfError):
    """Raised when a tape is not in topological order"""
    pass


class MaskGenerationError(MadfError):
    """Raised when a mask bucket cannot be reached within the attempt budget"""
    pass


class ImageIOError(MadfError):
    """Raised when an image or mask file cannot be read or written"""

    def __init__(self, path, message):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class CheckpointError(MadfError):
    """Base exception for checkpoint load/save problems"""
    pass


class CheckpointFormatError(CheckpointError):
    """Raised on wrong magic bytes, unknown version or unknown dtype tag"""
    pass


class CheckpointTruncatedError(CheckpointError):
    """Raised when a checkpoint ends before its declared payload"""
    pass


class CheckpointMismatchError(CheckpointError):
    """Raised when stored tensors do not match the model configuration"""
    pass
