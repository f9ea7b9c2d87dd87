"""Exception hierarchy shared by all slidecap modules."""


class SlidecapError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(SlidecapError, ValueError):
    pass


class DuplicateTokenError(SlidecapError, ValueError):
    pass


class EmptyVocabularyError(SlidecapError, ValueError):
    pass


class InvalidStrideError(SlidecapError, ValueError):
    pass


class InvalidContextError(SlidecapError, ValueError):
    pass


class InvalidKernelError(SlidecapError, ValueError):
    pass


class ZeroNormError(SlidecapError, ValueError):
    pass


class BatchTooSmallError(SlidecapError, ValueError):
    pass


class TrainingDivergedError(SlidecapError, RuntimeError):
    """Loss or gradients became non-finite. ``state`` holds the last finite state."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class InvalidKError(SlidecapError, ValueError):
    pass


class DatasetTooSmallError(SlidecapError, ValueError):
    pass


class ManifestParseError(SlidecapError, ValueError):
    def __init__(self, message, line_number):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class DuplicateIdError(SlidecapError, ValueError):
    pass


class ImageFormatError(SlidecapError, ValueError):
    pass


class TruncatedImageError(ImageFormatError):
    pass


class CheckpointError(SlidecapError, ValueError):
    pass


class ConfigError(SlidecapError, ValueError):
    """Invalid run configuration; ``field`` names the offending key when known."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class BatchItemError(SlidecapError):
    """Wraps an error raised while processing one item of a batch."""

    def __init__(self, index, cause):
        super().__init__(f"item {index}: {cause}")
        self.index = index
        self.cause = cause
