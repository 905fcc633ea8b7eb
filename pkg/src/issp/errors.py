"""Exception types shared across the package."""


class IsspError(Exception):
    pass


class DimensionMismatch(IsspError, ValueError):
    pass


class ShapeMismatch(IsspError, ValueError):
    pass


class BadGeometry(IsspError, ValueError):
    pass


class BadRange(IsspError, ValueError):
    pass


class EmptyLayer(IsspError, ValueError):
    pass


class AlreadyFrozen(IsspError, RuntimeError):
    pass


class NotFrozen(IsspError, RuntimeError):
    pass


class MaskWeightDisagreement(IsspError, ValueError):
    pass


class ConfigError(IsspError, ValueError):
    pass


class DataError(IsspError, ValueError):
    pass


class ImageFormatError(DataError):
    pass


class BadMagic(ImageFormatError):
    pass


class BadMaxval(ImageFormatError):
    pass


class Truncated(ImageFormatError):
    pass


class TooSmall(DataError):
    pass


class NonSquare(DataError):
    pass


class BadChannels(DataError):
    pass


class CropTooLarge(IsspError, ValueError):
    pass


class CheckpointError(IsspError, ValueError):
    """Raised when a checkpoint or sparse model file fails validation."""


class CorrectnessFailure(IsspError, AssertionError):
    pass


class ImageTooSmall(DataError):
    pass
