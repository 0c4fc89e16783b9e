"""Exception types shared across the package."""


class OtflowError(Exception):
    """Base class; `code` is the stable machine-readable identifier."""

    code = "OtflowError"

    def __str__(self):
        return f"{self.code}: {super().__str__()}"


class ZeroMass(OtflowError):
    code = "ZeroMass"


class GridMismatch(OtflowError):
    code = "GridMismatch"


class NonFinite(OtflowError):
    code = "NonFinite"


class ShapeMismatch(OtflowError):
    code = "ShapeMismatch"


class NonScalarRoot(OtflowError):
    code = "NonScalarRoot"


class OutOfInterval(OtflowError):
    code = "OutOfInterval"


class DimsMismatch(OtflowError):
    code = "DimsMismatch"


class MissingFile(OtflowError):
    code = "MissingFile"


class BadMagic(OtflowError):
    code = "BadMagic"


class NonIncreasingTimes(OtflowError):
    code = "NonIncreasingTimes"


class ConfigOutOfBounds(OtflowError):
    code = "ConfigOutOfBounds"


class ConfigError(OtflowError):
    code = "ConfigError"


class MissingCheckpoint(OtflowError):
    code = "MissingCheckpoint"


class IndexOutOfRange(OtflowError):
    code = "IndexOutOfRange"


class IoError(OtflowError):
    code = "IoError"
