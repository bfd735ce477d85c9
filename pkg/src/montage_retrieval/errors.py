"""Exception types raised across the package."""


class RetrievalError(Exception):
    """Base class for all package errors."""


class IoFailure(RetrievalError, OSError):
    pass


# NIfTI parsing
class BadMagic(RetrievalError, ValueError):
    pass


class UnsupportedDatatype(RetrievalError, ValueError):
    pass


class TruncatedFile(RetrievalError, ValueError):
    pass


class NonVolumetric(RetrievalError, ValueError):
    pass


# montage
class DimensionMismatch(RetrievalError, ValueError):
    pass


class NonIntegerFactor(RetrievalError, ValueError):
    pass


# phantoms
class InvalidSize(RetrievalError, ValueError):
    pass


# classifier
class InvalidDescriptor(RetrievalError, ValueError):
    pass


class ShapeMismatch(RetrievalError, ValueError):
    pass


class DegenerateData(RetrievalError, ValueError):
    pass


class VersionMismatch(RetrievalError, ValueError):
    pass


class ChecksumMismatch(RetrievalError, ValueError):
    pass


class DescriptorMismatch(RetrievalError, ValueError):
    pass


# metrics
class LengthMismatch(RetrievalError, ValueError):
    pass


class EmptyInput(RetrievalError, ValueError):
    pass


class SingleClass(RetrievalError, ValueError):
    pass


class JoinMismatch(RetrievalError, ValueError):
    def __init__(self, unmatched):
        self.unmatched = sorted(unmatched)
        super().__init__("unmatched paths: " + ", ".join(self.unmatched))
