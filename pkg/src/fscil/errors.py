"""Exception types shared across the package."""


class FSCILError(Exception):
    pass


class ZeroVector(FSCILError, ValueError):
    pass


class NonSquare(FSCILError, ValueError):
    pass


class ShapeMismatch(FSCILError, ValueError):
    pass


class StaleCache(FSCILError, RuntimeError):
    pass


class InsufficientClasses(FSCILError, ValueError):
    pass


class FormatError(FSCILError, ValueError):
    """Malformed binary file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class MissingEmbedding(FSCILError, KeyError):
    pass


class UnknownClass(FSCILError, KeyError):
    pass


class UnknownTestClass(UnknownClass):
    pass


class EmptyClass(FSCILError, ValueError):
    pass


class DuplicateClass(FSCILError, ValueError):
    pass


class MissingPrototypes(FSCILError, RuntimeError):
    pass


class UnitMismatch(FSCILError, ValueError):
    pass


class TrainingError(FSCILError, RuntimeError):
    def __init__(self, message, batch_index=None):
        if batch_index is not None:
            message = f"{message} (batch {batch_index})"
        super().__init__(message)
        self.batch_index = batch_index


class FingerprintMismatch(UserWarning):
    """Prototypes were computed with a different extractor than the one supplied."""
