"""Exception hierarchy shared by every zfcl module."""


class ZFCLError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(ZFCLError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class AutodiffError(ZFCLError):
    """Misuse of the reverse-mode engine (non-scalar loss, detached tensor)."""


class InterpError(ZFCLError, ValueError):
    """Invalid upsampling request."""


class GeometryError(ZFCLError, ValueError):
    """Layer geometry or input shape is invalid."""


class BatchNormError(ZFCLError):
    pass


class SnapshotMismatchError(ZFCLError):
    """A BN snapshot does not fit the model it is restored onto."""


class LabelError(ZFCLError, ValueError):
    pass


class TrainingError(ZFCLError):
    pass


class EmptyDatasetError(TrainingError):
    pass


class NonFiniteLossError(TrainingError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


class BankError(ZFCLError):
    pass


class DuplicateTaskError(BankError):
    pass


class UnknownTaskError(BankError, KeyError):
    pass


class GridShapeError(BankError, ShapeError):
    pass


class BankFormatError(BankError):
    """Base for on-disk container problems."""


class BadMagicError(BankFormatError):
    pass


class VersionMismatchError(BankFormatError):
    pass


class TruncatedFileError(BankFormatError):
    pass


class HashMismatchError(BankError):
    """The frozen base model does not match the one a bank was built on."""


class DataFormatError(ZFCLError):
    """Malformed dataset file (IDX magic, counts, truncation)."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VerificationError(ZFCLError):
    pass
