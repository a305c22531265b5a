"""Exception hierarchy shared by every certsmooth module."""

from __future__ import annotations


class CertSmoothError(Exception):
    """Base class. ``exit_code`` is what the CLI returns when this escapes."""

    exit_code = 1

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"0x{offset:08x}: {message}"
        super().__init__(message)


# pe_format
class PeFormatError(CertSmoothError):
    exit_code = 10


class NotPe(PeFormatError):
    pass


class Truncated(PeFormatError):
    pass


class Malformed(PeFormatError):
    pass


class LayoutConflict(PeFormatError):
    pass


# chunking
class EmptyInput(CertSmoothError):
    exit_code = 11


# classifiers
class ModelError(CertSmoothError):
    exit_code = 12


class CorruptSample(ModelError):
    pass


class DivergedLoss(ModelError):
    pass


class SingleClassDataset(ModelError):
    pass


class ModelChunkMismatch(ModelError):
    pass


class VersionMismatch(ModelError):
    pass


class ChecksumFail(ModelError):
    pass


# certify
class CertifyError(CertSmoothError):
    exit_code = 13


class ZeroPayload(CertifyError):
    pass


class MismatchedZ(CertifyError):
    pass


class UnalignedTally(CertifyError):
    pass


class TooLarge(CertifyError):
    pass


# attacks
class AttackError(CertSmoothError):
    exit_code = 14


class AlignmentError(AttackError):
    pass


class NoHeaderRoom(AttackError):
    pass


class EmptyWritable(AttackError):
    pass


# dataset
class DatasetError(CertSmoothError):
    exit_code = 15


class HashMismatch(DatasetError):
    pass


class OversizeFile(DatasetError):
    pass


class IoFailure(DatasetError):
    pass


class ConfigError(CertSmoothError):
    """Inconsistent run configuration (CLI validation failure)."""

    exit_code = 2
