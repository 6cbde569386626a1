"""Exception hierarchy shared by all tinysan components.

The CLI maps each class to a distinct process exit code, so raising the
right class matters more than the message text.
"""


class TinysanError(Exception):
    exit_code = 1


class UsageError(TinysanError):
    """Invalid argument: misaligned offset/length, out-of-range I/O, bad size."""

    exit_code = 2


class NotFoundError(TinysanError):
    """Named volume/snapshot/path does not exist."""

    exit_code = 3


class ConflictError(TinysanError):
    """Guard violation: duplicate name, slot exhaustion, in-use resource,
    already-formatted device, deleting a top-level snapshot."""

    exit_code = 4


class StorageError(TinysanError):
    """I/O failure, corrupt or incompatible on-disk state, device full."""

    exit_code = 5


class ProtocolError(TinysanError):
    """Wire-level violation; the offending connection must be torn down."""

    exit_code = 5


class IncompleteFrameError(ProtocolError):
    """Stream ended in the middle of a frame."""


class VerifyError(TinysanError):
    """Data integrity mismatch detected by a verify-mode workload."""

    exit_code = 5
