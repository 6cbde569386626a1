"""tinysan: a miniature replicated block-storage engine.

A mirroring controller fans writes out to replica servers over a binary wire
protocol and round-robins reads; replicas persist blocks through pluggable
backing stores (extent/snapshot store with direct I/O, a chained-file
baseline, or a null store for layered benchmarking); frontends are an
in-process workload generator and an NBD export.
"""

from .errors import (
    ConflictError,
    IncompleteFrameError,
    NotFoundError,
    ProtocolError,
    StorageError,
    TinysanError,
    UsageError,
    VerifyError,
)
from .geometry import DeviceGeometry, DeviceLayout, Superblock
from .dbs import Device, init_device, open_device, scan_device

__version__ = "0.1.0"

__all__ = [
    "ConflictError",
    "Device",
    "DeviceGeometry",
    "DeviceLayout",
    "IncompleteFrameError",
    "NotFoundError",
    "ProtocolError",
    "StorageError",
    "Superblock",
    "TinysanError",
    "UsageError",
    "VerifyError",
    "init_device",
    "open_device",
    "scan_device",
    "__version__",
]
