"""Backing stores behind the replica server.

All stores share one I/O contract (block-aligned read/write/unmap plus an
out-of-band create_snapshot for local administration) so they are
substitutable in tests and benchmarks:

  * DbsStore      - one volume of an extent/snapshot device (the real thing)
  * ChainedFileStore - baseline: one data file per snapshot with an explicit
                    block-presence bitmap header, newest-first lookup, and a
                    revision counter in a separate metadata file bumped on
                    every acknowledged write ("write versioning")
  * NullStore     - acknowledges immediately, reads zeros; isolates the
                    layers above the storage in benchmarks
"""

from __future__ import annotations

import os
import re
import struct
import threading

from .dbs import Device
from .errors import NotFoundError, StorageError, UsageError

META_NAME = "volume.meta"
META = struct.Struct("<56sQ")  # head file name (NUL padded), revision
SNAP_RE = re.compile(r"^snap-(\d+)\.dat$")


class DbsStore:
    """Adapter exposing one volume of an open Device as a backing store."""

    def __init__(self, device: Device, volume: str, owns_device: bool = False):
        self.device = device
        self.volume = volume
        self._owns = owns_device
        self.block_size = device.geometry.block_size
        self.volume_size = device.volume_size(volume)

    @classmethod
    def open(cls, path: str, volume: str, direct: bool | None = None) -> "DbsStore":
        return cls(Device(path, direct=direct), volume, owns_device=True)

    def read(self, offset: int, length: int) -> bytes:
        return self.device.read(self.volume, offset, length)

    def write(self, offset: int, data: bytes) -> None:
        self.device.write(self.volume, offset, data)

    def unmap(self, offset: int, length: int) -> None:
        self.device.unmap(self.volume, offset, length)

    def create_snapshot(self) -> int:
        return self.device.create_snapshot(self.volume).id

    def close(self) -> None:
        if self._owns:
            self.device.close()


class _SnapFile:
    __slots__ = ("sid", "path", "fd", "header_size")

    def __init__(self, sid, path, fd, header_size):
        self.sid = sid
        self.path = path
        self.fd = fd
        self.header_size = header_size


class ChainedFileStore:
    """Snapshot chain of flat files, one per snapshot, probed newest-first.

    Each file starts with a block-presence bitmap (rounded up to one block)
    followed by a full-size data area; a block is present in a file iff its
    bitmap bit is set. Probes hit the filesystem on purpose: the cost of
    walking a long chain is the behavior this baseline exists to exhibit.
    """

    def __init__(self, directory: str, volume_size: int = 0, block_size: int = 4096,
                 versioning: bool = True, create: bool = False):
        self.directory = directory
        self.block_size = block_size
        self.versioning = versioning
        self.probe_count = 0
        self.meta_writes = 0
        self.revision = 0
        self._lock = threading.Lock()
        meta_path = os.path.join(directory, META_NAME)
        if create:
            if volume_size <= 0 or volume_size % block_size:
                raise UsageError("volume size must be a positive multiple of block_size")
            os.makedirs(directory, exist_ok=True)
            if os.path.exists(meta_path):
                raise StorageError(f"store already exists in {directory}")
            self.volume_size = volume_size
            self._files: list[_SnapFile] = []
            self._add_snapshot_file(1)
            self._write_meta()
        else:
            if not os.path.exists(meta_path):
                raise NotFoundError(f"no store in {directory}")
            with open(meta_path, "rb") as f:
                head_raw, self.revision = META.unpack(f.read(META.size))
            head_name = head_raw.split(b"\x00", 1)[0].decode()
            sids = sorted(
                int(m.group(1))
                for m in (SNAP_RE.match(n) for n in os.listdir(directory))
                if m
            )
            if not sids:
                raise StorageError(f"metadata without snapshot files in {directory}")
            self._files = []
            self.volume_size = volume_size
            for sid in sids:
                path = os.path.join(directory, f"snap-{sid}.dat")
                fd = os.open(path, os.O_RDWR)
                if self.volume_size == 0:
                    hdr = self._header_size_for(os.path.getsize(path))
                    self.volume_size = os.path.getsize(path) - hdr
                self._files.insert(0, _SnapFile(sid, path, fd, self._header_size()))
            if self._files[0].path != os.path.join(directory, head_name):
                raise StorageError(f"metadata head {head_name!r} is not the newest file")

    def _header_size(self) -> int:
        n_blocks = self.volume_size // self.block_size
        return (((n_blocks + 7) // 8) + self.block_size - 1) // self.block_size * self.block_size

    def _header_size_for(self, file_size: int) -> int:
        # header is the smallest block multiple whose bitmap covers the rest
        bs = self.block_size
        for hdr_blocks in range(1, file_size // bs + 1):
            hdr = hdr_blocks * bs
            if (file_size - hdr) // bs <= hdr * 8:
                return hdr
        raise StorageError("cannot infer header size")

    def _add_snapshot_file(self, sid: int) -> None:
        path = os.path.join(self.directory, f"snap-{sid}.dat")
        hdr = self._header_size()
        fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o644)
        os.truncate(fd, hdr + self.volume_size)
        self._files.insert(0, _SnapFile(sid, path, fd, hdr))

    def _write_meta(self) -> None:
        head = os.path.basename(self._files[0].path).encode()
        data = META.pack(head, self.revision)
        fd = os.open(os.path.join(self.directory, META_NAME), os.O_RDWR | os.O_CREAT, 0o644)
        try:
            os.pwrite(fd, data, 0)
        finally:
            os.close(fd)
        self.meta_writes += 1

    def _check_io(self, offset: int, length: int) -> None:
        bs = self.block_size
        if offset % bs or length % bs:
            raise UsageError(f"offset/length must be multiples of {bs}")
        if offset < 0 or length < 0 or offset + length > self.volume_size:
            raise UsageError("I/O beyond volume end")

    def _probe(self, f: _SnapFile, block: int) -> bool:
        self.probe_count += 1
        byte = os.pread(f.fd, 1, block >> 3)
        return bool(byte and byte[0] & (1 << (block & 7)))

    def read(self, offset: int, length: int) -> bytes:
        self._check_io(offset, length)
        bs = self.block_size
        with self._lock:
            out = []
            for block in range(offset // bs, (offset + length) // bs):
                data = None
                for f in self._files:
                    if self._probe(f, block):
                        data = os.pread(f.fd, bs, f.header_size + block * bs)
                        break
                out.append(data if data is not None else bytes(bs))
            return b"".join(out)

    def write(self, offset: int, data: bytes) -> None:
        self._check_io(offset, len(data))
        bs = self.block_size
        with self._lock:
            head = self._files[0]
            for i, block in enumerate(range(offset // bs, (offset + len(data)) // bs)):
                os.pwrite(head.fd, data[i * bs:(i + 1) * bs], head.header_size + block * bs)
                cur = os.pread(head.fd, 1, block >> 3)
                os.pwrite(head.fd, bytes([cur[0] | (1 << (block & 7))]), block >> 3)
            if self.versioning:
                self.revision += 1
                self._write_meta()

    def unmap(self, offset: int, length: int) -> None:
        self._check_io(offset, length)
        bs = self.block_size
        with self._lock:
            head = self._files[0]
            for block in range(offset // bs, (offset + length) // bs):
                cur = os.pread(head.fd, 1, block >> 3)
                os.pwrite(head.fd, bytes([cur[0] & ~(1 << (block & 7)) & 0xFF]), block >> 3)

    def create_snapshot(self) -> int:
        with self._lock:
            sid = self._files[0].sid + 1
            self._add_snapshot_file(sid)
            self._write_meta()
            return sid

    @property
    def chain_length(self) -> int:
        return len(self._files)

    def close(self) -> None:
        with self._lock:
            for f in self._files:
                os.close(f.fd)
            self._files = []


class NullStore:
    """Completes everything immediately; reads return zeros."""

    def __init__(self, volume_size: int, block_size: int = 4096):
        self.volume_size = volume_size
        self.block_size = block_size

    def read(self, offset: int, length: int) -> bytes:
        return bytes(length)

    def write(self, offset: int, data: bytes) -> None:
        pass

    def unmap(self, offset: int, length: int) -> None:
        pass

    def create_snapshot(self) -> int:
        return 0

    def close(self) -> None:
        pass
