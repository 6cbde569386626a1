"""On-disk geometry: region layout math and superblock/table codecs.

Device layout (all regions aligned, little-endian):

    [superblock][volume table + snapshot table][extent descriptors][data extents]

The superblock occupies one block at offset 0. The metadata region holds the
volume table (64-byte slots) followed by the snapshot table (32-byte slots),
the snapshot table starting on a block boundary. One descriptor per data
extent lives in the extent-tracking region; the rest of the device is data.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

from .errors import StorageError, UsageError

MAGIC = b"DBSSTORE"
FORMAT_VERSION = 1

# magic, version, block_size, blocks_per_extent, max_volumes, max_snapshots,
# device_size, allocation_mark, next_snapshot_id, metadata/extent/data offsets
SUPERBLOCK = struct.Struct("<8sIIIIIQQIQQQ")

# live, latest_snapshot_id, volume_size, name (NUL padded)
VOLUME_SLOT = struct.Struct("<B3xIQ48s")
VOLUME_SLOT_SIZE = 64
MAX_NAME_BYTES = 47  # 48-byte field with a guaranteed NUL terminator

# live, id, parent_id, volume_slot, created_at
SNAPSHOT_SLOT = struct.Struct("<B3xIIIQ8x")
SNAPSHOT_SLOT_SIZE = 32

# owner_snapshot_id, reserved, logical_extent_index; bitmap + padding follow
DESCRIPTOR_HEAD = struct.Struct("<IIQ")

REGION_ALIGN = 4096


def align_up(value: int, align: int) -> int:
    return (value + align - 1) // align * align


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class DeviceGeometry:
    device_size: int = 0  # 0 = take the target's size at init time
    block_size: int = 4096
    blocks_per_extent: int = 256
    max_volumes: int = 64
    max_snapshots: int = 1024

    @property
    def extent_size(self) -> int:
        return self.block_size * self.blocks_per_extent

    @property
    def bitmap_bytes(self) -> int:
        return (self.blocks_per_extent + 7) // 8

    def validate(self) -> None:
        if not _is_pow2(self.block_size) or self.block_size < 512:
            raise UsageError(f"block_size must be a power of two >= 512, got {self.block_size}")
        if not _is_pow2(self.blocks_per_extent):
            raise UsageError(f"blocks_per_extent must be a power of two, got {self.blocks_per_extent}")
        if self.max_volumes < 1 or self.max_snapshots < 2:
            raise UsageError("need at least 1 volume slot and 2 snapshot slots")
        if self.device_size < 0:
            raise UsageError("negative device size")

    def with_device_size(self, size: int) -> "DeviceGeometry":
        return replace(self, device_size=size)


def descriptor_size(geometry: DeviceGeometry) -> int:
    raw = DESCRIPTOR_HEAD.size + geometry.bitmap_bytes
    size = 32
    while size < raw:
        size *= 2
    return size


@dataclass(frozen=True)
class DeviceLayout:
    geometry: DeviceGeometry
    volume_table_offset: int
    snapshot_table_offset: int
    extent_table_offset: int
    data_offset: int
    extent_count: int
    descriptor_size: int

    @classmethod
    def compute(cls, geometry: DeviceGeometry) -> "DeviceLayout":
        geometry.validate()
        bs = geometry.block_size
        align = max(bs, REGION_ALIGN)
        vt_off = align_up(bs, align)  # one block of superblock, aligned
        st_off = align_up(vt_off + geometry.max_volumes * VOLUME_SLOT_SIZE, bs)
        ext_off = align_up(st_off + geometry.max_snapshots * SNAPSHOT_SLOT_SIZE, align)
        desc = descriptor_size(geometry)
        ext_size = geometry.extent_size

        if geometry.device_size < ext_off:
            raise UsageError("device too small")
        n = (geometry.device_size - ext_off) // ext_size
        while n > 0:
            data_off = align_up(ext_off + n * desc, align)
            if data_off + n * ext_size <= geometry.device_size:
                break
            n -= 1
        if n < 1:
            raise UsageError("device too small")
        data_off = align_up(ext_off + n * desc, align)
        return cls(
            geometry=geometry,
            volume_table_offset=vt_off,
            snapshot_table_offset=st_off,
            extent_table_offset=ext_off,
            data_offset=data_off,
            extent_count=n,
            descriptor_size=desc,
        )

    @property
    def volume_table_size(self) -> int:
        return self.snapshot_table_offset - self.volume_table_offset

    @property
    def snapshot_table_size(self) -> int:
        return self.extent_table_offset - self.snapshot_table_offset

    @property
    def extent_table_size(self) -> int:
        return self.data_offset - self.extent_table_offset

    def extent_offset(self, phys: int) -> int:
        return self.data_offset + phys * self.geometry.extent_size

    def block_offset(self, phys: int, block_in_extent: int) -> int:
        return self.extent_offset(phys) + block_in_extent * self.geometry.block_size


@dataclass
class Superblock:
    geometry: DeviceGeometry
    allocation_mark: int = 0
    next_snapshot_id: int = 1
    format_version: int = FORMAT_VERSION

    def pack_block(self, layout: DeviceLayout) -> bytes:
        g = self.geometry
        raw = SUPERBLOCK.pack(
            MAGIC,
            self.format_version,
            g.block_size,
            g.blocks_per_extent,
            g.max_volumes,
            g.max_snapshots,
            g.device_size,
            self.allocation_mark,
            self.next_snapshot_id,
            layout.volume_table_offset,
            layout.extent_table_offset,
            layout.data_offset,
        )
        return raw + b"\x00" * (g.block_size - len(raw))

    @classmethod
    def unpack(cls, data: bytes) -> tuple["Superblock", tuple[int, int, int]]:
        """Parse a superblock; returns (superblock, stored region offsets)."""
        if len(data) < SUPERBLOCK.size:
            raise StorageError("device truncated: superblock short read")
        (
            magic,
            version,
            block_size,
            blocks_per_extent,
            max_volumes,
            max_snapshots,
            device_size,
            allocation_mark,
            next_snapshot_id,
            meta_off,
            ext_off,
            data_off,
        ) = SUPERBLOCK.unpack_from(data, 0)
        if magic != MAGIC:
            raise StorageError("bad magic: not a formatted device")
        if version != FORMAT_VERSION:
            raise StorageError(f"format version {version} not supported")
        geometry = DeviceGeometry(
            device_size=device_size,
            block_size=block_size,
            blocks_per_extent=blocks_per_extent,
            max_volumes=max_volumes,
            max_snapshots=max_snapshots,
        )
        sb = cls(
            geometry=geometry,
            allocation_mark=allocation_mark,
            next_snapshot_id=next_snapshot_id,
            format_version=version,
        )
        return sb, (meta_off, ext_off, data_off)
