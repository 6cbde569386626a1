import pytest

from tinysan import DeviceGeometry, DeviceLayout, Superblock, UsageError
from tinysan.geometry import (
    REGION_ALIGN,
    SNAPSHOT_SLOT_SIZE,
    SUPERBLOCK,
    VOLUME_SLOT_SIZE,
    align_up,
    descriptor_size,
)

MIB = 1 << 20
GIB = 1 << 30


def brute_force_extent_count(geometry):
    """Independent oracle: largest n such that the four regions fit, trying
    every candidate instead of using the layout's closed-form search."""
    align = max(geometry.block_size, REGION_ALIGN)
    vt_off = align_up(geometry.block_size, align)
    st_off = align_up(vt_off + geometry.max_volumes * VOLUME_SLOT_SIZE, geometry.block_size)
    ext_off = align_up(st_off + geometry.max_snapshots * SNAPSHOT_SLOT_SIZE, align)
    desc = descriptor_size(geometry)
    best = 0
    n = 1
    while True:
        data_off = align_up(ext_off + n * desc, align)
        if data_off + n * geometry.extent_size > geometry.device_size:
            break
        best = n
        n += 1
    return best


@pytest.mark.parametrize(
    "size,kwargs",
    [
        (1 * GIB, {}),
        (64 * MIB, {}),
        (1 * GIB, {"blocks_per_extent": 16}),
        (512 * MIB, {"block_size": 512, "blocks_per_extent": 2048}),
        (100 * MIB + 4096, {"max_volumes": 3, "max_snapshots": 7}),
        (2 * GIB + 123 * 4096, {}),
    ],
)
def test_extent_count_matches_brute_force(size, kwargs):
    geometry = DeviceGeometry(device_size=size, **kwargs)
    layout = DeviceLayout.compute(geometry)
    assert layout.extent_count == brute_force_extent_count(geometry)
    assert layout.data_offset + layout.extent_count * geometry.extent_size <= size
    # regions are ordered, non-overlapping, and 4096-byte aligned
    offs = [
        layout.volume_table_offset,
        layout.snapshot_table_offset,
        layout.extent_table_offset,
        layout.data_offset,
    ]
    assert offs == sorted(offs)
    for off in (layout.volume_table_offset, layout.extent_table_offset, layout.data_offset):
        assert off % REGION_ALIGN == 0


def test_default_1gib_holds_1023_extents():
    layout = DeviceLayout.compute(DeviceGeometry(device_size=1 * GIB))
    assert layout.extent_count == 1023
    assert layout.extent_count <= 1023


def test_default_geometry_arithmetic():
    g = DeviceGeometry(device_size=GIB)
    assert g.block_size == 4096
    assert g.blocks_per_extent == 256
    assert g.extent_size == 1 * MIB
    assert g.block_size * g.blocks_per_extent == g.extent_size
    assert descriptor_size(g) == 64  # 16-byte head + 32-byte bitmap, padded


def test_device_too_small():
    with pytest.raises(UsageError, match="too small"):
        DeviceLayout.compute(DeviceGeometry(device_size=1 * MIB))
    # smaller than superblock + metadata regions alone
    with pytest.raises(UsageError, match="too small"):
        DeviceLayout.compute(DeviceGeometry(device_size=16 * 4096))


def test_geometry_validation():
    with pytest.raises(UsageError):
        DeviceGeometry(device_size=GIB, block_size=1000).validate()
    with pytest.raises(UsageError):
        DeviceGeometry(device_size=GIB, blocks_per_extent=3).validate()


def test_superblock_roundtrip():
    geometry = DeviceGeometry(device_size=GIB)
    layout = DeviceLayout.compute(geometry)
    sb = Superblock(geometry=geometry, allocation_mark=17, next_snapshot_id=42)
    block = sb.pack_block(layout)
    assert len(block) == geometry.block_size
    assert block[SUPERBLOCK.size:] == bytes(geometry.block_size - SUPERBLOCK.size)
    parsed, stored = Superblock.unpack(block)
    assert parsed == sb
    assert stored == (layout.volume_table_offset, layout.extent_table_offset, layout.data_offset)
