"""Extent-based volume/snapshot store over a single file or raw block device.

Space is carved into fixed-size extents, each owned by exactly one snapshot
and carrying a per-block presence bitmap. Volumes are parent-linked snapshot
chains; reads resolve each block from the latest snapshot down to the root,
writes go in place when the latest snapshot already owns the extent and
copy-on-write otherwise. All extent maps live only in memory and are rebuilt
at open by scanning the descriptor region; the superblock's allocation mark
is a high-water mark persisted only when it advances.

Persistence discipline (no journal): data blocks first, then descriptors,
then the superblock when the mark moved, then acknowledge. Clean-shutdown
recovery is exact; a crash may lose unacknowledged writes.
"""

from __future__ import annotations

import heapq
import os
import threading
import time
from dataclasses import dataclass

from .blockdev import BlockFile
from .errors import ConflictError, NotFoundError, StorageError, UsageError
from .geometry import (
    DESCRIPTOR_HEAD,
    MAGIC,
    MAX_NAME_BYTES,
    SNAPSHOT_SLOT,
    SNAPSHOT_SLOT_SIZE,
    VOLUME_SLOT,
    VOLUME_SLOT_SIZE,
    DeviceGeometry,
    DeviceLayout,
    Superblock,
)

FREE_OWNER = 0  # snapshot id 0 is the universal none/free sentinel


@dataclass
class VolumeEntry:
    slot: int
    name: str
    volume_size: int
    latest_snapshot_id: int


@dataclass
class SnapshotEntry:
    slot: int
    id: int
    parent_id: int
    volume_slot: int
    created_at: int


def _encode_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    if not raw or len(raw) > MAX_NAME_BYTES:
        raise UsageError(f"volume name must be 1..{MAX_NAME_BYTES} UTF-8 bytes")
    if b"\x00" in raw:
        raise UsageError("volume name may not contain NUL")
    return raw


def init_device(path: str, geometry: DeviceGeometry | None = None, force: bool = False) -> Superblock:
    """Format a target file or device: superblock plus zeroed metadata and
    extent-tracking regions. Fails on an already-formatted target unless
    force is set."""
    if geometry is None:
        geometry = DeviceGeometry()
    if not os.path.exists(path):
        raise NotFoundError(f"target does not exist: {path}")
    if geometry.device_size == 0:
        with open(path, "rb") as f:
            f.seek(0, os.SEEK_END)
            geometry = geometry.with_device_size(f.tell())
    layout = DeviceLayout.compute(geometry)

    with open(path, "rb") as f:
        if f.read(len(MAGIC)) == MAGIC and not force:
            raise ConflictError(f"already formatted: {path}")

    sb = Superblock(geometry=geometry, allocation_mark=0, next_snapshot_id=1)
    dev = BlockFile(path)
    try:
        if dev.size() < geometry.device_size:
            raise UsageError("device too small")
        zero_chunk = bytes(min(1 << 20, layout.data_offset))
        pos = geometry.block_size
        while pos < layout.data_offset:
            n = min(len(zero_chunk), layout.data_offset - pos)
            dev.pwrite(pos, zero_chunk[:n])
            pos += n
        dev.pwrite(0, sb.pack_block(layout))
        dev.fsync()
    finally:
        dev.close()
    return sb


def open_device(path: str, direct: bool | None = None) -> "Device":
    return Device(path, direct=direct)


class Device:
    """An open store. Block I/O (read/write/unmap) is safe for concurrent
    callers; administrative operations serialize with each other and with
    extent allocation through a single metadata critical section. As with any
    block device, callers must quiesce in-flight I/O to a volume before
    deleting or snapshotting it; racing the two gives unspecified per-block
    results."""

    def __init__(self, path: str, direct: bool | None = None):
        self.path = path
        try:
            self._file = BlockFile(path, direct=direct)
        except FileNotFoundError:
            raise NotFoundError(f"target does not exist: {path}")
        try:
            self._load()
        except Exception:
            self._file.close()
            raise

    # ------------------------------------------------------------------ load

    def _load(self) -> None:
        raw = self._file.pread(0, 4096)
        sb, stored = Superblock.unpack(raw)
        geometry = sb.geometry
        layout = DeviceLayout.compute(geometry)
        if stored != (layout.volume_table_offset, layout.extent_table_offset, layout.data_offset):
            raise StorageError("superblock region offsets disagree with geometry")
        if self._file.size() < geometry.device_size:
            raise StorageError("geometry inconsistent with device size")

        self.superblock = sb
        self.layout = layout
        self.geometry = geometry
        self._lock = threading.RLock()
        self.data_read_ops = 0
        self.data_write_ops = 0

        self._vol_table = bytearray(self._read_region(layout.volume_table_offset, layout.volume_table_size))
        self._snap_table = bytearray(self._read_region(layout.snapshot_table_offset, layout.snapshot_table_size))
        self._ext_table = bytearray(self._read_region(layout.extent_table_offset, layout.extent_table_size))

        self._volumes: dict[str, VolumeEntry] = {}
        self._vol_slots: list[VolumeEntry | None] = [None] * geometry.max_volumes
        for i in range(geometry.max_volumes):
            live, latest, size, name_raw = VOLUME_SLOT.unpack_from(self._vol_table, i * VOLUME_SLOT_SIZE)
            if not live:
                continue
            name = name_raw.split(b"\x00", 1)[0].decode("utf-8")
            entry = VolumeEntry(slot=i, name=name, volume_size=size, latest_snapshot_id=latest)
            if name in self._volumes:
                raise StorageError(f"corrupt volume table: duplicate name {name!r}")
            self._volumes[name] = entry
            self._vol_slots[i] = entry

        self._snapshots: dict[int, SnapshotEntry] = {}
        self._snap_slots: list[SnapshotEntry | None] = [None] * geometry.max_snapshots
        for i in range(geometry.max_snapshots):
            live, sid, parent, vslot, created = SNAPSHOT_SLOT.unpack_from(self._snap_table, i * SNAPSHOT_SLOT_SIZE)
            if not live:
                continue
            if sid == FREE_OWNER or sid >= sb.next_snapshot_id:
                raise StorageError(f"corrupt snapshot table: id {sid} out of range")
            entry = SnapshotEntry(slot=i, id=sid, parent_id=parent, volume_slot=vslot, created_at=created)
            if sid in self._snapshots:
                raise StorageError(f"corrupt snapshot table: duplicate id {sid}")
            self._snapshots[sid] = entry
            self._snap_slots[i] = entry

        for vol in self._volumes.values():
            snap = self._snapshots.get(vol.latest_snapshot_id)
            if snap is None or snap.volume_slot != vol.slot:
                raise StorageError(f"volume {vol.name!r} references missing latest snapshot")

        bm_len = geometry.bitmap_bytes
        desc = layout.descriptor_size
        self._owner = [FREE_OWNER] * layout.extent_count
        self._ext_lei = [0] * layout.extent_count
        self._bitmaps: dict[int, bytearray] = {}
        self._snap_extents: dict[int, dict[int, int]] = {s: {} for s in self._snapshots}
        highest_owned = -1
        for phys in range(layout.extent_count):
            off = phys * desc
            owner, _, lei = DESCRIPTOR_HEAD.unpack_from(self._ext_table, off)
            if owner == FREE_OWNER:
                continue
            if owner not in self._snapshots:
                # orphan from an interrupted run: treat as free, do not write
                continue
            emap = self._snap_extents[owner]
            if lei in emap:
                raise StorageError(f"corrupt extent table: duplicate (snapshot {owner}, extent {lei})")
            emap[lei] = phys
            self._owner[phys] = owner
            self._ext_lei[phys] = lei
            self._bitmaps[phys] = bytearray(self._ext_table[off + DESCRIPTOR_HEAD.size:off + DESCRIPTOR_HEAD.size + bm_len])
            highest_owned = phys

        if sb.allocation_mark > layout.extent_count:
            raise StorageError("allocation mark beyond extent count")
        self._frontier = max(sb.allocation_mark, highest_owned + 1)
        self.superblock.allocation_mark = self._frontier
        self._free_heap = [p for p in range(self._frontier) if self._owner[p] == FREE_OWNER]
        heapq.heapify(self._free_heap)

        self._chains: dict[int, list[int]] = {}
        self._lei_index: dict[int, dict[int, list[int]]] = {}
        self._resolve_cache: dict[int, dict[int, int | None]] = {}
        for vol in self._volumes.values():
            self._rebuild_volume_index(vol)

    def _read_region(self, offset: int, length: int) -> bytes:
        chunks = []
        pos = 0
        while pos < length:
            n = min(1 << 20, length - pos)
            chunks.append(self._file.pread(offset + pos, n))
            pos += n
        return b"".join(chunks)

    # ------------------------------------------------------------- index math

    def _walk_chain(self, latest_id: int) -> list[int]:
        chain = []
        seen = set()
        sid = latest_id
        while sid != FREE_OWNER:
            if sid in seen:
                raise StorageError(f"snapshot chain cycle at id {sid}")
            seen.add(sid)
            snap = self._snapshots.get(sid)
            if snap is None:
                raise StorageError(f"snapshot chain references missing id {sid}")
            chain.append(sid)
            sid = snap.parent_id
        return chain

    def _rebuild_volume_index(self, vol: VolumeEntry) -> None:
        chain = self._walk_chain(vol.latest_snapshot_id)
        self._chains[vol.slot] = chain
        lei_index: dict[int, list[int]] = {}
        for sid in chain:
            for lei, phys in self._snap_extents[sid].items():
                lei_index.setdefault(lei, []).append(phys)
        self._lei_index[vol.slot] = lei_index
        self._resolve_cache[vol.slot] = {}

    def _drop_volume_index(self, slot: int) -> None:
        self._chains.pop(slot, None)
        self._lei_index.pop(slot, None)
        self._resolve_cache.pop(slot, None)

    def _resolve_block(self, vslot: int, block: int) -> int | None:
        cache = self._resolve_cache[vslot]
        try:
            return cache[block]
        except KeyError:
            pass
        bpe = self.geometry.blocks_per_extent
        lei, bib = divmod(block, bpe)
        hit = None
        for phys in self._lei_index[vslot].get(lei, ()):
            bm = self._bitmaps[phys]
            if bm[bib >> 3] & (1 << (bib & 7)):
                hit = phys
                break
        cache[block] = hit
        return hit

    # ------------------------------------------------------------ persistence

    def _persist_superblock(self) -> None:
        self._file.pwrite(0, self.superblock.pack_block(self.layout))

    def _persist_table_span(self, base: int, mirror: bytearray, start: int, length: int) -> None:
        bs = self.geometry.block_size
        first = start // bs * bs
        last = min(len(mirror), (start + length + bs - 1) // bs * bs)
        self._file.pwrite(base + first, bytes(mirror[first:last]))

    def _mirror_volume_slot(self, slot: int) -> None:
        entry = self._vol_slots[slot]
        off = slot * VOLUME_SLOT_SIZE
        if entry is None:
            self._vol_table[off:off + VOLUME_SLOT_SIZE] = bytes(VOLUME_SLOT_SIZE)
        else:
            VOLUME_SLOT.pack_into(
                self._vol_table, off, 1, entry.latest_snapshot_id, entry.volume_size,
                _encode_name(entry.name),
            )

    def _persist_volume_slot(self, slot: int) -> None:
        self._mirror_volume_slot(slot)
        self._persist_table_span(
            self.layout.volume_table_offset, self._vol_table,
            slot * VOLUME_SLOT_SIZE, VOLUME_SLOT_SIZE,
        )

    def _mirror_snapshot_slot(self, slot: int) -> None:
        entry = self._snap_slots[slot]
        off = slot * SNAPSHOT_SLOT_SIZE
        if entry is None:
            self._snap_table[off:off + SNAPSHOT_SLOT_SIZE] = bytes(SNAPSHOT_SLOT_SIZE)
        else:
            SNAPSHOT_SLOT.pack_into(
                self._snap_table, off, 1, entry.id, entry.parent_id,
                entry.volume_slot, entry.created_at,
            )

    def _persist_snapshot_slots(self, slots) -> None:
        bs = self.geometry.block_size
        blocks = set()
        for slot in slots:
            self._mirror_snapshot_slot(slot)
            blocks.add(slot * SNAPSHOT_SLOT_SIZE // bs)
        for b in sorted(blocks):
            self._persist_table_span(self.layout.snapshot_table_offset, self._snap_table, b * bs, bs)

    def _mirror_descriptor(self, phys: int) -> None:
        desc = self.layout.descriptor_size
        off = phys * desc
        owner = self._owner[phys]
        if owner == FREE_OWNER:
            self._ext_table[off:off + desc] = bytes(desc)
        else:
            DESCRIPTOR_HEAD.pack_into(self._ext_table, off, owner, 0, self._ext_lei[phys])
            bm = self._bitmaps[phys]
            self._ext_table[off + DESCRIPTOR_HEAD.size:off + DESCRIPTOR_HEAD.size + len(bm)] = bm

    def _persist_descriptors(self, phys_set) -> None:
        bs = self.geometry.block_size
        desc = self.layout.descriptor_size
        blocks = set()
        for phys in phys_set:
            self._mirror_descriptor(phys)
            blocks.add(phys * desc // bs)
        for b in sorted(blocks):
            self._persist_table_span(self.layout.extent_table_offset, self._ext_table, b * bs, bs)

    # ------------------------------------------------------------- allocation

    def _allocate_extent(self, owner: int, lei: int) -> tuple[int, bool]:
        """Take the lowest free extent; returns (phys, mark_advanced)."""
        moved = False
        if self._free_heap:
            phys = heapq.heappop(self._free_heap)
        elif self._frontier < self.layout.extent_count:
            phys = self._frontier
            self._frontier += 1
            self.superblock.allocation_mark = self._frontier
            moved = True
        else:
            raise StorageError("device full: no free extent")
        self._owner[phys] = owner
        self._ext_lei[phys] = lei
        self._bitmaps[phys] = bytearray(self.geometry.bitmap_bytes)
        self._snap_extents[owner][lei] = phys
        return phys, moved

    def _free_extent(self, phys: int) -> None:
        owner = self._owner[phys]
        if owner != FREE_OWNER:
            self._snap_extents[owner].pop(self._ext_lei[phys], None)
        self._owner[phys] = FREE_OWNER
        self._ext_lei[phys] = 0
        self._bitmaps.pop(phys, None)
        heapq.heappush(self._free_heap, phys)

    # ----------------------------------------------------------------- lookup

    def _get_volume(self, name: str) -> VolumeEntry:
        vol = self._volumes.get(name)
        if vol is None:
            raise NotFoundError(f"no such volume: {name}")
        return vol

    def _check_io(self, vol: VolumeEntry, offset: int, length: int) -> None:
        bs = self.geometry.block_size
        if offset % bs or length % bs:
            raise UsageError(f"offset/length must be multiples of {bs}")
        if offset < 0 or length < 0 or offset + length > vol.volume_size:
            raise UsageError(f"I/O beyond volume end: {offset}+{length} > {vol.volume_size}")

    def _find_free_slot(self, slots, what: str) -> int:
        for i, entry in enumerate(slots):
            if entry is None:
                return i
        raise ConflictError(f"{what} slots exhausted")

    # ------------------------------------------------------------- volume ops

    def create_volume(self, name: str, size: int) -> VolumeEntry:
        with self._lock:
            _encode_name(name)
            if name in self._volumes:
                raise ConflictError(f"duplicate volume name: {name}")
            if size <= 0 or size % self.geometry.block_size:
                raise UsageError("volume size must be a positive multiple of block_size")
            vslot = self._find_free_slot(self._vol_slots, "volume")
            return self._create_volume_locked(name, size, vslot, parent_id=FREE_OWNER)

    def _create_volume_locked(self, name: str, size: int, vslot: int, parent_id: int) -> VolumeEntry:
        sslot = self._find_free_slot(self._snap_slots, "snapshot")
        sid = self.superblock.next_snapshot_id
        self.superblock.next_snapshot_id = sid + 1
        snap = SnapshotEntry(slot=sslot, id=sid, parent_id=parent_id,
                             volume_slot=vslot, created_at=int(time.time()))
        self._snap_slots[sslot] = snap
        self._snapshots[sid] = snap
        self._snap_extents[sid] = {}
        vol = VolumeEntry(slot=vslot, name=name, volume_size=size, latest_snapshot_id=sid)
        self._vol_slots[vslot] = vol
        self._volumes[name] = vol
        self._persist_snapshot_slots([sslot])
        self._persist_volume_slot(vslot)
        self._persist_superblock()
        self._rebuild_volume_index(vol)
        return vol

    def delete_volume(self, name: str) -> None:
        with self._lock:
            vol = self._get_volume(name)
            own = [s for s in self._snapshots.values() if s.volume_slot == vol.slot]
            own_ids = {s.id for s in own}
            for snap in self._snapshots.values():
                if snap.volume_slot != vol.slot and snap.parent_id in own_ids:
                    raise ConflictError(f"volume in use: snapshot {snap.id} clones from {name}")
            dirty = []
            snap_slots = []
            for snap in own:
                for phys in list(self._snap_extents[snap.id].values()):
                    self._free_extent(phys)
                    dirty.append(phys)
                del self._snap_extents[snap.id]
                del self._snapshots[snap.id]
                self._snap_slots[snap.slot] = None
                snap_slots.append(snap.slot)
            del self._volumes[name]
            self._vol_slots[vol.slot] = None
            self._persist_descriptors(dirty)
            self._persist_snapshot_slots(snap_slots)
            self._persist_volume_slot(vol.slot)
            self._drop_volume_index(vol.slot)

    def rename_volume(self, old_name: str, new_name: str) -> None:
        with self._lock:
            vol = self._get_volume(old_name)
            _encode_name(new_name)
            if new_name in self._volumes:
                raise ConflictError(f"duplicate volume name: {new_name}")
            del self._volumes[old_name]
            vol.name = new_name
            self._volumes[new_name] = vol
            self._persist_volume_slot(vol.slot)

    # ----------------------------------------------------------- snapshot ops

    def create_snapshot(self, volume_name: str) -> SnapshotEntry:
        with self._lock:
            vol = self._get_volume(volume_name)
            return self._create_snapshot_locked(vol)

    def _create_snapshot_locked(self, vol: VolumeEntry) -> SnapshotEntry:
        sslot = self._find_free_slot(self._snap_slots, "snapshot")
        sid = self.superblock.next_snapshot_id
        self.superblock.next_snapshot_id = sid + 1
        snap = SnapshotEntry(slot=sslot, id=sid, parent_id=vol.latest_snapshot_id,
                             volume_slot=vol.slot, created_at=int(time.time()))
        self._snap_slots[sslot] = snap
        self._snapshots[sid] = snap
        self._snap_extents[sid] = {}
        vol.latest_snapshot_id = sid
        self._persist_snapshot_slots([sslot])
        self._persist_volume_slot(vol.slot)
        self._persist_superblock()
        # chain grew at the head; the new latest owns nothing yet, so the
        # per-extent lists and resolved blocks are unchanged
        self._chains[vol.slot].insert(0, sid)
        return snap

    def _children_of(self, sid: int) -> list[SnapshotEntry]:
        return [s for s in self._snapshots.values() if s.parent_id == sid]

    def delete_snapshot(self, volume_name: str, snapshot_id: int) -> None:
        with self._lock:
            vol = self._get_volume(volume_name)
            snap = self._snapshots.get(snapshot_id)
            if snap is None or snap.volume_slot != vol.slot:
                raise NotFoundError(f"no snapshot {snapshot_id} in volume {volume_name}")
            if vol.latest_snapshot_id == snapshot_id:
                raise ConflictError("cannot delete the top-level snapshot")
            children = self._children_of(snapshot_id)
            if len(children) != 1:
                raise ConflictError(f"snapshot in use: {snapshot_id} has {len(children)} children")
            child = children[0]
            self._merge_into_child(snap, child)

    def _merge_into_child(self, snap: SnapshotEntry, child: SnapshotEntry) -> None:
        bpe = self.geometry.blocks_per_extent
        bs = self.geometry.block_size
        smap = self._snap_extents[snap.id]
        cmap = self._snap_extents[child.id]
        dirty = set()
        for lei, sphys in sorted(smap.items()):
            cphys = cmap.get(lei)
            if cphys is None:
                # child has no extent here: transfer ownership wholesale
                self._owner[sphys] = child.id
                cmap[lei] = sphys
                dirty.add(sphys)
                continue
            sbm = self._bitmaps[sphys]
            cbm = self._bitmaps[cphys]
            run_start = None
            for bib in range(bpe + 1):
                needed = (
                    bib < bpe
                    and sbm[bib >> 3] & (1 << (bib & 7))
                    and not cbm[bib >> 3] & (1 << (bib & 7))
                )
                if needed and run_start is None:
                    run_start = bib
                elif not needed and run_start is not None:
                    n = bib - run_start
                    data = self._file.pread(self.layout.block_offset(sphys, run_start), n * bs)
                    self._file.pwrite(self.layout.block_offset(cphys, run_start), data)
                    for i in range(run_start, bib):
                        cbm[i >> 3] |= 1 << (i & 7)
                    run_start = None
            dirty.add(cphys)
            self._free_extent(sphys)
            dirty.add(sphys)
        smap.clear()
        del self._snap_extents[snap.id]
        child.parent_id = snap.parent_id
        del self._snapshots[snap.id]
        self._snap_slots[snap.slot] = None
        self._persist_descriptors(dirty)
        self._persist_snapshot_slots([snap.slot, child.slot])
        for vol in self._volumes.values():
            self._rebuild_volume_index(vol)

    def clone_snapshot(self, source_volume: str, source_snapshot_id: int, new_volume_name: str) -> VolumeEntry:
        with self._lock:
            src = self._get_volume(source_volume)
            snap = self._snapshots.get(source_snapshot_id)
            if snap is None or snap.volume_slot != src.slot:
                raise NotFoundError(f"no snapshot {source_snapshot_id} in volume {source_volume}")
            _encode_name(new_volume_name)
            if new_volume_name in self._volumes:
                raise ConflictError(f"duplicate volume name: {new_volume_name}")
            vslot = self._find_free_slot(self._vol_slots, "volume")
            freeze = src.latest_snapshot_id == source_snapshot_id
            free_snap_slots = sum(1 for s in self._snap_slots if s is None)
            if free_snap_slots < (2 if freeze else 1):
                raise ConflictError("snapshot slots exhausted")
            if freeze:
                # freeze the source head so shared history stays immutable
                self._create_snapshot_locked(src)
            return self._create_volume_locked(new_volume_name, src.volume_size, vslot,
                                              parent_id=source_snapshot_id)

    # ---------------------------------------------------------------- read

    def read(self, volume_name: str, offset: int, length: int) -> bytes:
        bs = self.geometry.block_size
        bpe = self.geometry.blocks_per_extent
        with self._lock:
            vol = self._get_volume(volume_name)
            self._check_io(vol, offset, length)
            vslot = vol.slot
            plan = []  # (phys, first block-in-extent, nblocks, buffer offset)
            block = offset // bs
            nblocks = length // bs
            i = 0
            while i < nblocks:
                phys = self._resolve_block(vslot, block + i)
                if phys is None:
                    i += 1
                    continue
                start = i
                bib = (block + i) % bpe
                i += 1
                while (
                    i < nblocks
                    and (block + i) % bpe != 0
                    and self._resolve_block(vslot, block + i) == phys
                ):
                    i += 1
                plan.append((phys, bib, i - start, start * bs))
        if not plan:
            return bytes(length)
        buf = bytearray(length)
        for phys, bib, n, pos in plan:
            self.data_read_ops += 1
            buf[pos:pos + n * bs] = self._file.pread(self.layout.block_offset(phys, bib), n * bs)
        return bytes(buf)

    # ---------------------------------------------------------------- write

    def write(self, volume_name: str, offset: int, data: bytes) -> None:
        bs = self.geometry.block_size
        bpe = self.geometry.blocks_per_extent
        length = len(data)
        with self._lock:
            vol = self._get_volume(volume_name)
            self._check_io(vol, offset, length)
            vslot = vol.slot
            latest = vol.latest_snapshot_id
            emap = self._snap_extents[latest]
            lei_index = self._lei_index[vslot]
            mark_moved = False
            plan = []  # (phys, first block-in-extent, nblocks, data offset)
            block = offset // bs
            nblocks = length // bs
            i = 0
            while i < nblocks:
                lei, bib = divmod(block + i, bpe)
                phys = emap.get(lei)
                if phys is None:
                    phys, moved = self._allocate_extent(latest, lei)
                    mark_moved |= moved
                    # newest snapshot resolves first
                    lei_index.setdefault(lei, []).insert(0, phys)
                n = min(nblocks - i, bpe - bib)
                plan.append((phys, bib, n, i * bs))
                i += n
        for phys, bib, n, pos in plan:
            self.data_write_ops += 1
            self._file.pwrite(self.layout.block_offset(phys, bib), data[pos:pos + n * bs])
        with self._lock:
            cache = self._resolve_cache[vslot]
            for phys, bib, n, _ in plan:
                bm = self._bitmaps[phys]
                base = self._ext_lei[phys] * bpe
                for b in range(bib, bib + n):
                    bm[b >> 3] |= 1 << (b & 7)
                    cache[base + b] = phys
            self._persist_descriptors(p for p, _, _, _ in plan)
            if mark_moved:
                self._persist_superblock()

    # ---------------------------------------------------------------- unmap

    def unmap(self, volume_name: str, offset: int, length: int) -> None:
        bs = self.geometry.block_size
        bpe = self.geometry.blocks_per_extent
        with self._lock:
            vol = self._get_volume(volume_name)
            self._check_io(vol, offset, length)
            vslot = vol.slot
            latest = vol.latest_snapshot_id
            emap = self._snap_extents[latest]
            cache = self._resolve_cache[vslot]
            dirty = set()
            block = offset // bs
            nblocks = length // bs
            i = 0
            while i < nblocks:
                lei, bib = divmod(block + i, bpe)
                n = min(nblocks - i, bpe - bib)
                phys = emap.get(lei)
                if phys is not None:
                    bm = self._bitmaps[phys]
                    base = lei * bpe
                    for b in range(bib, bib + n):
                        bm[b >> 3] &= ~(1 << (b & 7)) & 0xFF
                        cache.pop(base + b, None)
                    if any(bm):
                        dirty.add(phys)
                    else:
                        self._free_extent(phys)
                        lst = self._lei_index[vslot].get(lei)
                        if lst:
                            lst.remove(phys)
                        dirty.add(phys)
                i += n
            self._persist_descriptors(dirty)

    # ---------------------------------------------------------------- query

    def query(self, volume_name: str | None = None) -> dict:
        with self._lock:
            if volume_name is not None:
                self._get_volume(volume_name)
            g = self.geometry
            total = self.layout.extent_count
            free = len(self._free_heap) + (total - self._frontier)
            report = {
                "device": self.path,
                "block_size": g.block_size,
                "blocks_per_extent": g.blocks_per_extent,
                "extent_size": g.extent_size,
                "device_size": g.device_size,
                "total_extents": total,
                "owned_extents": total - free,
                "free_extents": free,
                "free_bytes": free * g.extent_size,
                "allocation_mark": self.superblock.allocation_mark,
                "next_snapshot_id": self.superblock.next_snapshot_id,
                "volumes": [],
            }
            names = [volume_name] if volume_name is not None else sorted(self._volumes)
            for name in names:
                vol = self._volumes[name]
                chain = self._chains[vol.slot]
                snaps = []
                for sid in chain:
                    snap = self._snapshots[sid]
                    emap = self._snap_extents[sid]
                    blocks = sum(_popcount(self._bitmaps[p]) for p in emap.values())
                    snaps.append({
                        "id": sid,
                        "parent_id": snap.parent_id,
                        "volume_slot": snap.volume_slot,
                        "created_at": snap.created_at,
                        "extents": len(emap),
                        "blocks": blocks,
                    })
                own_extents = sum(
                    len(self._snap_extents[s.id])
                    for s in self._snapshots.values()
                    if s.volume_slot == vol.slot
                )
                report["volumes"].append({
                    "name": name,
                    "volume_size": vol.volume_size,
                    "latest_snapshot_id": vol.latest_snapshot_id,
                    "chain": list(chain),
                    "chain_length": len(chain),
                    "extents": own_extents,
                    "snapshots": snaps,
                })
            return report

    # ------------------------------------------------------------- inspection

    def volumes(self) -> list[str]:
        with self._lock:
            return sorted(self._volumes)

    def volume_size(self, name: str) -> int:
        with self._lock:
            return self._get_volume(name).volume_size

    def latest_snapshot(self, name: str) -> int:
        with self._lock:
            return self._get_volume(name).latest_snapshot_id

    def chain(self, name: str) -> list[int]:
        with self._lock:
            return list(self._chains[self._get_volume(name).slot])

    def index_state(self) -> dict:
        """Normalized snapshot of the in-memory index, for reconstruction
        checks: equality with a freshly opened handle's state is the test."""
        with self._lock:
            return {
                "volumes": {
                    name: (v.slot, v.volume_size, v.latest_snapshot_id)
                    for name, v in self._volumes.items()
                },
                "snapshots": {
                    sid: (s.slot, s.parent_id, s.volume_slot) for sid, s in self._snapshots.items()
                },
                "extents": {
                    sid: dict(emap) for sid, emap in self._snap_extents.items()
                },
                "bitmaps": {phys: bytes(bm) for phys, bm in self._bitmaps.items()},
                "free": sorted(self._free_heap) + list(range(self._frontier, self.layout.extent_count)),
                "allocation_mark": self.superblock.allocation_mark,
            }

    def descriptors(self):
        """Iterate (phys, owner, logical_extent_index, bitmap) of owned extents."""
        with self._lock:
            for phys, owner in enumerate(self._owner):
                if owner != FREE_OWNER:
                    yield phys, owner, self._ext_lei[phys], bytes(self._bitmaps[phys])

    def close(self) -> None:
        self._file.close()

    def __enter__(self) -> "Device":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _popcount(bm: bytes) -> int:
    return sum(b.bit_count() for b in bm)


def scan_device(path: str) -> dict:
    """Independent raw scan of an (unopened) device: parses the superblock,
    tables, and every descriptor straight from disk. Used as an oracle for
    reconstruction and conservation checks."""
    with open(path, "rb") as f:
        sb, stored = Superblock.unpack(f.read(4096))
        layout = DeviceLayout.compute(sb.geometry)
        volumes = {}
        f.seek(layout.volume_table_offset)
        vt = f.read(layout.volume_table_size)
        for i in range(sb.geometry.max_volumes):
            live, latest, size, name_raw = VOLUME_SLOT.unpack_from(vt, i * VOLUME_SLOT_SIZE)
            if live:
                volumes[name_raw.split(b"\x00", 1)[0].decode("utf-8")] = (i, size, latest)
        snapshots = {}
        f.seek(layout.snapshot_table_offset)
        st = f.read(layout.snapshot_table_size)
        for i in range(sb.geometry.max_snapshots):
            live, sid, parent, vslot, created = SNAPSHOT_SLOT.unpack_from(st, i * SNAPSHOT_SLOT_SIZE)
            if live:
                snapshots[sid] = (i, parent, vslot)
        f.seek(layout.extent_table_offset)
        et = f.read(layout.extent_table_size)
        desc = layout.descriptor_size
        bm_len = sb.geometry.bitmap_bytes
        extents = {}
        for phys in range(layout.extent_count):
            owner, _, lei = DESCRIPTOR_HEAD.unpack_from(et, phys * desc)
            if owner != FREE_OWNER:
                bm = et[phys * desc + DESCRIPTOR_HEAD.size:phys * desc + DESCRIPTOR_HEAD.size + bm_len]
                extents[phys] = (owner, lei, bytes(bm))
        return {
            "superblock": sb,
            "layout": layout,
            "stored_offsets": stored,
            "volumes": volumes,
            "snapshots": snapshots,
            "extents": extents,
        }
