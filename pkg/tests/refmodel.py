"""Trivial in-memory reference model for the extent store.

One dict of blocks per snapshot, the same chain semantics, none of the
on-disk machinery. Used as the oracle for randomized-operation equivalence;
guards mirror the engine's so error behavior can be compared too.
"""

from __future__ import annotations

from tinysan.errors import ConflictError, NotFoundError, UsageError


class ModelSnapshot:
    __slots__ = ("id", "parent_id", "volume", "blocks")

    def __init__(self, sid, parent_id, volume):
        self.id = sid
        self.parent_id = parent_id
        self.volume = volume
        self.blocks: dict[int, bytes] = {}


class ModelVolume:
    __slots__ = ("name", "size", "latest")

    def __init__(self, name, size, latest):
        self.name = name
        self.size = size
        self.latest = latest


class ReferenceModel:
    def __init__(self, block_size=4096, max_volumes=64, max_snapshots=1024):
        self.block_size = block_size
        self.max_volumes = max_volumes
        self.max_snapshots = max_snapshots
        self.volumes: dict[str, ModelVolume] = {}
        self.snapshots: dict[int, ModelSnapshot] = {}
        self.next_sid = 1

    # ------------------------------------------------------------- helpers

    def _vol(self, name):
        vol = self.volumes.get(name)
        if vol is None:
            raise NotFoundError(name)
        return vol

    def _new_snapshot(self, parent_id, volume):
        if len(self.snapshots) >= self.max_snapshots:
            raise ConflictError("snapshot slots exhausted")
        sid = self.next_sid
        self.next_sid += 1
        snap = ModelSnapshot(sid, parent_id, volume)
        self.snapshots[sid] = snap
        return snap

    def _check_io(self, vol, offset, length):
        bs = self.block_size
        if offset % bs or length % bs:
            raise UsageError("unaligned")
        if offset < 0 or length < 0 or offset + length > vol.size:
            raise UsageError("out of range")

    def chain(self, name):
        vol = self._vol(name)
        chain = []
        sid = vol.latest
        while sid:
            chain.append(sid)
            sid = self.snapshots[sid].parent_id
        return chain

    def _children(self, sid):
        return [s for s in self.snapshots.values() if s.parent_id == sid]

    # ----------------------------------------------------------------- ops

    def create_volume(self, name, size):
        if name in self.volumes:
            raise ConflictError("duplicate")
        if size <= 0 or size % self.block_size:
            raise UsageError("bad size")
        if len(self.volumes) >= self.max_volumes:
            raise ConflictError("volume slots exhausted")
        snap = self._new_snapshot(0, name)
        self.volumes[name] = ModelVolume(name, size, snap.id)

    def delete_volume(self, name):
        vol = self._vol(name)
        own = [s for s in self.snapshots.values() if s.volume == name]
        own_ids = {s.id for s in own}
        for snap in self.snapshots.values():
            if snap.volume != name and snap.parent_id in own_ids:
                raise ConflictError("volume in use")
        for snap in own:
            del self.snapshots[snap.id]
        del self.volumes[name]

    def rename_volume(self, old, new):
        vol = self._vol(old)
        if new in self.volumes:
            raise ConflictError("duplicate")
        del self.volumes[old]
        vol.name = new
        self.volumes[new] = vol
        for snap in self.snapshots.values():
            if snap.volume == old:
                snap.volume = new

    def create_snapshot(self, name):
        vol = self._vol(name)
        snap = self._new_snapshot(vol.latest, name)
        vol.latest = snap.id
        return snap.id

    def delete_snapshot(self, name, sid):
        vol = self._vol(name)
        snap = self.snapshots.get(sid)
        if snap is None or snap.volume != name:
            raise NotFoundError(f"snapshot {sid}")
        if vol.latest == sid:
            raise ConflictError("top-level snapshot")
        children = self._children(sid)
        if len(children) != 1:
            raise ConflictError("snapshot in use")
        child = children[0]
        merged = dict(snap.blocks)
        merged.update(child.blocks)
        child.blocks = merged
        child.parent_id = snap.parent_id
        del self.snapshots[sid]

    def clone_snapshot(self, source_volume, sid, new_name):
        src = self._vol(source_volume)
        snap = self.snapshots.get(sid)
        if snap is None or snap.volume != source_volume:
            raise NotFoundError(f"snapshot {sid}")
        if new_name in self.volumes:
            raise ConflictError("duplicate")
        if len(self.volumes) >= self.max_volumes:
            raise ConflictError("volume slots exhausted")
        freeze = src.latest == sid
        if len(self.snapshots) + (2 if freeze else 1) > self.max_snapshots:
            raise ConflictError("snapshot slots exhausted")
        if freeze:
            self.create_snapshot(source_volume)
        root = self._new_snapshot(sid, new_name)
        self.volumes[new_name] = ModelVolume(new_name, src.size, root.id)

    def read(self, name, offset, length):
        vol = self._vol(name)
        self._check_io(vol, offset, length)
        bs = self.block_size
        chain = [self.snapshots[s] for s in self.chain(name)]
        out = []
        for block in range(offset // bs, (offset + length) // bs):
            data = None
            for snap in chain:
                data = snap.blocks.get(block)
                if data is not None:
                    break
            out.append(data if data is not None else bytes(bs))
        return b"".join(out)

    def write(self, name, offset, data):
        vol = self._vol(name)
        self._check_io(vol, offset, len(data))
        bs = self.block_size
        blocks = self.snapshots[vol.latest].blocks
        for i, block in enumerate(range(offset // bs, (offset + len(data)) // bs)):
            blocks[block] = bytes(data[i * bs:(i + 1) * bs])

    def unmap(self, name, offset, length):
        vol = self._vol(name)
        self._check_io(vol, offset, length)
        bs = self.block_size
        blocks = self.snapshots[vol.latest].blocks
        for block in range(offset // bs, (offset + length) // bs):
            blocks.pop(block, None)
