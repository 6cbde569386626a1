import os
import random

import pytest

from tinysan import UsageError, open_device
from tinysan.stores import ChainedFileStore, DbsStore, NullStore
from conftest import make_device
from refmodel import ReferenceModel

MIB = 1 << 20
BS = 4096


@pytest.fixture
def chained(tmp_path):
    store = ChainedFileStore(str(tmp_path / "chain"), volume_size=8 * MIB, create=True)
    yield store
    store.close()


def test_chained_write_read_roundtrip(chained):
    payload = os.urandom(3 * BS)
    chained.write(4 * BS, payload)
    assert chained.read(4 * BS, len(payload)) == payload
    assert chained.read(0, BS) == bytes(BS)


def test_chained_versioning_bumps_revision(chained):
    rev0 = chained.revision
    chained.write(0, bytes(BS))
    assert chained.revision == rev0 + 1
    chained.write(0, bytes(BS))
    assert chained.revision == rev0 + 2


def test_chained_versioning_off_same_data_fewer_meta_writes(tmp_path):
    stores = {}
    for mode in (True, False):
        store = ChainedFileStore(str(tmp_path / f"c{mode}"), volume_size=4 * MIB,
                                 versioning=mode, create=True)
        rng = random.Random(3)
        meta0 = store.meta_writes
        for _ in range(20):
            block = rng.randrange(0, 1024)
            store.write(block * BS, bytes([rng.randrange(256)]) * BS)
        stores[mode] = (store, store.meta_writes - meta0)
    on, off = stores[True][0], stores[False][0]
    assert on.read(0, 4 * MIB) == off.read(0, 4 * MIB)
    assert stores[True][1] == 20
    assert stores[False][1] == 0
    on.close()
    off.close()


def test_chained_snapshot_chain_probes(chained):
    chained.write(0, b"\x01" * BS)
    for _ in range(5):
        chained.create_snapshot()
    assert chained.chain_length == 6
    before = chained.probe_count
    chained.read(100 * BS, BS)  # cold block: probes every file in the chain
    assert chained.probe_count - before == 6
    before = chained.probe_count
    chained.write(200 * BS, b"\x02" * BS)
    chained.read(200 * BS, BS)  # hot in head: single probe
    assert chained.probe_count - before == 1


def test_chained_unmap_falls_through(chained):
    chained.write(0, b"A" * BS)
    chained.create_snapshot()
    chained.write(0, b"B" * BS)
    chained.unmap(0, BS)
    assert chained.read(0, BS) == b"A" * BS


def test_chained_survives_reopen(tmp_path):
    directory = str(tmp_path / "chain")
    store = ChainedFileStore(directory, volume_size=4 * MIB, create=True)
    store.write(0, b"A" * BS)
    store.create_snapshot()
    store.write(BS, b"B" * BS)
    rev = store.revision
    store.close()
    store = ChainedFileStore(directory)
    assert store.volume_size == 4 * MIB
    assert store.revision == rev
    assert store.read(0, 2 * BS) == b"A" * BS + b"B" * BS
    store.close()


def test_chained_validation(chained):
    with pytest.raises(UsageError):
        chained.read(1, BS)
    with pytest.raises(UsageError):
        chained.write(8 * MIB, bytes(BS))


def test_null_store_semantics():
    store = NullStore(volume_size=4 * MIB)
    store.write(0, b"\xff" * BS)
    assert store.read(0, BS) == bytes(BS)
    store.unmap(0, BS)


def test_backend_substitutability(tmp_path):
    """The same randomized op sequence produces identical reads on the
    extent store and the chained-file baseline (and the model)."""
    path = make_device(tmp_path / "dev.img", size=128 * MIB)
    device = open_device(path)
    device.create_volume("v", 8 * MIB)
    dbs_store = DbsStore(device, "v")
    chained = ChainedFileStore(str(tmp_path / "chain"), volume_size=8 * MIB, create=True)
    model = ReferenceModel()
    model.create_volume("v", 8 * MIB)

    rng = random.Random(17)
    try:
        for _ in range(400):
            op = rng.random()
            block = rng.randrange(0, 2048 - 4)
            nblocks = rng.randint(1, 4)
            if op < 0.45:
                data = bytes([rng.randrange(256)]) * (nblocks * BS)
                dbs_store.write(block * BS, data)
                chained.write(block * BS, data)
                model.write("v", block * BS, data)
            elif op < 0.80:
                a = dbs_store.read(block * BS, nblocks * BS)
                b = chained.read(block * BS, nblocks * BS)
                want = model.read("v", block * BS, nblocks * BS)
                assert a == want and b == want, f"divergence at block {block}"
            elif op < 0.92:
                dbs_store.unmap(block * BS, nblocks * BS)
                chained.unmap(block * BS, nblocks * BS)
                model.unmap("v", block * BS, nblocks * BS)
            else:
                dbs_store.create_snapshot()
                chained.create_snapshot()
                model.create_snapshot("v")
        for offset in range(0, 8 * MIB, MIB):
            want = model.read("v", offset, MIB)
            assert dbs_store.read(offset, MIB) == want
            assert chained.read(offset, MIB) == want
    finally:
        chained.close()
        device.close()
