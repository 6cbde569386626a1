"""Close/reopen reconstruction: the rebuilt in-memory index and all reads
must match the pre-close state exactly."""

import os

from tinysan import open_device
from conftest import make_device
from opgen import LockstepDriver
from refmodel import ReferenceModel

MIB = 1 << 20
BS = 4096


def test_write_close_reopen_read(tmp_path):
    path = make_device(tmp_path / "dev.img", size=64 * MIB)
    payload = os.urandom(3 * MIB)
    with open_device(path) as dev:
        dev.create_volume("v", 16 * MIB)
        dev.write("v", 2 * MIB, payload)
    with open_device(path) as dev:
        assert dev.read("v", 2 * MIB, len(payload)) == payload
        assert dev.read("v", 0, MIB) == bytes(MIB)


def test_snapshot_chain_survives_reopen(tmp_path):
    path = make_device(tmp_path / "dev.img", size=64 * MIB)
    with open_device(path) as dev:
        dev.create_volume("v", 8 * MIB)
        dev.write("v", 0, b"A" * BS)
        dev.create_snapshot("v")
        dev.write("v", 0, b"B" * BS)
        chain = dev.chain("v")
        state = dev.index_state()
    with open_device(path) as dev:
        assert dev.chain("v") == chain
        assert dev.index_state() == state
        assert dev.read("v", 0, BS) == b"B" * BS
        dev.unmap("v", 0, BS)
        assert dev.read("v", 0, BS) == b"A" * BS


def test_randomized_sessions_keep_images(tmp_path):
    path = make_device(tmp_path / "dev.img", size=512 * MIB, blocks_per_extent=16)
    model = ReferenceModel(block_size=BS)
    for session in range(8):
        device = open_device(path)
        driver = LockstepDriver(device, model, volume_size=8 * MIB, seed=1000 + session)
        state_before = None
        try:
            driver.run(250)
            driver.compare_all_volumes()
            state_before = device.index_state()
        finally:
            device.close()
        device = open_device(path)
        try:
            assert device.index_state() == state_before
            driver.device = device
            driver.compare_all_volumes()
        finally:
            device.close()
