"""Randomized lockstep equivalence against the in-memory reference model,
plus the store-wide invariants checked at quiescent points."""

import pytest

from tinysan import open_device, scan_device
from conftest import make_device
from opgen import LockstepDriver
from refmodel import ReferenceModel

MIB = 1 << 20
BS = 4096


def build(tmp_path, seed, size=512 * MIB, volume_size=16 * MIB):
    path = make_device(tmp_path / f"oracle{seed}.img", size=size, blocks_per_extent=16)
    device = open_device(path)
    model = ReferenceModel(
        block_size=BS,
        max_volumes=device.geometry.max_volumes,
        max_snapshots=device.geometry.max_snapshots,
    )
    return path, device, LockstepDriver(device, model, volume_size, seed=seed)


def check_invariants(device, scan_path=None):
    report = device.query()
    # conservation: owned + free = total
    assert report["owned_extents"] + report["free_extents"] == report["total_extents"]
    state = device.index_state()
    owned = len(state["bitmaps"])
    assert owned == report["owned_extents"]
    assert len(state["free"]) == report["free_extents"]
    # mark >= highest owned extent index + 1
    highest = max(state["bitmaps"], default=-1)
    assert state["allocation_mark"] >= highest + 1
    # owned extents have at least one block bit set
    for phys, bm in state["bitmaps"].items():
        assert any(bm), f"owned extent {phys} has empty bitmap"
    if scan_path:
        scan = scan_device(scan_path)
        assert set(scan["extents"]) == set(state["bitmaps"])
        for phys, (owner, lei, bm) in scan["extents"].items():
            assert state["extents"][owner][lei] == phys
            assert state["bitmaps"][phys] == bm


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_randomized_lockstep(tmp_path, seed):
    path, device, driver = build(tmp_path, seed)
    try:
        for _ in range(10):
            driver.run(400)
            check_invariants(device)
        driver.compare_all_volumes()
        assert driver.reads > 400
        assert driver.mismatches == 0
    finally:
        device.close()
    # quiescent on-disk state agrees with the in-memory index
    reopened = open_device(path)
    try:
        check_invariants(reopened, scan_path=None)
    finally:
        reopened.close()


def test_mark_monotone_under_churn(tmp_path):
    path, device, driver = build(tmp_path, seed=99)
    try:
        last = 0
        for _ in range(20):
            driver.run(150)
            mark = device.query()["allocation_mark"]
            assert mark >= last
            last = mark
    finally:
        device.close()


def test_reconstruction_matches_scan(tmp_path):
    path, device, driver = build(tmp_path, seed=5)
    try:
        driver.run(1500)
        state = device.index_state()
    finally:
        device.close()
    check = open_device(path)
    try:
        assert check.index_state() == state
        check_invariants(check, scan_path=path)
    finally:
        check.close()


def test_snapshot_immutability(tmp_path):
    """Once a snapshot has a child, its extents and bitmaps only change via
    an explicit merge."""
    path, device, driver = build(tmp_path, seed=11)
    try:
        frozen = {}

        def frozen_view():
            latests = {v.latest_snapshot_id for v in device._volumes.values()}
            view = {}
            for phys, owner, lei, bm in device.descriptors():
                if owner not in latests:
                    view[phys] = (owner, lei, bm)
            return view

        for _ in range(30):
            before_sids = set(device._snapshots)
            snapshot = frozen_view()
            driver.run(40)
            after_sids = set(device._snapshots)
            if before_sids <= after_sids:
                # no snapshot deleted in this window: no merge could have
                # legally altered frozen extents that still exist
                now = frozen_view()
                for phys, entry in snapshot.items():
                    if phys in now and now[phys][0] == entry[0]:
                        assert now[phys] == entry
    finally:
        device.close()
