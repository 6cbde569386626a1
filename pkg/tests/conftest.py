import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from tinysan import DeviceGeometry, init_device, open_device

MIB = 1 << 20


def make_device(path, size=256 * MIB, **geo):
    with open(path, "wb") as f:
        f.truncate(size)
    geometry = DeviceGeometry(**geo) if geo else DeviceGeometry()
    init_device(str(path), geometry)
    return str(path)


@pytest.fixture
def device_path(tmp_path):
    return make_device(tmp_path / "dev.img")


@pytest.fixture
def device(device_path):
    dev = open_device(device_path)
    yield dev
    dev.close()
