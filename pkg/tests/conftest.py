import random
from pathlib import Path

import pytest

from colaboot import asset_store
from colaboot.asset_store import (
    ROLE_BOOTLOADER,
    ROLE_CONFIG,
    ROLE_IMAGE,
    ROLE_INITRD,
    ROLE_KERNEL,
    AssetStore,
)

TESTDATA = Path(__file__).resolve().parent.parent / "testdata"
GOLDEN = Path(__file__).resolve().parent / "golden"


@pytest.fixture
def testdata() -> Path:
    return TESTDATA


def make_asset_files(seed: int = 7, kernel_size: int = 8192, initrd_size: int = 16384,
                     image_size: int = 65536, config_text: bytes | None = None):
    """Deterministic (path, content, role) tuples for a minimal manifest."""
    rng = random.Random(seed)
    if config_text is None:
        config_text = (
            b"DEFAULT diskless\nLABEL diskless\n  KERNEL vmlinuz\n  INITRD initrd.img\n"
            b"  APPEND ro image_url=http://127.0.0.1:1/assets/os-image.sqfs\n"
        )
    return [
        ("pxelinux.0", rng.randbytes(4096), ROLE_BOOTLOADER),
        ("pxelinux.cfg/default", config_text, ROLE_CONFIG),
        ("vmlinuz", rng.randbytes(kernel_size), ROLE_KERNEL),
        ("initrd.img", rng.randbytes(initrd_size), ROLE_INITRD),
        ("os-image.sqfs", rng.randbytes(image_size), ROLE_IMAGE),
    ]


@pytest.fixture
def source_tree(tmp_path):
    """A sync-source directory holding version 1 of the synthetic assets."""
    source = tmp_path / "source"
    manifest = asset_store.publish_source(source, make_asset_files(), version=1)
    return source, manifest


@pytest.fixture
def synced_store(tmp_path, source_tree):
    """A store with version 1 of the synthetic assets active."""
    source, manifest = source_tree
    store = AssetStore(tmp_path / "store")
    asset_store.sync_once(str(source), store)
    return store, source, manifest
