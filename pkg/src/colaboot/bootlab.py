"""Self-contained loopback deployment with synthetic boot assets.

Builds a sync-source tree of seeded-PRNG assets, syncs it into a fresh
store, starts the full service stack on ephemeral loopback ports, and hands
out endpoints for simulated clients. The lease pool lives in 127.0.0.0/8 so
every simulated client can genuinely bind its leased address.
"""

from __future__ import annotations

import ipaddress
import random
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

from . import asset_store
from .asset_store import (
    ROLE_BOOTLOADER,
    ROLE_CONFIG,
    ROLE_IMAGE,
    ROLE_INITRD,
    ROLE_KERNEL,
    AssetManifest,
    AssetStore,
)
from .boot_session import BootTracker
from .client_sim import Endpoints
from .config import ServerConfig
from .stack import ServiceStack

BOOTLOADER_BIOS = "pxelinux.0"
BOOTLOADER_UEFI = "bootx64.efi"
BOOT_CONFIG_PATH = "pxelinux.cfg/default"
KERNEL_PATH = "vmlinuz"
INITRD_PATH = "initrd.img"
IMAGE_PATH = "os-image.sqfs"


@dataclass(frozen=True)
class AssetSizes:
    bootloader: int = 64 * 1024
    config: int = 1024
    kernel: int = 8 * 1024 * 1024
    initrd: int = 16 * 1024 * 1024
    image: int = 64 * 1024 * 1024


def synthetic_bytes(size: int, seed: int) -> bytes:
    return random.Random(seed).randbytes(size)


def render_boot_config(kernel: str, initrd: str, image_url: str,
                       pad_to: int = 0) -> bytes:
    """A loader menu naming the kernel, initrd, and the image URL on the cmdline."""
    text = (
        "DEFAULT diskless\n"
        "PROMPT 0\n"
        "TIMEOUT 0\n"
        "LABEL diskless\n"
        f"  KERNEL {kernel}\n"
        f"  INITRD {initrd}\n"
        f"  APPEND ro rd.live.ram=1 image_url={image_url}\n"
    )
    raw = text.encode("ascii")
    if pad_to > len(raw):
        raw += b"#" + b"." * (pad_to - len(raw) - 2) + b"\n"
    return raw


def build_source_tree(
    source_dir: Path,
    image_url: str,
    sizes: AssetSizes = AssetSizes(),
    version: int = 1,
    seed: int = 1,
) -> AssetManifest:
    """Write one manifest version of synthetic assets in sync-source layout."""
    files = [
        (BOOTLOADER_BIOS, synthetic_bytes(sizes.bootloader, seed * 100 + 1), ROLE_BOOTLOADER),
        (BOOTLOADER_UEFI, synthetic_bytes(sizes.bootloader, seed * 100 + 2), ROLE_BOOTLOADER),
        (BOOT_CONFIG_PATH,
         render_boot_config(KERNEL_PATH, INITRD_PATH, image_url, pad_to=sizes.config),
         ROLE_CONFIG),
        (KERNEL_PATH, synthetic_bytes(sizes.kernel, seed * 100 + 3), ROLE_KERNEL),
        (INITRD_PATH, synthetic_bytes(sizes.initrd, seed * 100 + 4), ROLE_INITRD),
        (IMAGE_PATH, synthetic_bytes(sizes.image, seed * 100 + 5), ROLE_IMAGE),
    ]
    return asset_store.publish_source(source_dir, files, version=version)


class BootLab:
    """Temp-dir deployment: synthetic source, synced store, running stack."""

    def __init__(
        self,
        sizes: AssetSizes = AssetSizes(),
        pool_size: int = 100,
        seed: int = 1,
        tftp_timeout: float = 0.2,
        tftp_retries: int = 10,
        tftp_blksize_max: int = 16384,  # loopback has no Ethernet MTU to respect
        workdir: str | Path | None = None,
    ):
        self.sizes = sizes
        self.seed = seed
        self._own_workdir = workdir is None
        self.workdir = Path(workdir) if workdir else Path(tempfile.mkdtemp(prefix="bootlab-"))
        self.source_dir = self.workdir / "source"
        self.store_dir = self.workdir / "store"
        pool_start = "127.0.0.100"
        pool_end = str(ipaddress.IPv4Address(int(ipaddress.IPv4Address(pool_start))
                                             + pool_size - 1))
        self.cfg = ServerConfig(
            pool_start=pool_start,
            pool_end=pool_end,
            bind_address="127.0.0.1",
            dhcp_port=0,
            tftp_port=0,
            image_port=0,
            subnet_mask="255.0.0.0",
            router="127.0.0.1",
            dns=["127.0.0.1"],
            next_server="127.0.0.1",
            tftp_timeout=tftp_timeout,
            tftp_retries=tftp_retries,
            tftp_blksize_max=tftp_blksize_max,
            store_root=str(self.store_dir),
            sync_source=str(self.source_dir),
            event_log=str(self.workdir / "events.ndjson"),
        )
        self.stack: ServiceStack | None = None
        self.manifest: AssetManifest | None = None

    @property
    def store(self) -> AssetStore:
        assert self.stack is not None
        return self.stack.store

    @property
    def tracker(self) -> BootTracker:
        assert self.stack is not None
        return self.stack.tracker

    def start(self) -> "BootLab":
        # the image port must exist before the boot config asset can name it
        self.stack = ServiceStack(self.cfg)
        try:
            self.stack.bind_all()
            image_url = f"http://127.0.0.1:{self.stack.image.port}/assets/{IMAGE_PATH}"
            self.manifest = build_source_tree(self.source_dir, image_url,
                                              sizes=self.sizes, version=1, seed=self.seed)
            asset_store.sync_once(str(self.source_dir), self.stack.store)
            self.stack.dhcp.start()
            self.stack.tftp.start()
            self.stack.image.start()
        except BaseException:
            self.stop()
            raise
        return self

    def publish_version(self, version: int, seed: int | None = None,
                        sizes: AssetSizes | None = None) -> AssetManifest:
        """Write a newer source version; callers run sync() to activate it."""
        assert self.stack is not None
        image_url = f"http://127.0.0.1:{self.stack.image.port}/assets/{IMAGE_PATH}"
        manifest = build_source_tree(self.source_dir, image_url,
                                     sizes=sizes or self.sizes, version=version,
                                     seed=self.seed if seed is None else seed)
        return manifest

    def sync(self):
        assert self.stack is not None
        return asset_store.sync_once(str(self.source_dir), self.stack.store)

    def endpoints(self) -> Endpoints:
        assert self.stack is not None and self.manifest is not None
        return Endpoints(
            dhcp=("127.0.0.1", self.stack.dhcp.port),
            tftp=("127.0.0.1", self.stack.tftp.port),
            image_url=f"http://127.0.0.1:{self.stack.image.port}",
            manifest=self.store.active_manifest(),
        )

    def stop(self) -> None:
        if self.stack is not None:
            self.stack.stop()
            self.stack = None
        if self._own_workdir:
            shutil.rmtree(self.workdir, ignore_errors=True)

    def __enter__(self) -> "BootLab":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
