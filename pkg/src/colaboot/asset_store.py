"""Versioned, content-addressed, read-only boot-asset store with atomic sync.

On-disk layout::

    store/
      objects/<sha256-hex>     content-addressed blobs, shared across versions
      manifests/<version>.json one manifest per activated version
      ACTIVE                   the active version number, replaced atomically

A sync mirrors a remote source (directory tree or HTTP endpoint exposing
``manifest.json`` and ``objects/<digest>``), fetches only blobs missing
locally, verifies everything against the manifest, and flips ACTIVE with a
rename. Activated content is never mutated; snapshots opened before a sync
keep reading the old version's bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import BinaryIO, Iterable

logger = logging.getLogger("colaboot.store")

ROLE_BOOTLOADER = "bootloader"
ROLE_KERNEL = "kernel"
ROLE_INITRD = "initrd"
ROLE_IMAGE = "image"
ROLE_CONFIG = "config"

ROLES = {ROLE_BOOTLOADER, ROLE_KERNEL, ROLE_INITRD, ROLE_IMAGE, ROLE_CONFIG}
SINGLETON_ROLES = {ROLE_KERNEL, ROLE_INITRD, ROLE_IMAGE}

_HEX = set("0123456789abcdef")
_COPY_CHUNK = 1 << 16


class StoreError(Exception):
    """Base class for asset-store failures."""


class ManifestMalformed(StoreError):
    pass


class DigestFieldInvalid(ManifestMalformed):
    pass


class RemoteUnreachable(StoreError):
    pass


class VerificationFailed(StoreError):
    pass


class SyncInProgress(StoreError):
    pass


class UnknownPath(StoreError):
    pass


class OutOfBounds(StoreError):
    pass


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while chunk := f.read(_COPY_CHUNK):
            h.update(chunk)
    return h.hexdigest()


@dataclass(frozen=True)
class AssetEntry:
    """One cataloged boot asset."""

    path: str
    size: int
    digest: str
    role: str

    def to_dict(self) -> dict:
        # canonical field order for golden tests
        return {"path": self.path, "size": self.size, "digest": self.digest, "role": self.role}


@dataclass(frozen=True)
class AssetManifest:
    """Versioned catalog of boot assets; validated on construction via from_dict."""

    version: int
    created_at: str
    assets: tuple[AssetEntry, ...]

    def entry(self, path: str) -> AssetEntry:
        for e in self.assets:
            if e.path == path:
                return e
        raise UnknownPath(path)

    def find(self, path: str) -> AssetEntry | None:
        for e in self.assets:
            if e.path == path:
                return e
        return None

    def by_role(self, role: str) -> AssetEntry | None:
        for e in self.assets:
            if e.role == role:
                return e
        return None

    def digests(self) -> set[str]:
        return {e.digest for e in self.assets}

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "created_at": self.created_at,
            "assets": [e.to_dict() for e in self.assets],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "AssetManifest":
        if not isinstance(doc, dict):
            raise ManifestMalformed("manifest root must be an object")
        version = doc.get("version")
        if not isinstance(version, int) or isinstance(version, bool) or version < 1:
            raise ManifestMalformed(f"version must be a positive integer, got {version!r}")
        created_at = doc.get("created_at", "")
        if not isinstance(created_at, str):
            raise ManifestMalformed("created_at must be a string")
        raw_assets = doc.get("assets")
        if not isinstance(raw_assets, list) or not raw_assets:
            raise ManifestMalformed("assets must be a non-empty list")

        entries = []
        for item in raw_assets:
            if not isinstance(item, dict):
                raise ManifestMalformed(f"asset entry must be an object, got {item!r}")
            path = item.get("path")
            size = item.get("size")
            digest = item.get("digest")
            role = item.get("role")
            if not isinstance(path, str) or not path:
                raise ManifestMalformed(f"bad asset path {path!r}")
            if path.startswith("/") or ".." in path.split("/"):
                raise ManifestMalformed(f"asset path {path!r} must be relative and contained")
            if not isinstance(size, int) or isinstance(size, bool) or size < 0:
                raise ManifestMalformed(f"bad size for {path!r}: {size!r}")
            if not isinstance(digest, str) or len(digest) != 64 or not set(digest) <= _HEX:
                raise DigestFieldInvalid(f"digest for {path!r} is not 64 hex chars: {digest!r}")
            if role not in ROLES:
                raise ManifestMalformed(f"unknown role {role!r} for {path!r}")
            entries.append(AssetEntry(path=path, size=size, digest=digest, role=role))

        paths = [e.path for e in entries]
        if len(set(paths)) != len(paths):
            raise ManifestMalformed("duplicate asset paths")
        for role in SINGLETON_ROLES:
            n = sum(1 for e in entries if e.role == role)
            if n != 1:
                raise ManifestMalformed(f"manifest needs exactly one {role} asset, has {n}")
        return cls(version=version, created_at=created_at, assets=tuple(entries))

    @classmethod
    def from_json(cls, text: str | bytes) -> "AssetManifest":
        try:
            doc = json.loads(text)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ManifestMalformed(f"manifest is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)


@dataclass(frozen=True)
class VerificationItem:
    path: str
    status: str  # ok | missing | size_mismatch | digest_mismatch


@dataclass(frozen=True)
class VerificationReport:
    items: tuple[VerificationItem, ...]

    @property
    def ok(self) -> bool:
        return all(i.status == "ok" for i in self.items)

    def failures(self) -> list[VerificationItem]:
        return [i for i in self.items if i.status != "ok"]


@dataclass(frozen=True)
class SyncReport:
    fetched: int
    bytes: int
    new_version: int | None


class RemoteSource:
    """A remote manifest + object tree. Subclasses raise RemoteUnreachable on IO trouble."""

    def fetch_manifest(self) -> AssetManifest:
        raise NotImplementedError

    def open_object(self, digest: str) -> BinaryIO:
        raise NotImplementedError


class DirectorySource(RemoteSource):
    """Directory mirroring the remote layout: manifest.json + objects/<digest>."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def fetch_manifest(self) -> AssetManifest:
        try:
            text = (self.root / "manifest.json").read_bytes()
        except OSError as exc:
            raise RemoteUnreachable(f"cannot read {self.root / 'manifest.json'}: {exc}") from exc
        return AssetManifest.from_json(text)

    def open_object(self, digest: str) -> BinaryIO:
        try:
            return open(self.root / "objects" / digest, "rb")
        except OSError as exc:
            raise RemoteUnreachable(f"cannot read object {digest}: {exc}") from exc


class HttpSource(RemoteSource):
    """HTTP endpoint serving GET /manifest.json and GET /objects/<digest>."""

    def __init__(self, base_url: str, timeout: float = 10.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def _get(self, path: str) -> BinaryIO:
        url = f"{self.base_url}/{path}"
        try:
            return urllib.request.urlopen(url, timeout=self.timeout)
        except (urllib.error.URLError, OSError) as exc:
            raise RemoteUnreachable(f"GET {url}: {exc}") from exc

    def fetch_manifest(self) -> AssetManifest:
        with self._get("manifest.json") as resp:
            return AssetManifest.from_json(resp.read())

    def open_object(self, digest: str) -> BinaryIO:
        return self._get(f"objects/{digest}")


def remote_source(location: str | Path) -> RemoteSource:
    text = str(location)
    if text.startswith(("http://", "https://")):
        return HttpSource(text)
    return DirectorySource(text)


def load_manifest(source: str | Path | RemoteSource) -> AssetManifest:
    """Fetch and invariant-check a manifest from a directory, URL, or source object."""
    if not isinstance(source, RemoteSource):
        source = remote_source(source)
    return source.fetch_manifest()


def verify(manifest: AssetManifest, objects_dir: str | Path) -> VerificationReport:
    """Check every asset's presence, size, and digest against a blob directory."""
    objects = Path(objects_dir)
    items = []
    for entry in manifest.assets:
        blob = objects / entry.digest
        if not blob.is_file():
            items.append(VerificationItem(entry.path, "missing"))
            continue
        if blob.stat().st_size != entry.size:
            items.append(VerificationItem(entry.path, "size_mismatch"))
            continue
        if sha256_file(blob) != entry.digest:
            items.append(VerificationItem(entry.path, "digest_mismatch"))
            continue
        items.append(VerificationItem(entry.path, "ok"))
    return VerificationReport(items=tuple(items))


@dataclass(frozen=True)
class Snapshot:
    """Immutable view of one activated manifest version.

    Holds no open handles itself; reads resolve to content-addressed blobs
    that survive later activations, so a snapshot stays valid mid-sync.
    """

    manifest: AssetManifest
    root: Path

    @property
    def version(self) -> int:
        return self.manifest.version

    def entry(self, path: str) -> AssetEntry:
        return self.manifest.entry(path)

    def open(self, path: str) -> BinaryIO:
        entry = self.manifest.entry(path)
        return open(self.root / "objects" / entry.digest, "rb")

    def read(self, path: str, offset: int = 0, length: int | None = None) -> bytes:
        entry = self.manifest.entry(path)
        if length is None:
            length = entry.size - offset
        if offset < 0 or length < 0 or offset + length > entry.size:
            raise OutOfBounds(f"[{offset}, {offset + length}) outside {entry.size}-byte {path}")
        with self.open(path) as f:
            f.seek(offset)
            return f.read(length)


def open_snapshot(store: "AssetStore", version: int | None = None) -> Snapshot:
    return store.open_snapshot(version)


def read_asset(snap: Snapshot, path: str, offset: int = 0, length: int | None = None) -> bytes:
    return snap.read(path, offset, length)


class AssetStore:
    """Local store directory; many concurrent readers, one sync writer."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    @property
    def objects_dir(self) -> Path:
        return self.root / "objects"

    @property
    def manifests_dir(self) -> Path:
        return self.root / "manifests"

    @property
    def active_file(self) -> Path:
        return self.root / "ACTIVE"

    def init(self) -> None:
        self.objects_dir.mkdir(parents=True, exist_ok=True)
        self.manifests_dir.mkdir(parents=True, exist_ok=True)
        (self.root / "tmp").mkdir(parents=True, exist_ok=True)

    def active_version(self) -> int | None:
        try:
            return int(self.active_file.read_text().strip())
        except FileNotFoundError:
            return None
        except ValueError as exc:
            raise StoreError(f"corrupt ACTIVE marker: {exc}") from exc

    def versions(self) -> list[int]:
        if not self.manifests_dir.is_dir():
            return []
        out = []
        for p in self.manifests_dir.glob("*.json"):
            try:
                out.append(int(p.stem))
            except ValueError:
                continue
        return sorted(out)

    def manifest(self, version: int) -> AssetManifest:
        path = self.manifests_dir / f"{version}.json"
        try:
            return AssetManifest.from_json(path.read_bytes())
        except OSError as exc:
            raise StoreError(f"no manifest for version {version}: {exc}") from exc

    def active_manifest(self) -> AssetManifest | None:
        version = self.active_version()
        return None if version is None else self.manifest(version)

    def open_snapshot(self, version: int | None = None) -> Snapshot:
        if version is None:
            version = self.active_version()
            if version is None:
                raise StoreError("store has no active version")
        return Snapshot(manifest=self.manifest(version), root=self.root)

    def has_object(self, digest: str) -> bool:
        return (self.objects_dir / digest).is_file()

    def verify(self, manifest: AssetManifest | None = None) -> VerificationReport:
        if manifest is None:
            manifest = self.active_manifest()
            if manifest is None:
                raise StoreError("store has no active version")
        return verify(manifest, self.objects_dir)

    def gc(self) -> list[str]:
        """Remove blobs referenced by no manifest of any version. Never automatic."""
        referenced: set[str] = set()
        for version in self.versions():
            referenced |= self.manifest(version).digests()
        removed = []
        for blob in sorted(self.objects_dir.iterdir()):
            if blob.name not in referenced:
                blob.unlink()
                removed.append(blob.name)
        return removed

    def _write_atomic(self, path: Path, data: bytes) -> None:
        tmp = self.root / "tmp" / f".{path.name}.tmp"
        tmp.write_bytes(data)
        os.replace(tmp, path)


def _fetch_object(remote: RemoteSource, store: AssetStore, entry: AssetEntry) -> int:
    """Stream one blob into the store, checking its digest on the way."""
    tmp = store.root / "tmp" / f"fetch-{entry.digest}"
    h = hashlib.sha256()
    total = 0
    try:
        with remote.open_object(entry.digest) as src, open(tmp, "wb") as dst:
            while chunk := src.read(_COPY_CHUNK):
                h.update(chunk)
                total += len(chunk)
                dst.write(chunk)
    except RemoteUnreachable:
        tmp.unlink(missing_ok=True)
        raise
    if h.hexdigest() != entry.digest:
        tmp.unlink(missing_ok=True)
        raise VerificationFailed(
            f"object for {entry.path} arrived with digest {h.hexdigest()}, wanted {entry.digest}"
        )
    os.replace(tmp, store.objects_dir / entry.digest)
    return total


def sync_once(remote: RemoteSource | str | Path, store: AssetStore) -> SyncReport:
    """Mirror the remote manifest; activate it only after full verification.

    No-op when the remote version is not newer than the active one. On any
    failure the previously active version stays active.
    """
    if not isinstance(remote, RemoteSource):
        remote = remote_source(remote)
    store.init()

    lock = store.root / ".sync.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise SyncInProgress(f"another sync holds {lock}")
    os.close(fd)
    try:
        manifest = remote.fetch_manifest()
        active = store.active_version()
        if active is not None and manifest.version <= active:
            logger.info("sync: remote version %s <= active %s, nothing to do",
                        manifest.version, active)
            return SyncReport(fetched=0, bytes=0, new_version=None)

        fetched = 0
        total_bytes = 0
        for entry in manifest.assets:
            if store.has_object(entry.digest):
                continue
            total_bytes += _fetch_object(remote, store, entry)
            fetched += 1

        report = verify(manifest, store.objects_dir)
        if not report.ok:
            bad = ", ".join(f"{i.path}:{i.status}" for i in report.failures())
            raise VerificationFailed(f"post-fetch verification failed: {bad}")

        store._write_atomic(store.manifests_dir / f"{manifest.version}.json",
                            manifest.to_json().encode())
        store._write_atomic(store.active_file, f"{manifest.version}\n".encode())
        logger.info("sync: activated version %s (%d objects, %d bytes fetched)",
                    manifest.version, fetched, total_bytes)
        return SyncReport(fetched=fetched, bytes=total_bytes, new_version=manifest.version)
    finally:
        lock.unlink(missing_ok=True)


def publish_source(
    root: str | Path,
    files: Iterable[tuple[str, bytes, str]],
    version: int,
    created_at: str | None = None,
) -> AssetManifest:
    """Write a (path, content, role) set as a sync-source tree: manifest.json + objects/.

    The writer side of the remote layout; used by tests, the simulation
    harness, and operators preparing a source directory by hand.
    """
    root = Path(root)
    (root / "objects").mkdir(parents=True, exist_ok=True)
    if created_at is None:
        created_at = datetime.now(timezone.utc).isoformat(timespec="seconds")
    entries = []
    for path, content, role in files:
        digest = sha256_hex(content)
        (root / "objects" / digest).write_bytes(content)
        entries.append(AssetEntry(path=path, size=len(content), digest=digest, role=role))
    manifest = AssetManifest.from_dict({
        "version": version,
        "created_at": created_at,
        "assets": [e.to_dict() for e in entries],
    })
    (root / "manifest.json").write_text(manifest.to_json())
    return manifest
