"""HTTP streaming of read-only boot assets, single-range requests included.

``serve_image`` is the protocol-free core: request in, (status, headers,
chunk iterator) out. The handler around it speaks HTTP/1.1, resolves which
manifest version a client is pinned to, and reports image-fetch milestones.
The service never writes to the store; every body byte comes from one
snapshot.
"""

from __future__ import annotations

import logging
import re
import threading
import time
import urllib.parse
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Iterator

from .asset_store import ROLE_IMAGE, AssetStore, Snapshot, UnknownPath
from .boot_session import EV_IMAGE_COMPLETE, EV_IMAGE_FIRST_BYTE, BootEvent

logger = logging.getLogger("colaboot.image")

CHUNK_SIZE = 64 * 1024
ASSET_PREFIX = "/assets/"

DIGEST_HEADER = "X-Asset-Digest"
VERSION_HEADER = "X-Manifest-Version"
SESSION_HEADER = "X-Session-Hint"

_RANGE_RE = re.compile(r"^bytes=(\d+)-(\d*)$")


class Unsatisfiable(Exception):
    """Requested range starts at or past the end of the asset."""


def resolve_range(rng: tuple[int, int], asset_size: int) -> tuple[int, int]:
    """Clamp an inclusive byte range against the asset; returns (offset, length)."""
    first, last = rng
    if first < 0 or last < first:
        raise Unsatisfiable(f"bad range {rng}")
    if first >= asset_size:
        raise Unsatisfiable(f"range starts at {first}, asset is {asset_size} bytes")
    last = min(last, asset_size - 1)
    return first, last - first + 1


@dataclass(frozen=True)
class ImageRequest:
    path: str
    range: tuple[int, int] | None = None
    session_hint: str | None = None


@dataclass
class ImageResponse:
    status: int
    headers: dict[str, str]
    body: Iterator[bytes]
    length: int = 0


def _stream(snapshot: Snapshot, path: str, offset: int, length: int) -> Iterator[bytes]:
    with snapshot.open(path) as f:
        f.seek(offset)
        remaining = length
        while remaining > 0:
            chunk = f.read(min(CHUNK_SIZE, remaining))
            if not chunk:
                break
            remaining -= len(chunk)
            yield chunk


def serve_image(req: ImageRequest, source: Snapshot | AssetStore) -> ImageResponse:
    """Resolve one request against a snapshot (or a store's active snapshot)."""
    snapshot = source.open_snapshot() if isinstance(source, AssetStore) else source
    try:
        entry = snapshot.entry(req.path)
    except UnknownPath:
        return ImageResponse(status=404, headers={}, body=iter(()))

    headers = {
        "Accept-Ranges": "bytes",
        "Content-Type": "application/octet-stream",
        DIGEST_HEADER: entry.digest,
        VERSION_HEADER: str(snapshot.version),
    }
    if req.range is None:
        headers["Content-Length"] = str(entry.size)
        return ImageResponse(status=200, headers=headers,
                             body=_stream(snapshot, req.path, 0, entry.size),
                             length=entry.size)
    try:
        offset, length = resolve_range(req.range, entry.size)
    except Unsatisfiable:
        return ImageResponse(status=416,
                             headers={"Content-Range": f"bytes */{entry.size}"},
                             body=iter(()))
    headers["Content-Length"] = str(length)
    headers["Content-Range"] = f"bytes {offset}-{offset + length - 1}/{entry.size}"
    return ImageResponse(status=206, headers=headers,
                         body=_stream(snapshot, req.path, offset, length),
                         length=length)


def parse_range_header(value: str) -> tuple[int, int] | None:
    """Single 'bytes=a-b' or open-ended 'bytes=a-'; anything else is rejected."""
    m = _RANGE_RE.match(value.strip())
    if not m:
        raise Unsatisfiable(f"unsupported Range header {value!r}")
    first = int(m.group(1))
    last = int(m.group(2)) if m.group(2) else (1 << 63) - 1
    if last < first:
        raise Unsatisfiable(f"inverted range {value!r}")
    return first, last


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "colaboot-image/0.1"

    def log_message(self, fmt, *args):  # route through our logger, not stderr
        logger.debug("%s " + fmt, self.client_address[0], *args)

    def _refuse(self, status: int, extra: dict[str, str] | None = None) -> None:
        self.send_response(status)
        for k, v in (extra or {}).items():
            self.send_header(k, v)
        self.send_header("Content-Length", "0")
        self.end_headers()

    def _not_read(self):
        self._refuse(405, {"Allow": "GET, HEAD"})

    do_POST = do_PUT = do_DELETE = do_PATCH = _not_read

    def _request(self) -> ImageRequest | None:
        parsed = urllib.parse.urlsplit(self.path)
        if not parsed.path.startswith(ASSET_PREFIX):
            self._refuse(404)
            return None
        vpath = urllib.parse.unquote(parsed.path[len(ASSET_PREFIX):])
        query = urllib.parse.parse_qs(parsed.query)
        hint = self.headers.get(SESSION_HEADER) or (query.get("session") or [None])[0]
        rng = None
        if "Range" in self.headers:
            try:
                rng = parse_range_header(self.headers["Range"])
            except Unsatisfiable:
                self._refuse(416)
                return None
        return ImageRequest(path=vpath, range=rng, session_hint=hint)

    def _respond(self, send_body: bool) -> None:
        req = self._request()
        if req is None:
            return
        service: "ImageService" = self.server.service  # type: ignore[attr-defined]
        snapshot = service.snapshot_for(req.session_hint or self.client_address[0])
        resp = serve_image(req, snapshot)
        self.send_response(resp.status)
        for k, v in resp.headers.items():
            self.send_header(k, v)
        if "Content-Length" not in resp.headers:
            self.send_header("Content-Length", "0")
        self.end_headers()
        if not send_body:
            return
        entry = snapshot.manifest.find(req.path)
        is_image = entry is not None and entry.role == ROLE_IMAGE and resp.status in (200, 206)
        sent = 0
        first = True
        try:
            for chunk in resp.body:
                if first and is_image:
                    service.note_image_start(self.client_address[0], req.session_hint,
                                             snapshot.version)
                    first = False
                self.wfile.write(chunk)
                sent += len(chunk)
        except (BrokenPipeError, ConnectionResetError):
            logger.debug("client %s went away mid-body", self.client_address)
            self.close_connection = True
            return
        if is_image and entry is not None:
            service.note_image_bytes(self.client_address[0], req.session_hint,
                                     sent, entry.size, snapshot.version)

    def do_GET(self):
        self._respond(send_body=True)

    def do_HEAD(self):
        self._respond(send_body=False)


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True


class ImageService:
    """Wraps the threaded HTTP server with snapshot pinning and boot events."""

    def __init__(
        self,
        store: AssetStore,
        bind_address: str = "0.0.0.0",
        port: int = 8080,
        version_for: Callable[[str], int | None] | None = None,
        client_id_for: Callable[[str], str] | None = None,
        events=None,
    ):
        self.store = store
        self.bind_address = bind_address
        self.requested_port = port
        self.version_for = version_for or (lambda key: None)
        self.client_id_for = client_id_for or (lambda ip: f"ip:{ip}")
        self.events = events
        self._snapshots: dict[int, Snapshot] = {}
        self._image_progress: dict[str, int] = {}
        self._lock = threading.Lock()
        self.httpd: _Server | None = None
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        assert self.httpd is not None
        return self.httpd.server_address[1]

    def bind(self) -> None:
        self.httpd = _Server((self.bind_address, self.requested_port), _Handler)
        self.httpd.service = self  # type: ignore[attr-defined]

    def start(self) -> None:
        if self.httpd is None:
            self.bind()
        self._thread = threading.Thread(target=self.httpd.serve_forever,
                                        name="image-http", daemon=True)
        self._thread.start()
        logger.info("image service on %s:%d", self.bind_address, self.port)

    def stop(self) -> None:
        if self.httpd is not None:
            if self._thread is not None:  # shutdown() hangs unless serve_forever ran
                self.httpd.shutdown()
            self.httpd.server_close()
            self.httpd = None
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None

    def snapshot_for(self, key: str) -> Snapshot:
        """The snapshot a client is pinned to, else the active one; cached per version."""
        version = self.version_for(key)
        if version is None:
            version = self.store.active_version()
            if version is None:
                raise UnknownPath("store has no active version")
        with self._lock:
            snap = self._snapshots.get(version)
            if snap is None:
                snap = self.store.open_snapshot(version)
                self._snapshots[version] = snap
            return snap

    def _emit(self, ip: str, hint: str | None, kind: str, size: int | None,
              version: int) -> None:
        if self.events is None:
            return
        client = self.client_id_for(hint or ip)
        self.events(BootEvent(client_id=client, kind=kind, timestamp=time.monotonic(),
                              size=size, asset_role=ROLE_IMAGE, manifest_version=version))

    def note_image_start(self, ip: str, hint: str | None, version: int) -> None:
        key = hint or ip
        with self._lock:
            started = key in self._image_progress
            self._image_progress.setdefault(key, 0)
        if not started:
            self._emit(ip, hint, EV_IMAGE_FIRST_BYTE, None, version)

    def note_image_bytes(self, ip: str, hint: str | None, sent: int, total: int,
                         version: int) -> None:
        key = hint or ip
        with self._lock:
            self._image_progress[key] = self._image_progress.get(key, 0) + sent
            done = self._image_progress[key] >= total
            if done:
                self._image_progress.pop(key, None)
        if done:
            self._emit(ip, hint, EV_IMAGE_COMPLETE, total, version)
