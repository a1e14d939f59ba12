"""One process, all services: DHCP + TFTP + image streaming + session tracking.

Startup is all-or-nothing: every listener binds before any serving thread
starts, and a single bind failure tears the rest down. The stack owns the
shared pieces: the asset store (readers get snapshots), the client registry
(leased IP to MAC and pinned manifest version), the boot tracker, and the
optional NDJSON event log.
"""

from __future__ import annotations

import logging
import threading
from pathlib import Path

from . import asset_store
from .asset_store import AssetStore, RemoteUnreachable, StoreError
from .boot_session import BootEvent, BootTracker, ClientRegistry
from .config import ServerConfig
from .dhcp_server import DhcpServer, Lease
from .image_service import ImageService
from .netproto.dhcp import mac_str
from .tftp_server import TftpPolicy, TftpServer

logger = logging.getLogger("colaboot.stack")


class PortInUse(Exception):
    def __init__(self, port: int, what: str):
        super().__init__(f"cannot bind {what} listener on port {port}")
        self.port = port


class ServiceStack:
    def __init__(self, cfg: ServerConfig, tracker: BootTracker | None = None):
        self.cfg = cfg
        self.store = AssetStore(cfg.store_root)
        self.registry = ClientRegistry()
        self.tracker = tracker or BootTracker()
        self._event_log = None
        self._event_lock = threading.Lock()
        self._sync_stop = threading.Event()
        self._sync_thread: threading.Thread | None = None

        self.dhcp = DhcpServer(cfg, events=self._on_event, on_ack=self._on_ack)
        self.tftp = TftpServer(
            snapshot_for=self._snapshot_for,
            bind_address=cfg.bind_address,
            port=cfg.tftp_port,
            policy=TftpPolicy(blksize_max=cfg.tftp_blksize_max,
                              timeout=cfg.tftp_timeout, retries=cfg.tftp_retries),
            events=self._on_event,
            client_id_for=self.registry.client_id,
        )
        self.image = ImageService(
            self.store,
            bind_address=cfg.bind_address,
            port=cfg.image_port,
            version_for=self.registry.version_for,
            client_id_for=self.registry.client_id,
            events=self._on_event,
        )

    # -- shared-state plumbing -------------------------------------------------

    def _snapshot_for(self, client_ip: str):
        version = self.registry.version_for(client_ip)
        return self.store.open_snapshot(version)

    def _on_ack(self, lease: Lease) -> None:
        self.registry.pin(lease.ip, mac_str(lease.mac), self.store.active_version())

    def _on_event(self, event: BootEvent) -> None:
        self.tracker.record_event(event)
        if self._event_log is not None:
            with self._event_lock:
                self._event_log.write(event.to_json() + "\n")
                self._event_log.flush()

    # -- lifecycle ---------------------------------------------------------------

    def bind_all(self) -> None:
        """Bind every listener; on any failure nothing stays bound."""
        bound = []
        plan = [
            ("dhcp", self.cfg.dhcp_port, self.dhcp),
            ("tftp", self.cfg.tftp_port, self.tftp),
            ("image", self.cfg.image_port, self.image),
        ]
        for what, port, svc in plan:
            try:
                svc.bind()
            except OSError:
                for other in bound:
                    other.stop()
                raise PortInUse(port, what) from None
            bound.append(svc)

    def start(self) -> None:
        if self.store.active_version() is None and self.cfg.sync_source:
            logger.info("store empty, performing initial sync from %s", self.cfg.sync_source)
            asset_store.sync_once(self.cfg.sync_source, self.store)
        if self.store.active_version() is None:
            raise StoreError("store has no active version and no sync_source to fill it")

        self.bind_all()
        if self.cfg.event_log:
            Path(self.cfg.event_log).parent.mkdir(parents=True, exist_ok=True)
            self._event_log = open(self.cfg.event_log, "a", encoding="utf-8")
        self.dhcp.start()
        self.tftp.start()
        self.image.start()
        if self.cfg.sync_source:
            self._sync_thread = threading.Thread(target=self._sync_loop, name="sync",
                                                 daemon=True)
            self._sync_thread.start()

    def stop(self) -> None:
        self._sync_stop.set()
        for svc in (self.dhcp, self.tftp, self.image):
            try:
                svc.stop()
            except Exception:
                logger.exception("error stopping %s", svc)
        if self._sync_thread is not None:
            self._sync_thread.join(timeout=5)
            self._sync_thread = None
        if self._event_log is not None:
            with self._event_lock:
                self._event_log.flush()
                self._event_log.close()
                self._event_log = None

    def _sync_loop(self) -> None:
        while not self._sync_stop.wait(self.cfg.sync_interval):
            try:
                report = asset_store.sync_once(self.cfg.sync_source, self.store)
                if report.new_version is not None:
                    logger.info("periodic sync activated version %s", report.new_version)
            except RemoteUnreachable as exc:
                logger.warning("periodic sync: remote unreachable: %s", exc)
            except StoreError as exc:
                logger.error("periodic sync failed: %s", exc)

    def endpoints(self) -> dict:
        host = self.cfg.bind_address if self.cfg.bind_address != "0.0.0.0" else "127.0.0.1"
        return {
            "dhcp": (host, self.dhcp.port),
            "tftp": (host, self.tftp.port),
            "image_url": f"http://{host}:{self.image.port}",
        }
