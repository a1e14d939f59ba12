"""PXE-aware DHCP service: leases plus next-server/bootfile boot information.

Handlers are pure functions over (message, config, lease table, clock); the
UDP runtime serializes all table mutation through its single receive loop.
The reply to an OFFER and its later ACK is built from the same stored offer
record, so both carry byte-identical boot fields.
"""

from __future__ import annotations

import ipaddress
import logging
import socket
import struct
import threading
import time
from dataclasses import dataclass

from . import netproto
from .boot_session import (
    EV_DHCP_ACK,
    EV_DHCP_DISCOVER,
    EV_DHCP_OFFER,
    EV_DHCP_REQUEST,
    BootEvent,
)
from .config import ServerConfig
from .netproto import ArchFamily, ClientArch, DhcpMessage, dhcp as proto

logger = logging.getLogger("colaboot.dhcp")


class PoolExhausted(Exception):
    """No free address in the configured pool."""


class NotPxe(Exception):
    """Dropped because pxe_only is set and the client is not a PXE ROM."""


@dataclass
class Lease:
    mac: bytes
    ip: str
    subnet_mask: str
    router: str
    dns: list[str]
    expiry: float
    bootfile: str = ""


@dataclass
class Offer:
    mac: bytes
    ip: str
    bootfile: str
    expiry: float


@dataclass(frozen=True)
class BootConfig:
    """next-server plus the architecture to bootfile dispatch table."""

    next_server: str
    bootfile_by_arch: dict[ArchFamily, str]
    image_url_template: str = ""

    def __post_init__(self):
        for required in (ArchFamily.LEGACY_BIOS, ArchFamily.UEFI_X64):
            if not self.bootfile_by_arch.get(required):
                raise ValueError(f"bootfile_by_arch needs an entry for {required.value}")

    def bootfile_for(self, arch: ClientArch) -> str:
        name = self.bootfile_by_arch.get(arch.family)
        if not name:
            name = self.bootfile_by_arch[ArchFamily.LEGACY_BIOS]
        return name

    @classmethod
    def from_server_config(cls, cfg: ServerConfig) -> "BootConfig":
        table = {
            ArchFamily.LEGACY_BIOS: cfg.bootfile_bios,
            ArchFamily.UEFI_X64: cfg.bootfile_uefi,
        }
        if cfg.bootfile_uefi32:
            table[ArchFamily.UEFI_IA32] = cfg.bootfile_uefi32
        return cls(next_server=cfg.next_server, bootfile_by_arch=table,
                   image_url_template=cfg.image_url_template)


class LeaseTable:
    """Address pool with active leases and short-lived unconfirmed offers."""

    def __init__(self, pool_start: str, pool_end: str):
        first = int(ipaddress.IPv4Address(pool_start))
        last = int(ipaddress.IPv4Address(pool_end))
        if last < first:
            raise ValueError(f"pool end {pool_end} precedes start {pool_start}")
        self.pool = [str(ipaddress.IPv4Address(n)) for n in range(first, last + 1)]
        self.active: dict[bytes, Lease] = {}
        self.offers: dict[bytes, Offer] = {}

    def pool_size(self) -> int:
        return len(self.pool)

    def ips_in_use(self, now: float) -> set[str]:
        used = {l.ip for l in self.active.values()}
        used |= {o.ip for o in self.offers.values() if o.expiry >= now}
        return used

    def free_count(self, now: float) -> int:
        return len(self.pool) - len(self.ips_in_use(now))

    def allocate(self, mac: bytes, now: float) -> str:
        """Pick an address for this client, preferring whatever it already holds."""
        lease = self.active.get(mac)
        if lease is not None:
            return lease.ip
        offer = self.offers.get(mac)
        if offer is not None and offer.expiry >= now:
            return offer.ip
        used = self.ips_in_use(now)
        for ip in self.pool:
            if ip not in used:
                return ip
        raise PoolExhausted(f"all {len(self.pool)} pool addresses are in use")


def expire_leases(table: LeaseTable, now: float) -> int:
    """Drop leases strictly past expiry; returns how many were reclaimed."""
    dead = [mac for mac, lease in table.active.items() if lease.expiry < now]
    for mac in dead:
        del table.active[mac]
    stale_offers = [mac for mac, offer in table.offers.items() if offer.expiry < now]
    for mac in stale_offers:
        del table.offers[mac]
    return len(dead)


def _boot_reply(kind: int, msg: DhcpMessage, cfg: ServerConfig, ip: str,
                bootfile: str) -> DhcpMessage:
    """OFFER and ACK share this builder so their boot fields cannot drift."""
    options = [
        (proto.OPT_MSG_TYPE, bytes([kind])),
        (proto.OPT_SERVER_ID, proto.pack_ip(cfg.next_server)),
        (proto.OPT_LEASE_TIME, struct.pack("!I", cfg.lease_seconds)),
        (proto.OPT_SUBNET_MASK, proto.pack_ip(cfg.subnet_mask)),
        (proto.OPT_ROUTER, proto.pack_ip(cfg.router)),
    ]
    if cfg.dns:
        options.append((proto.OPT_DNS, b"".join(proto.pack_ip(d) for d in cfg.dns)))
    options.append((proto.OPT_TFTP_SERVER, cfg.next_server.encode("ascii")))
    options.append((proto.OPT_BOOTFILE, bootfile.encode("ascii")))
    return DhcpMessage(
        op=proto.BOOTREPLY, xid=msg.xid, client_mac=msg.client_mac,
        yiaddr=ip, siaddr=cfg.next_server, giaddr=msg.giaddr,
        file=bootfile, options=options, flags=msg.flags,
    )


def _nak(msg: DhcpMessage, cfg: ServerConfig) -> DhcpMessage:
    return DhcpMessage(
        op=proto.BOOTREPLY, xid=msg.xid, client_mac=msg.client_mac,
        flags=msg.flags, giaddr=msg.giaddr,
        options=[
            (proto.OPT_MSG_TYPE, bytes([proto.NAK])),
            (proto.OPT_SERVER_ID, proto.pack_ip(cfg.next_server)),
        ],
    )


def handle_discover(msg: DhcpMessage, cfg: ServerConfig, table: LeaseTable,
                    now: float, boot: BootConfig | None = None) -> DhcpMessage:
    """DISCOVER -> OFFER with the lease and boot information for the client arch."""
    if msg.msg_type != proto.DISCOVER:
        raise ValueError(f"expected DISCOVER, got message type {msg.msg_type}")
    if cfg.pxe_only and not netproto.is_pxe_client(msg):
        raise NotPxe(proto.mac_str(msg.client_mac))
    if boot is None:
        boot = BootConfig.from_server_config(cfg)

    arch = ClientArch.from_message(msg)
    bootfile = boot.bootfile_for(arch)
    ip = table.allocate(msg.client_mac, now)
    table.offers[msg.client_mac] = Offer(
        mac=msg.client_mac, ip=ip, bootfile=bootfile,
        expiry=now + cfg.offer_ttl_seconds,
    )
    return _boot_reply(proto.OFFER, msg, cfg, ip, bootfile)


def requested_ip(msg: DhcpMessage) -> str | None:
    raw = msg.option(proto.OPT_REQUESTED_IP)
    if raw is not None and len(raw) == 4:
        return proto.unpack_ip(raw)
    if msg.ciaddr != "0.0.0.0":
        return msg.ciaddr
    return None


def handle_request(msg: DhcpMessage, cfg: ServerConfig, table: LeaseTable,
                   now: float) -> tuple[DhcpMessage, Lease | None]:
    """REQUEST -> (ACK, activated lease) or (NAK, None).

    A REQUEST for anything but the address offered (or already leased) to
    that MAC is refused, which also covers clients this server never saw.
    Retransmitted REQUESTs are idempotent: same ACK bytes, one lease.
    """
    if msg.msg_type != proto.REQUEST:
        raise ValueError(f"expected REQUEST, got message type {msg.msg_type}")
    mac = msg.client_mac
    wanted = requested_ip(msg)
    if wanted is None:
        return _nak(msg, cfg), None

    offer = table.offers.get(mac)
    if offer is not None and offer.expiry >= now and offer.ip == wanted:
        lease = Lease(
            mac=mac, ip=offer.ip, subnet_mask=cfg.subnet_mask, router=cfg.router,
            dns=list(cfg.dns), expiry=now + cfg.lease_seconds, bootfile=offer.bootfile,
        )
        table.active[mac] = lease
        return _boot_reply(proto.ACK, msg, cfg, lease.ip, lease.bootfile), lease

    lease = table.active.get(mac)
    if lease is not None and lease.ip == wanted:
        lease.expiry = now + cfg.lease_seconds
        return _boot_reply(proto.ACK, msg, cfg, lease.ip, lease.bootfile), lease

    return _nak(msg, cfg), None


def handle_release(msg: DhcpMessage, table: LeaseTable) -> bool:
    """RELEASE is handled as immediate expiry only."""
    return table.active.pop(msg.client_mac, None) is not None


def reply_destination(msg: DhcpMessage, source: tuple[str, int]) -> tuple[str, int]:
    """Where a BOOTREPLY for this request should be sent.

    Relayed requests go back through the relay; clients with an address get
    unicast; the broadcast flag is honored. A client that sent from a
    routable source address (how every directly-connected test client and
    many PXE stacks behave) is answered at that observed endpoint.
    """
    if msg.giaddr != "0.0.0.0":
        return (msg.giaddr, 67)
    if msg.ciaddr != "0.0.0.0":
        return (msg.ciaddr, 68)
    if msg.flags & proto.FLAG_BROADCAST or source[0] == "0.0.0.0":
        return ("255.255.255.255", 68)
    return source


class DhcpServer:
    """UDP runtime around the pure handlers; one thread owns the lease table."""

    def __init__(self, cfg: ServerConfig, clock=None, events=None, on_ack=None):
        self.cfg = cfg
        self.table = LeaseTable(cfg.pool_start, cfg.pool_end)
        self.boot = BootConfig.from_server_config(cfg)
        self.clock = clock
        self.events = events
        self.on_ack = on_ack
        self.sock: socket.socket | None = None
        self._thread: threading.Thread | None = None
        self._running = False

    def _now(self) -> float:
        return self.clock() if self.clock is not None else time.monotonic()

    @property
    def port(self) -> int:
        assert self.sock is not None
        return self.sock.getsockname()[1]

    def bind(self) -> None:
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_BROADCAST, 1)
        except OSError:
            pass
        sock.bind((self.cfg.bind_address, self.cfg.dhcp_port))
        self.sock = sock

    def start(self) -> None:
        if self.sock is None:
            self.bind()
        self._running = True
        self._thread = threading.Thread(target=self._serve, name="dhcp", daemon=True)
        self._thread.start()
        logger.info("DHCP listening on %s:%d", self.cfg.bind_address, self.port)

    def stop(self) -> None:
        self._running = False
        if self.sock is not None:
            self.sock.close()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None

    def _emit(self, client_id: str, kind: str, version: int | None = None) -> None:
        if self.events is not None:
            self.events(BootEvent(client_id=client_id, kind=kind,
                                  timestamp=self._now(), manifest_version=version))

    def _serve(self) -> None:
        assert self.sock is not None
        while self._running:
            try:
                raw, source = self.sock.recvfrom(2048)
            except OSError:
                break
            try:
                answer = self.handle_datagram(raw, source)
            except Exception:
                logger.exception("error handling datagram from %s", source)
                continue
            if answer is not None:
                reply, dest = answer
                try:
                    self.sock.sendto(netproto.encode_dhcp(reply), dest)
                except OSError as exc:
                    logger.warning("cannot reply to %s: %s", dest, exc)

    def handle_datagram(
        self, raw: bytes, source: tuple[str, int]
    ) -> tuple[DhcpMessage, tuple[str, int]] | None:
        """Decode, dispatch, mutate the table; returns (reply, destination) or None."""
        try:
            msg = netproto.decode_dhcp(raw)
        except netproto.CodecError as exc:
            logger.debug("undecodable datagram from %s: %s", source, exc)
            return None
        if msg.op != proto.BOOTREQUEST:
            return None
        now = self._now()
        expire_leases(self.table, now)
        mac = proto.mac_str(msg.client_mac)
        dest = reply_destination(msg, source)

        if msg.msg_type == proto.DISCOVER:
            self._emit(mac, EV_DHCP_DISCOVER)
            try:
                offer = handle_discover(msg, self.cfg, self.table, now, self.boot)
            except NotPxe:
                logger.info("ignoring non-PXE DISCOVER from %s (pxe_only)", mac)
                return None
            except PoolExhausted:
                logger.warning("pool exhausted, no offer for %s", mac)
                return None
            self._emit(mac, EV_DHCP_OFFER)
            return offer, dest

        if msg.msg_type == proto.REQUEST:
            self._emit(mac, EV_DHCP_REQUEST)
            reply, lease = handle_request(msg, self.cfg, self.table, now)
            if lease is not None:
                self._emit(mac, EV_DHCP_ACK)
                if self.on_ack is not None:
                    self.on_ack(lease)
            else:
                logger.info("NAK for %s requesting %s", mac, requested_ip(msg))
            return reply, dest

        if msg.msg_type == proto.RELEASE:
            if handle_release(msg, self.table):
                logger.info("released lease for %s", mac)
            return None

        return None
