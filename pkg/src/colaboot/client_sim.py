"""A software PXE client: full DHCP/TFTP/HTTP boot against real servers.

The client only speaks public wire protocols, so a successful run is an
interoperability check, not a unit test with back doors. An impairment shim
around each UDP socket drops datagrams with a seeded RNG, making loss runs
reproducible. Fetched content is digest-verified against the manifest the
deployment advertises.
"""

from __future__ import annotations

import hashlib
import http.client
import logging
import random
import socket
import struct
import time
import urllib.parse
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

from .asset_store import (
    ROLE_BOOTLOADER,
    ROLE_CONFIG,
    ROLE_IMAGE,
    ROLE_INITRD,
    ROLE_KERNEL,
    AssetManifest,
)
from .boot_session import (
    EV_DHCP_ACK,
    EV_DHCP_DISCOVER,
    EV_DHCP_OFFER,
    EV_DHCP_REQUEST,
    EV_IMAGE_COMPLETE,
    EV_IMAGE_FIRST_BYTE,
    EV_TFTP_COMPLETE,
    EV_TFTP_RRQ,
    BootEvent,
)
from .image_service import DIGEST_HEADER, SESSION_HEADER, VERSION_HEADER
from .netproto import dhcp as dhcpproto
from .netproto import tftp as tftpproto
from .netproto.dhcp import DhcpMessage, decode_dhcp, encode_dhcp, mac_str
from .netproto.tftp import Ack, Data, Error, Oack, Rrq, decode_tftp, encode_tftp

logger = logging.getLogger("colaboot.sim")

PHASE_DHCP = "dhcp"
PHASE_BOOTLOADER = "bootloader"
PHASE_CONFIG = "config"
PHASE_KERNEL = "kernel"
PHASE_INITRD = "initrd"
PHASE_IMAGE = "image"


class BootError(Exception):
    pass


class PhaseTimeout(BootError):
    def __init__(self, phase: str):
        super().__init__(f"timed out during {phase}")
        self.phase = phase


class DigestMismatch(BootError):
    def __init__(self, role: str, got: str, wanted: str):
        super().__init__(f"{role}: fetched digest {got[:12]}.. != manifest {wanted[:12]}..")
        self.role = role


class OfferMissingBootfile(BootError):
    pass


@dataclass
class SimClientConfig:
    mac: bytes
    arch_code: int = 0
    loss_rate: float = 0.0
    blksize_request: int | None = 16384  # loopback default; servers clamp to policy
    seed: int = 0
    bind_host: str = "127.0.0.1"
    dhcp_timeout: float = 0.5
    dhcp_retries: int = 12
    tftp_timeout: float = 0.25
    tftp_retries: int = 16
    http_range_bytes: int = 4 * 1024 * 1024
    phase_deadline: float = 120.0


@dataclass
class Endpoints:
    dhcp: tuple[str, int]
    tftp: tuple[str, int]
    image_url: str
    manifest: AssetManifest | None = None


@dataclass
class BootResult:
    mac: str
    ok: bool = False
    lease: str | None = None
    fetched: dict[str, tuple[int, str]] = field(default_factory=dict)
    durations: dict[str, float] = field(default_factory=dict)
    manifest_version: int | None = None
    events: list[BootEvent] = field(default_factory=list)
    error: str | None = None
    error_phase: str | None = None

    def to_dict(self) -> dict:
        return {
            "mac": self.mac, "ok": self.ok, "lease": self.lease,
            "fetched": {role: {"bytes": n, "digest": d}
                        for role, (n, d) in self.fetched.items()},
            "durations": self.durations,
            "manifest_version": self.manifest_version,
            "error": self.error, "error_phase": self.error_phase,
        }


class LossyUdp:
    """UDP socket wrapper dropping datagrams both ways with a seeded RNG.

    Every decision comes from the RNG alone, so a (seed, loss_rate) pair
    replays the same drop pattern for the same traffic sequence.
    """

    def __init__(self, sock: socket.socket, rng: random.Random, loss_rate: float,
                 record_decisions: bool = False):
        self.sock = sock
        self.rng = rng
        self.loss_rate = loss_rate
        self.dropped = {"tx": 0, "rx": 0}
        self.decisions: list[tuple[str, bool]] | None = [] if record_decisions else None

    def _drop(self, direction: str) -> bool:
        dropped = self.loss_rate > 0 and self.rng.random() < self.loss_rate
        if dropped:
            self.dropped[direction] += 1
        if self.decisions is not None:
            self.decisions.append((direction, dropped))
        return dropped

    def sendto(self, data: bytes, addr) -> int:
        if self._drop("tx"):
            return len(data)
        return self.sock.sendto(data, addr)

    def recvfrom(self, bufsize: int, timeout: float) -> tuple[bytes, tuple[str, int]]:
        """Receive within a total time budget; dropped arrivals burn budget only."""
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise socket.timeout()
            self.sock.settimeout(remaining)
            data, addr = self.sock.recvfrom(bufsize)
            if self._drop("rx"):
                continue
            return data, addr

    def getsockname(self):
        return self.sock.getsockname()

    def close(self):
        self.sock.close()


class SimClient:
    def __init__(self, cfg: SimClientConfig, endpoints: Endpoints,
                 phase_hook=None):
        self.cfg = cfg
        self.endpoints = endpoints
        self.rng = random.Random(cfg.seed)
        self.phase_hook = phase_hook or (lambda phase: None)
        self.events: list[BootEvent] = []
        self._xid = self.rng.getrandbits(32)

    # -- event log ----------------------------------------------------------------

    def _emit(self, kind: str, size: int | None = None, role: str | None = None,
              manifest_version: int | None = None) -> None:
        self.events.append(BootEvent(
            client_id=mac_str(self.cfg.mac), kind=kind, timestamp=time.monotonic(),
            size=size, asset_role=role, manifest_version=manifest_version,
        ))

    # -- DHCP phase -----------------------------------------------------------------

    def _make_discover(self) -> DhcpMessage:
        vendor = f"PXEClient:Arch:{self.cfg.arch_code:05d}:UNDI:002001"
        return DhcpMessage(
            op=dhcpproto.BOOTREQUEST, xid=self._xid, client_mac=self.cfg.mac,
            options=[
                (dhcpproto.OPT_MSG_TYPE, bytes([dhcpproto.DISCOVER])),
                (dhcpproto.OPT_MAX_MSG_SIZE, struct.pack("!H", 1472)),
                (dhcpproto.OPT_PARAM_LIST, bytes([1, 3, 6, 51, 54, 66, 67])),
                (dhcpproto.OPT_CLIENT_ARCH, struct.pack("!H", self.cfg.arch_code)),
                (dhcpproto.OPT_VENDOR_CLASS, vendor.encode("ascii")),
            ],
        )

    def _make_request(self, offer: DhcpMessage) -> DhcpMessage:
        msg = self._make_discover()
        msg.options[0] = (dhcpproto.OPT_MSG_TYPE, bytes([dhcpproto.REQUEST]))
        msg.options.append((dhcpproto.OPT_REQUESTED_IP, dhcpproto.pack_ip(offer.yiaddr)))
        server_id = offer.option(dhcpproto.OPT_SERVER_ID)
        if server_id is not None:
            msg.options.append((dhcpproto.OPT_SERVER_ID, server_id))
        return msg

    def _dhcp_exchange(self, shim: LossyUdp, request: DhcpMessage,
                       expect: int, phase_name: str) -> DhcpMessage:
        raw = encode_dhcp(request)
        for _ in range(self.cfg.dhcp_retries):
            shim.sendto(raw, self.endpoints.dhcp)
            try:
                data, _ = shim.recvfrom(2048, self.cfg.dhcp_timeout)
            except socket.timeout:
                continue
            try:
                reply = decode_dhcp(data)
            except Exception:
                continue
            if reply.op != dhcpproto.BOOTREPLY or reply.xid != request.xid:
                continue
            if reply.msg_type == dhcpproto.NAK:
                raise BootError("server answered NAK")
            if reply.msg_type == expect:
                return reply
        raise PhaseTimeout(phase_name)

    def _dhcp(self) -> tuple[str, str, str]:
        """Returns (leased ip, next-server, bootfile)."""
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.bind((self.cfg.bind_host, 0))
        shim = LossyUdp(sock, self.rng, self.cfg.loss_rate)
        try:
            self._emit(EV_DHCP_DISCOVER)
            offer = self._dhcp_exchange(shim, self._make_discover(),
                                        dhcpproto.OFFER, PHASE_DHCP)
            self._emit(EV_DHCP_OFFER)
            bootfile = offer.file or ""
            opt67 = offer.option(dhcpproto.OPT_BOOTFILE)
            if not bootfile and opt67:
                bootfile = opt67.decode("ascii", "replace")
            if not bootfile:
                raise OfferMissingBootfile(f"offer for {offer.yiaddr} names no bootfile")
            next_server = offer.siaddr
            opt66 = offer.option(dhcpproto.OPT_TFTP_SERVER)
            if next_server == "0.0.0.0" and opt66:
                next_server = opt66.decode("ascii", "replace")

            self._emit(EV_DHCP_REQUEST)
            ack = self._dhcp_exchange(shim, self._make_request(offer),
                                      dhcpproto.ACK, PHASE_DHCP)
            self._emit(EV_DHCP_ACK)
            return ack.yiaddr, next_server, bootfile
        finally:
            shim.close()

    # -- TFTP phase -----------------------------------------------------------------

    def _tftp_fetch(self, filename: str, role: str, source_ip: str,
                    phase_name: str) -> bytes:
        """Lockstep read with duplicate re-ACK and RRQ/ACK retransmission."""
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            sock.bind((source_ip, 0))
        except OSError:
            sock.bind((self.cfg.bind_host, 0))
        shim = LossyUdp(sock, self.rng, self.cfg.loss_rate)
        options = []
        if self.cfg.blksize_request:
            options = [(tftpproto.OPT_BLKSIZE, str(self.cfg.blksize_request)),
                       (tftpproto.OPT_TSIZE, "0")]
        rrq = encode_tftp(Rrq(filename=filename, mode="octet", options=options))
        self._emit(EV_TFTP_RRQ, role=role)

        chunks: list[bytes] = []
        blksize = tftpproto.DEFAULT_BLKSIZE
        server: tuple[str, int] | None = None
        absolute = 0  # count of in-order blocks received
        last_ack: bytes | None = None
        retries = self.cfg.tftp_retries
        deadline = time.monotonic() + self.cfg.phase_deadline
        try:
            shim.sendto(rrq, self.endpoints.tftp)
            while True:
                if time.monotonic() > deadline:
                    raise PhaseTimeout(phase_name)
                try:
                    data, addr = shim.recvfrom(65536, self.cfg.tftp_timeout)
                except socket.timeout:
                    if retries <= 0:
                        raise PhaseTimeout(phase_name) from None
                    retries -= 1
                    if server is None:
                        shim.sendto(rrq, self.endpoints.tftp)  # first reply lost
                    elif last_ack is not None:
                        shim.sendto(last_ack, server)
                    continue
                if server is None:
                    if addr[0] != self.endpoints.tftp[0]:
                        continue
                    server = addr  # lock onto the transfer id
                elif addr != server:
                    continue
                try:
                    pkt = decode_tftp(data)
                except Exception:
                    continue
                if isinstance(pkt, Error):
                    raise BootError(f"tftp error {pkt.code} on {filename}: {pkt.message}")
                if isinstance(pkt, Oack):
                    for name, value in pkt.options:
                        if name.lower() == tftpproto.OPT_BLKSIZE:
                            blksize = int(value)
                    last_ack = encode_tftp(Ack(block=0))
                    shim.sendto(last_ack, server)
                    retries = self.cfg.tftp_retries
                    continue
                if isinstance(pkt, Data):
                    expected = (absolute + 1) % tftpproto.BLOCK_MODULUS
                    if pkt.block == expected:
                        chunks.append(pkt.payload)
                        absolute += 1
                        last_ack = encode_tftp(Ack(block=pkt.block))
                        shim.sendto(last_ack, server)
                        retries = self.cfg.tftp_retries
                        if len(pkt.payload) < blksize:
                            break  # final block
                    elif pkt.block == absolute % tftpproto.BLOCK_MODULUS and last_ack:
                        shim.sendto(last_ack, server)  # our ACK got lost; repeat it
                    continue
            if self.cfg.loss_rate > 0 and server is not None and last_ack is not None:
                self._dally(shim, server, last_ack)
        finally:
            shim.close()
        content = b"".join(chunks)
        self._emit(EV_TFTP_COMPLETE, size=len(content), role=role)
        return content

    def _dally(self, shim: LossyUdp, server: tuple[str, int], final_ack: bytes) -> None:
        """Linger briefly re-ACKing retransmitted final blocks, as real ROMs do."""
        until = time.monotonic() + 2 * self.cfg.tftp_timeout
        while time.monotonic() < until:
            try:
                data, addr = shim.recvfrom(65536, self.cfg.tftp_timeout)
            except socket.timeout:
                return
            if addr == server:
                shim.sendto(final_ack, server)

    # -- bootloader config parsing ----------------------------------------------------

    @staticmethod
    def parse_boot_config(text: str) -> tuple[str, str, str]:
        """Extract kernel path, initrd path, and image URL from a loader config."""
        kernel = initrd = image_url = ""
        for line in text.splitlines():
            parts = line.strip().split()
            if not parts:
                continue
            key = parts[0].upper()
            if key == "KERNEL" and len(parts) > 1:
                kernel = parts[1]
            elif key == "INITRD" and len(parts) > 1:
                initrd = parts[1]
            elif key == "APPEND":
                for token in parts[1:]:
                    if token.startswith("image_url="):
                        image_url = token[len("image_url="):]
        if not kernel or not initrd or not image_url:
            raise BootError("boot config names no kernel/initrd/image_url")
        return kernel, initrd, image_url

    # -- HTTP image phase ---------------------------------------------------------------

    def _http_fetch_image(self, image_url: str, source_ip: str) -> tuple[int, str, int]:
        """Sequential range requests; returns (bytes, digest, manifest version)."""
        parsed = urllib.parse.urlsplit(image_url)
        host, port = parsed.hostname, parsed.port or 80
        try:
            conn = http.client.HTTPConnection(host, port, timeout=10,
                                              source_address=(source_ip, 0))
        except OSError:
            conn = http.client.HTTPConnection(host, port, timeout=10)
        digest = hashlib.sha256()
        fetched = 0
        total: int | None = None
        version: int | None = None
        asset_digest = ""
        headers = {SESSION_HEADER: source_ip}
        first = True
        try:
            while total is None or fetched < total:
                last = fetched + self.cfg.http_range_bytes - 1
                conn.request("GET", parsed.path,
                             headers={**headers, "Range": f"bytes={fetched}-{last}"})
                resp = conn.getresponse()
                if resp.status != 206:
                    resp.read()
                    raise BootError(f"image fetch got HTTP {resp.status}")
                if first:
                    self._emit(EV_IMAGE_FIRST_BYTE)
                    first = False
                content_range = resp.getheader("Content-Range", "")
                if "/" in content_range:
                    total = int(content_range.rsplit("/", 1)[1])
                got_version = resp.getheader(VERSION_HEADER)
                if got_version is not None:
                    if version is not None and int(got_version) != version:
                        raise BootError(
                            f"manifest version changed mid-image: {version} -> {got_version}")
                    version = int(got_version)
                asset_digest = resp.getheader(DIGEST_HEADER, asset_digest)
                while chunk := resp.read(64 * 1024):
                    digest.update(chunk)
                    fetched += len(chunk)
                if total is None:
                    raise BootError("image response carried no Content-Range total")
        finally:
            conn.close()
        hexdigest = digest.hexdigest()
        if asset_digest and hexdigest != asset_digest:
            raise DigestMismatch(ROLE_IMAGE, hexdigest, asset_digest)
        self._emit(EV_IMAGE_COMPLETE, size=fetched, manifest_version=version)
        return fetched, hexdigest, version if version is not None else -1

    # -- orchestration ---------------------------------------------------------------

    def _verify(self, role: str, content: bytes, result: BootResult) -> str:
        got = hashlib.sha256(content).hexdigest()
        manifest = self.endpoints.manifest
        if manifest is not None:
            entry = manifest.by_role(role)
            # bootloaders differ per arch, so match by digest set instead
            if role == ROLE_BOOTLOADER:
                wanted = {e.digest for e in manifest.assets if e.role == role}
                if got not in wanted:
                    raise DigestMismatch(role, got, next(iter(wanted), ""))
            elif entry is not None and got != entry.digest:
                raise DigestMismatch(role, got, entry.digest)
        result.fetched[role] = (len(content), got)
        return got

    def run_boot(self) -> BootResult:
        result = BootResult(mac=mac_str(self.cfg.mac))
        started = time.monotonic()
        phase = PHASE_DHCP
        try:
            self.phase_hook(PHASE_DHCP)
            t0 = time.monotonic()
            lease_ip, next_server, bootfile = self._dhcp()
            result.lease = lease_ip
            result.durations[PHASE_DHCP] = time.monotonic() - t0

            for phase, role, name_from in (
                (PHASE_BOOTLOADER, ROLE_BOOTLOADER, lambda: bootfile),
                (PHASE_CONFIG, ROLE_CONFIG, lambda: "pxelinux.cfg/default"),
            ):
                self.phase_hook(phase)
                t0 = time.monotonic()
                content = self._tftp_fetch(name_from(), role, lease_ip, phase)
                self._verify(role, content, result)
                result.durations[phase] = time.monotonic() - t0
                if role == ROLE_CONFIG:
                    kernel_path, initrd_path, image_url = self.parse_boot_config(
                        content.decode("ascii", "replace"))

            for phase, role, path in ((PHASE_KERNEL, ROLE_KERNEL, kernel_path),
                                      (PHASE_INITRD, ROLE_INITRD, initrd_path)):
                self.phase_hook(phase)
                t0 = time.monotonic()
                content = self._tftp_fetch(path, role, lease_ip, phase)
                self._verify(role, content, result)
                result.durations[phase] = time.monotonic() - t0

            phase = PHASE_IMAGE
            self.phase_hook(PHASE_IMAGE)
            t0 = time.monotonic()
            nbytes, digest, version = self._http_fetch_image(image_url, lease_ip)
            result.durations[PHASE_IMAGE] = time.monotonic() - t0
            result.fetched[ROLE_IMAGE] = (nbytes, digest)
            result.manifest_version = version if version >= 0 else None
            manifest = self.endpoints.manifest
            if manifest is not None:
                entry = manifest.by_role(ROLE_IMAGE)
                if entry is not None and digest != entry.digest:
                    raise DigestMismatch(ROLE_IMAGE, digest, entry.digest)

            result.ok = True
        except BootError as exc:
            result.error = str(exc)
            result.error_phase = getattr(exc, "phase", phase)
            logger.info("boot %s failed in %s: %s", result.mac, result.error_phase, exc)
        result.durations["total"] = time.monotonic() - started
        result.events = list(self.events)
        return result


def run_boot(cfg: SimClientConfig, endpoints: Endpoints, phase_hook=None) -> BootResult:
    """Boot one simulated client; failures come back as a non-ok result."""
    return SimClient(cfg, endpoints, phase_hook=phase_hook).run_boot()


def fleet_mac(index: int) -> bytes:
    return bytes([0x52, 0x54, 0x00, 0xCB, (index >> 8) & 0xFF, index & 0xFF])


def run_fleet(n: int, template: SimClientConfig, endpoints: Endpoints,
              max_workers: int | None = None) -> list[BootResult]:
    """Boot n clients concurrently with distinct MACs and derived seeds."""
    if n < 1:
        raise ValueError("fleet size must be >= 1")
    configs = [replace(template, mac=fleet_mac(i), seed=template.seed + i)
               for i in range(n)]
    if max_workers is None:
        max_workers = min(n, 32)
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = [pool.submit(run_boot, cfg, endpoints) for cfg in configs]
        return [f.result() for f in futures]
