"""Read-only TFTP service over the asset store, with option negotiation.

The transfer state machine (handle_rrq / next_data / on_timeout) is plain
data in, packets out; the UDP runtime gives every accepted read request its
own ephemeral socket (a fresh transfer id) and multiplexes all of them from
one selector thread. A session pins one store snapshot for its whole life,
so a sync landing mid-transfer never changes the bytes on the wire.
"""

from __future__ import annotations

import logging
import posixpath
import selectors
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import BinaryIO, Callable

from .asset_store import Snapshot
from .boot_session import EV_TFTP_COMPLETE, EV_TFTP_RRQ, BootEvent
from .netproto import tftp as proto
from .netproto.tftp import Ack, Data, Error, Oack, Rrq

logger = logging.getLogger("colaboot.tftp")

DEFAULT_BLKSIZE_MAX = 1428  # stays under a typical Ethernet MTU with headers
DEFAULT_TIMEOUT = 1.0
DEFAULT_RETRIES = 5
BACKOFF_FACTOR = 2.0
BACKOFF_CAP = 8.0


class TftpRequestError(Exception):
    """RRQ refused; carries the TFTP error code to answer with."""

    code = proto.ERR_NOT_DEFINED

    def to_packet(self) -> Error:
        return Error(code=self.code, message=str(self))


class FileNotFound(TftpRequestError):
    code = proto.ERR_FILE_NOT_FOUND


class AccessViolation(TftpRequestError):
    code = proto.ERR_ACCESS_VIOLATION


class ModeUnsupported(TftpRequestError):
    code = proto.ERR_NOT_DEFINED


@dataclass(frozen=True)
class TftpPolicy:
    blksize_max: int = DEFAULT_BLKSIZE_MAX
    timeout: float = DEFAULT_TIMEOUT
    retries: int = DEFAULT_RETRIES


@dataclass(frozen=True)
class TransferComplete:
    """Terminal marker: the client acknowledged the final short block."""

    bytes_sent: int


@dataclass(frozen=True)
class SessionAbort:
    """Terminal marker: retries exhausted or the client gave up."""

    reason: str


@dataclass
class TransferSession:
    client: tuple[str, int]
    snapshot: Snapshot
    path: str
    role: str
    size: int
    blksize: int
    timeout: float
    retries_left: int
    stream: BinaryIO
    timeout_base: float = 0.0    # per-block starting timeout; backoff resets to this
    retries_base: int = 0
    tsize_requested: bool = False
    next_block: int = 0          # absolute index of the last DATA sent; 0 while an OACK is out
    final_sent: bool = False
    done: bool = False
    aborted: bool = False
    last_reply: Data | Oack | None = None
    options_acked: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        if not self.timeout_base:
            self.timeout_base = self.timeout
        if not self.retries_base:
            self.retries_base = self.retries_left

    @property
    def expected_ack(self) -> int:
        return self.next_block % proto.BLOCK_MODULUS

    def close(self) -> None:
        try:
            self.stream.close()
        except OSError:
            pass


def resolve_path(requested: str) -> str:
    """Normalize an RRQ filename into the store's virtual namespace.

    A single leading slash is tolerated (some ROMs send one); anything that
    would climb out of the root is refused before existence is checked.
    """
    name = requested.lstrip("/")
    if not name:
        raise FileNotFound(requested)
    norm = posixpath.normpath(name)
    if norm.startswith("..") or norm.startswith("/"):
        raise AccessViolation(requested)
    return norm


def _read_block(sess: TransferSession, block: int) -> bytes:
    sess.stream.seek((block - 1) * sess.blksize)
    return sess.stream.read(sess.blksize)


def _make_data(sess: TransferSession, block: int) -> Data:
    payload = _read_block(sess, block)
    sess.next_block = block
    sess.final_sent = len(payload) < sess.blksize
    pkt = Data(block=block % proto.BLOCK_MODULUS, payload=payload)
    sess.last_reply = pkt
    return pkt


def handle_rrq(
    rrq: Rrq,
    snapshot: Snapshot,
    policy: TftpPolicy = TftpPolicy(),
    client: tuple[str, int] = ("0.0.0.0", 0),
) -> tuple[TransferSession, Oack | Data]:
    """Accept a read request; reply with an OACK (if options came) or DATA #1."""
    if rrq.mode.lower() != "octet":
        raise ModeUnsupported(f"mode {rrq.mode!r} unsupported, octet only")
    path = resolve_path(rrq.filename)
    entry = snapshot.manifest.find(path)
    if entry is None:
        raise FileNotFound(path)

    blksize = proto.DEFAULT_BLKSIZE
    timeout = policy.timeout
    acked: list[tuple[str, str]] = []
    tsize_requested = False
    for name, value in rrq.options:
        low = name.lower()
        if low == proto.OPT_BLKSIZE:
            try:
                wanted = int(value)
            except ValueError:
                continue
            if wanted < proto.MIN_BLKSIZE:
                continue
            blksize = min(wanted, policy.blksize_max, proto.MAX_BLKSIZE)
            acked.append((proto.OPT_BLKSIZE, str(blksize)))
        elif low == proto.OPT_TSIZE:
            tsize_requested = True
            acked.append((proto.OPT_TSIZE, str(entry.size)))
        elif low == proto.OPT_TIMEOUT:
            try:
                seconds = int(value)
            except ValueError:
                continue
            if 1 <= seconds <= 255:
                timeout = float(seconds)
                acked.append((proto.OPT_TIMEOUT, str(seconds)))
        # unknown options are simply not acknowledged

    sess = TransferSession(
        client=client, snapshot=snapshot, path=path, role=entry.role,
        size=entry.size, blksize=blksize, timeout=timeout,
        retries_left=policy.retries, stream=snapshot.open(path),
        tsize_requested=tsize_requested,
    )
    if acked:
        reply: Oack | Data = Oack(options=acked)
        sess.options_acked = acked
        sess.last_reply = reply
    else:
        reply = _make_data(sess, 1)
    return sess, reply


def next_data(sess: TransferSession, ack: Ack) -> Data | TransferComplete | None:
    """Advance on a matching ACK; None means the ACK was stale and is ignored.

    No retransmit happens on duplicate ACKs (the Sorcerer's Apprentice
    avoidance); retransmits are driven solely by on_timeout.
    """
    if sess.done:
        return None
    if ack.block != sess.expected_ack:
        return None
    if sess.final_sent:
        sess.done = True
        sess.close()
        return TransferComplete(bytes_sent=sess.size)
    sess.retries_left = sess.retries_base
    sess.timeout = sess.timeout_base
    return _make_data(sess, sess.next_block + 1)


def on_timeout(sess: TransferSession) -> Data | Oack | SessionAbort | None:
    """Retransmit the outstanding reply, or abort once retries run out."""
    if sess.done:
        return None
    if sess.retries_left <= 0:
        sess.done = True
        sess.aborted = True
        sess.close()
        return SessionAbort(reason=f"no ACK for block {sess.expected_ack}")
    sess.retries_left -= 1
    sess.timeout = min(sess.timeout * BACKOFF_FACTOR, BACKOFF_CAP)
    return sess.last_reply


SnapshotProvider = Callable[[str], Snapshot]


class _LiveTransfer:
    """One in-flight transfer: its own socket (the transfer id) plus a deadline."""

    __slots__ = ("sess", "sock", "deadline")

    def __init__(self, sess: TransferSession, sock: socket.socket, deadline: float):
        self.sess = sess
        self.sock = sock
        self.deadline = deadline


class TftpServer:
    """UDP runtime: RRQs on the main port, one ephemeral socket per transfer.

    A single selector-driven thread owns every transfer. The per-session
    retransmit timer is a deadline that only progress resets, so a client
    re-ACKing steadily cannot starve retransmission of a lost DATA.
    """

    def __init__(
        self,
        snapshot_for: SnapshotProvider,
        bind_address: str = "0.0.0.0",
        port: int = 69,
        policy: TftpPolicy = TftpPolicy(),
        events=None,
        client_id_for: Callable[[str], str] | None = None,
    ):
        self.snapshot_for = snapshot_for
        self.bind_address = bind_address
        self.requested_port = port
        self.policy = policy
        self.events = events
        self.client_id_for = client_id_for or (lambda ip: f"ip:{ip}")
        self.sock: socket.socket | None = None
        self._thread: threading.Thread | None = None
        self._running = False
        self._live: dict[socket.socket, _LiveTransfer] = {}
        self._wake_r: socket.socket | None = None
        self._wake_w: socket.socket | None = None

    @property
    def port(self) -> int:
        assert self.sock is not None
        return self.sock.getsockname()[1]

    def bind(self) -> None:
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((self.bind_address, self.requested_port))
        sock.setblocking(False)
        self.sock = sock

    def start(self) -> None:
        if self.sock is None:
            self.bind()
        self._wake_r, self._wake_w = socket.socketpair()
        self._wake_r.setblocking(False)
        self._running = True
        self._thread = threading.Thread(target=self._serve, name="tftp", daemon=True)
        self._thread.start()
        logger.info("TFTP listening on %s:%d", self.bind_address, self.port)

    def stop(self) -> None:
        self._running = False
        if self._wake_w is not None:
            try:
                self._wake_w.send(b"\x00")
            except OSError:
                pass
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None
        for endpoint in (self.sock, self._wake_r, self._wake_w):
            if endpoint is not None:
                endpoint.close()
        self.sock = None
        self._wake_r = self._wake_w = None

    def _emit(self, ip: str, kind: str, role: str, size: int | None, version: int) -> None:
        if self.events is not None:
            self.events(BootEvent(
                client_id=self.client_id_for(ip), kind=kind, timestamp=time.monotonic(),
                size=size, asset_role=role, manifest_version=version,
            ))

    @staticmethod
    def _send(sock: socket.socket, pkt, dest: tuple[str, int]) -> bool:
        # datagram sends never block on loopback; a full-buffer drop is
        # indistinguishable from wire loss, and retransmission covers it
        try:
            sock.sendto(proto.encode_tftp(pkt), dest)
            return True
        except OSError:
            return False

    def _serve(self) -> None:
        assert self.sock is not None and self._wake_r is not None
        selector = selectors.DefaultSelector()
        selector.register(self.sock, selectors.EVENT_READ, "main")
        selector.register(self._wake_r, selectors.EVENT_READ, "wake")
        try:
            while self._running:
                timeout = self._poll_timeout()
                for key, _ in selector.select(timeout):
                    if key.data == "wake":
                        self._drain_wake()
                    elif key.data == "main":
                        self._drain_main(selector)
                    else:
                        self._drain_session(selector, key.data)
                self._fire_deadlines(selector)
        finally:
            for live in list(self._live.values()):
                self._close_transfer(selector, live)
            selector.close()

    def _poll_timeout(self) -> float:
        if not self._live:
            return 1.0
        now = time.monotonic()
        soonest = min(live.deadline for live in self._live.values())
        return min(max(soonest - now, 0.0), 1.0)

    def _drain_wake(self) -> None:
        assert self._wake_r is not None
        try:
            while self._wake_r.recv(64):
                pass
        except (BlockingIOError, OSError):
            pass

    def _drain_main(self, selector: selectors.BaseSelector) -> None:
        assert self.sock is not None
        while True:
            try:
                raw, source = self.sock.recvfrom(4096)
            except OSError:  # drained (EWOULDBLOCK) or closing
                return
            try:
                pkt = proto.decode_tftp(raw)
            except Exception as exc:
                logger.debug("undecodable TFTP packet from %s: %s", source, exc)
                continue
            if isinstance(pkt, Rrq):
                self._accept(selector, pkt, source)
            elif isinstance(pkt, proto.Wrq):
                self._send(self.sock, Error(code=proto.ERR_ACCESS_VIOLATION,
                                            message="store is read-only"), source)
            # stray DATA/ACK/OACK on the request port are ignored

    def _accept(self, selector: selectors.BaseSelector, rrq: Rrq,
                source: tuple[str, int]) -> None:
        assert self.sock is not None
        try:
            snapshot = self.snapshot_for(source[0])
            sess, first = handle_rrq(rrq, snapshot, self.policy, client=source)
        except TftpRequestError as exc:
            logger.info("refusing RRQ %r from %s: %s", rrq.filename, source, exc)
            self._send(self.sock, exc.to_packet(), source)
            return
        except Exception:
            logger.exception("RRQ %r from %s failed", rrq.filename, source)
            self._send(self.sock, Error(code=proto.ERR_NOT_DEFINED,
                                        message="internal error"), source)
            return

        conn = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            conn.bind((self.bind_address, 0))  # fresh transfer id per RFC 1350
        except OSError:
            conn.close()
            sess.close()
            return
        conn.setblocking(False)
        self._emit(source[0], EV_TFTP_RRQ, sess.role, None, snapshot.version)
        live = _LiveTransfer(sess, conn, time.monotonic() + sess.timeout)
        self._live[conn] = live
        selector.register(conn, selectors.EVENT_READ, live)
        self._send(conn, first, sess.client)

    def _drain_session(self, selector: selectors.BaseSelector,
                       live: _LiveTransfer) -> None:
        sess = live.sess
        while True:
            try:
                raw, source = live.sock.recvfrom(4096)
            except OSError:  # drained, or ICMP unreachable from an earlier send
                return
            if source != sess.client:
                self._send(live.sock, Error(code=proto.ERR_UNKNOWN_TID,
                                            message="unknown transfer id"), source)
                continue
            try:
                pkt = proto.decode_tftp(raw)
            except Exception:
                continue
            if isinstance(pkt, Ack):
                outcome = next_data(sess, pkt)
                if isinstance(outcome, TransferComplete):
                    self._emit(sess.client[0], EV_TFTP_COMPLETE, sess.role,
                               outcome.bytes_sent, sess.snapshot.version)
                    self._close_transfer(selector, live)
                    return
                if isinstance(outcome, Data):
                    self._send(live.sock, outcome, sess.client)
                    live.deadline = time.monotonic() + sess.timeout
            elif isinstance(pkt, Error):
                logger.info("client error on %s from %s: %s", sess.path, sess.client,
                            pkt.message)
                sess.done = True
                sess.aborted = True
                self._close_transfer(selector, live)
                return

    def _fire_deadlines(self, selector: selectors.BaseSelector) -> None:
        now = time.monotonic()
        for live in [l for l in self._live.values() if l.deadline <= now]:
            action = on_timeout(live.sess)
            if action is None or isinstance(action, SessionAbort):
                if isinstance(action, SessionAbort):
                    logger.info("aborting %s to %s: %s", live.sess.path,
                                live.sess.client, action.reason)
                self._close_transfer(selector, live)
                continue
            self._send(live.sock, action, live.sess.client)
            live.deadline = time.monotonic() + live.sess.timeout

    def _close_transfer(self, selector: selectors.BaseSelector,
                        live: _LiveTransfer) -> None:
        live.sess.close()
        self._live.pop(live.sock, None)
        try:
            selector.unregister(live.sock)
        except (KeyError, ValueError):
            pass
        live.sock.close()
