"""DHCP wire format (RFC 2131/2132) with the PXE-specific pieces this suite needs.

The fixed header layout:

    op(1) htype(1) hlen(1) hops(1) xid(4) secs(2) flags(2)
    ciaddr(4) yiaddr(4) siaddr(4) giaddr(4)
    chaddr(16) sname(64) file(128) cookie(4) options...

Options are kept as an ordered (tag, payload) list so that
``encode_dhcp(decode_dhcp(b))`` reproduces ``b`` byte for byte, trailing
padding aside.
"""

from __future__ import annotations

import enum
import socket
import struct
from dataclasses import dataclass, field

from .errors import (
    BadCookie,
    DuplicateMessageType,
    OptionOverloadUnsupported,
    OversizedOption,
    Truncated,
    UnterminatedOptions,
)

BOOTREQUEST = 1
BOOTREPLY = 2

DISCOVER = 1
OFFER = 2
REQUEST = 3
DECLINE = 4
ACK = 5
NAK = 6
RELEASE = 7
INFORM = 8

OPT_PAD = 0
OPT_SUBNET_MASK = 1
OPT_ROUTER = 3
OPT_DNS = 6
OPT_REQUESTED_IP = 50
OPT_LEASE_TIME = 51
OPT_OVERLOAD = 52
OPT_MSG_TYPE = 53
OPT_SERVER_ID = 54
OPT_PARAM_LIST = 55
OPT_MAX_MSG_SIZE = 57
OPT_VENDOR_CLASS = 60
OPT_CLIENT_ID = 61
OPT_TFTP_SERVER = 66
OPT_BOOTFILE = 67
OPT_CLIENT_ARCH = 93
OPT_CLIENT_NDI = 94
OPT_CLIENT_UUID = 97
OPT_END = 255

MAGIC_COOKIE = b"\x63\x82\x53\x63"
FIXED_LEN = 240  # 236-byte BOOTP header + 4-byte cookie
MIN_DATAGRAM = 300

FLAG_BROADCAST = 0x8000

PXE_VENDOR_PREFIX = b"PXEClient"

_HEADER = struct.Struct("!BBBBIHH4s4s4s4s16s64s128s")


def pack_ip(addr: str) -> bytes:
    return socket.inet_aton(addr)


def unpack_ip(raw: bytes) -> str:
    return socket.inet_ntoa(raw)


def mac_str(mac: bytes) -> str:
    return ":".join(f"{b:02x}" for b in mac)


class ArchFamily(enum.Enum):
    """Coarse client platform classes used for bootfile dispatch."""

    LEGACY_BIOS = "bios"
    UEFI_X64 = "uefi_x64"
    UEFI_IA32 = "uefi_ia32"
    UNKNOWN = "unknown"


_ARCH_BY_CODE = {
    0: ArchFamily.LEGACY_BIOS,
    6: ArchFamily.UEFI_IA32,
    7: ArchFamily.UEFI_X64,
    9: ArchFamily.UEFI_X64,
}


@dataclass(frozen=True)
class ClientArch:
    """Client system architecture from option 93."""

    code: int

    @property
    def family(self) -> ArchFamily:
        return _ARCH_BY_CODE.get(self.code, ArchFamily.UNKNOWN)

    @classmethod
    def from_message(cls, msg: "DhcpMessage") -> "ClientArch":
        raw = msg.option(OPT_CLIENT_ARCH)
        if raw is None or len(raw) < 2:
            return cls(code=-1)
        return cls(code=struct.unpack("!H", raw[:2])[0])


@dataclass
class DhcpMessage:
    """One BOOTP/DHCP datagram with its options in wire order."""

    op: int = BOOTREQUEST
    xid: int = 0
    client_mac: bytes = b"\x00" * 6
    ciaddr: str = "0.0.0.0"
    yiaddr: str = "0.0.0.0"
    siaddr: str = "0.0.0.0"
    giaddr: str = "0.0.0.0"
    sname: str = ""
    file: str = ""
    options: list[tuple[int, bytes]] = field(default_factory=list)
    htype: int = 1
    hlen: int = 6
    hops: int = 0
    secs: int = 0
    flags: int = 0

    def option(self, tag: int) -> bytes | None:
        for t, payload in self.options:
            if t == tag:
                return payload
        return None

    @property
    def msg_type(self) -> int | None:
        raw = self.option(OPT_MSG_TYPE)
        if raw is None or len(raw) != 1:
            return None
        return raw[0]


def decode_dhcp(raw: bytes) -> DhcpMessage:
    """Parse one datagram payload; unknown option tags are kept verbatim."""
    if len(raw) < FIXED_LEN:
        raise Truncated(f"datagram is {len(raw)} bytes, need at least {FIXED_LEN}")
    (op, htype, hlen, hops, xid, secs, flags,
     ciaddr, yiaddr, siaddr, giaddr, chaddr, sname, file_) = _HEADER.unpack(raw[:236])
    cookie = raw[236:240]
    if cookie != MAGIC_COOKIE:
        raise BadCookie(f"magic cookie {cookie.hex()} != {MAGIC_COOKIE.hex()}")

    options: list[tuple[int, bytes]] = []
    seen_msg_type = False
    area = raw[240:]
    i = 0
    terminated = False
    while i < len(area):
        tag = area[i]
        i += 1
        if tag == OPT_END:
            terminated = True
            break
        if tag == OPT_PAD:
            continue
        if i >= len(area):
            raise UnterminatedOptions(f"option {tag} has no length byte")
        length = area[i]
        i += 1
        if i + length > len(area):
            raise UnterminatedOptions(f"option {tag} payload runs past the buffer")
        payload = area[i:i + length]
        i += length
        if tag == OPT_OVERLOAD:
            raise OptionOverloadUnsupported("option overload (52) is not honored")
        if tag == OPT_MSG_TYPE:
            if seen_msg_type:
                raise DuplicateMessageType("more than one option 53")
            seen_msg_type = True
        options.append((tag, payload))
    if not terminated:
        raise UnterminatedOptions("no end option (255) before the buffer ran out")

    return DhcpMessage(
        op=op, xid=xid, client_mac=bytes(chaddr[:6]),
        ciaddr=unpack_ip(ciaddr), yiaddr=unpack_ip(yiaddr),
        siaddr=unpack_ip(siaddr), giaddr=unpack_ip(giaddr),
        sname=sname.split(b"\x00", 1)[0].decode("ascii", "replace"),
        file=file_.split(b"\x00", 1)[0].decode("ascii", "replace"),
        options=options,
        htype=htype, hlen=hlen, hops=hops, secs=secs, flags=flags,
    )


def encode_dhcp(msg: DhcpMessage) -> bytes:
    """Serialize; output is zero-padded to the 300-byte BOOTP minimum."""
    seen_msg_type = False
    opt_area = bytearray()
    for tag, payload in msg.options:
        if not 0 < tag < 255:
            raise OversizedOption(f"option tag {tag} out of the encodable 1-254 range")
        if len(payload) > 255:
            raise OversizedOption(f"option {tag} payload is {len(payload)} bytes")
        if tag == OPT_MSG_TYPE:
            if seen_msg_type:
                raise DuplicateMessageType("more than one option 53")
            seen_msg_type = True
        opt_area.append(tag)
        opt_area.append(len(payload))
        opt_area.extend(payload)
    opt_area.append(OPT_END)

    sname = msg.sname.encode("ascii")
    file_ = msg.file.encode("ascii")
    if len(sname) > 63:
        raise OversizedOption("sname exceeds 63 bytes")
    if len(file_) > 127:
        raise OversizedOption("bootfile name exceeds 127 bytes")

    head = _HEADER.pack(
        msg.op, msg.htype, msg.hlen, msg.hops, msg.xid, msg.secs, msg.flags,
        pack_ip(msg.ciaddr), pack_ip(msg.yiaddr), pack_ip(msg.siaddr), pack_ip(msg.giaddr),
        msg.client_mac[:6].ljust(16, b"\x00"), sname, file_,
    )
    out = head + MAGIC_COOKIE + bytes(opt_area)
    if len(out) < MIN_DATAGRAM:
        out = out.ljust(MIN_DATAGRAM, b"\x00")
    return out


def is_pxe_client(msg: DhcpMessage) -> bool:
    """True iff option 60 starts with the ASCII PXEClient vendor class."""
    vendor = msg.option(OPT_VENDOR_CLASS)
    return vendor is not None and vendor.startswith(PXE_VENDOR_PREFIX)
