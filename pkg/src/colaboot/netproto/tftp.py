"""TFTP wire format: RFC 1350 packets plus RFC 2347/2348/2349 options.

Packets are plain dataclasses; ``decode_tftp``/``encode_tftp`` dispatch on
the two-byte opcode. Option names and values travel as NUL-terminated ASCII
pairs and are kept in wire order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Union

from .errors import MalformedNetascii, Truncated, UnknownOpcode

OP_RRQ = 1
OP_WRQ = 2
OP_DATA = 3
OP_ACK = 4
OP_ERROR = 5
OP_OACK = 6

ERR_NOT_DEFINED = 0
ERR_FILE_NOT_FOUND = 1
ERR_ACCESS_VIOLATION = 2
ERR_DISK_FULL = 3
ERR_ILLEGAL_OPERATION = 4
ERR_UNKNOWN_TID = 5
ERR_FILE_EXISTS = 6
ERR_NO_SUCH_USER = 7
ERR_OPTION_NEGOTIATION = 8

OPT_BLKSIZE = "blksize"
OPT_TSIZE = "tsize"
OPT_TIMEOUT = "timeout"

DEFAULT_BLKSIZE = 512
MIN_BLKSIZE = 8
MAX_BLKSIZE = 65464
BLOCK_MODULUS = 65536


@dataclass
class Rrq:
    filename: str
    mode: str = "octet"
    options: list[tuple[str, str]] = field(default_factory=list)


@dataclass
class Wrq:
    """Write request; decoded so the server can refuse it politely."""

    filename: str
    mode: str = "octet"
    options: list[tuple[str, str]] = field(default_factory=list)


@dataclass
class Data:
    block: int
    payload: bytes


@dataclass
class Ack:
    block: int


@dataclass
class Error:
    code: int
    message: str = ""


@dataclass
class Oack:
    options: list[tuple[str, str]] = field(default_factory=list)


TftpPacket = Union[Rrq, Wrq, Data, Ack, Error, Oack]


def _split_strings(raw: bytes, context: str) -> list[str]:
    if not raw.endswith(b"\x00"):
        raise MalformedNetascii(f"{context}: missing trailing NUL")
    parts = raw[:-1].split(b"\x00")
    return [p.decode("ascii", "replace") for p in parts]


def _decode_request(cls, rest: bytes) -> Rrq | Wrq:
    fields = _split_strings(rest, cls.__name__)
    if len(fields) < 2:
        raise MalformedNetascii(f"{cls.__name__}: need filename and mode")
    filename, mode, *opt_fields = fields
    if len(opt_fields) % 2:
        raise MalformedNetascii(f"{cls.__name__}: dangling option name {opt_fields[-1]!r}")
    options = list(zip(opt_fields[0::2], opt_fields[1::2]))
    return cls(filename=filename, mode=mode, options=options)


def decode_tftp(raw: bytes) -> TftpPacket:
    if len(raw) < 2:
        raise Truncated(f"TFTP packet is {len(raw)} bytes, need at least 2")
    opcode = struct.unpack("!H", raw[:2])[0]
    rest = raw[2:]
    if opcode == OP_RRQ:
        return _decode_request(Rrq, rest)
    if opcode == OP_WRQ:
        return _decode_request(Wrq, rest)
    if opcode == OP_DATA:
        if len(rest) < 2:
            raise Truncated("DATA packet without a block number")
        return Data(block=struct.unpack("!H", rest[:2])[0], payload=rest[2:])
    if opcode == OP_ACK:
        if len(rest) < 2:
            raise Truncated("ACK packet without a block number")
        return Ack(block=struct.unpack("!H", rest[:2])[0])
    if opcode == OP_ERROR:
        if len(rest) < 2:
            raise Truncated("ERROR packet without a code")
        code = struct.unpack("!H", rest[:2])[0]
        (message,) = _split_strings(rest[2:], "ERROR") or [""]
        return Error(code=code, message=message)
    if opcode == OP_OACK:
        fields = _split_strings(rest, "OACK") if rest else []
        if fields == [""]:
            fields = []
        if len(fields) % 2:
            raise MalformedNetascii("OACK: dangling option name")
        return Oack(options=list(zip(fields[0::2], fields[1::2])))
    raise UnknownOpcode(f"opcode {opcode} outside 1-6")


def _encode_strings(parts: list[str]) -> bytes:
    out = bytearray()
    for part in parts:
        out.extend(part.encode("ascii"))
        out.append(0)
    return bytes(out)


def encode_tftp(pkt: TftpPacket) -> bytes:
    if isinstance(pkt, (Rrq, Wrq)):
        opcode = OP_RRQ if isinstance(pkt, Rrq) else OP_WRQ
        parts = [pkt.filename, pkt.mode]
        for name, value in pkt.options:
            parts.extend((name, value))
        return struct.pack("!H", opcode) + _encode_strings(parts)
    if isinstance(pkt, Data):
        if not 0 <= pkt.block < BLOCK_MODULUS:
            raise ValueError(f"block {pkt.block} outside 16 bits")
        if len(pkt.payload) > MAX_BLKSIZE:
            raise ValueError(f"payload of {len(pkt.payload)} bytes exceeds {MAX_BLKSIZE}")
        return struct.pack("!HH", OP_DATA, pkt.block) + pkt.payload
    if isinstance(pkt, Ack):
        if not 0 <= pkt.block < BLOCK_MODULUS:
            raise ValueError(f"block {pkt.block} outside 16 bits")
        return struct.pack("!HH", OP_ACK, pkt.block)
    if isinstance(pkt, Error):
        return struct.pack("!HH", OP_ERROR, pkt.code) + _encode_strings([pkt.message])
    if isinstance(pkt, Oack):
        parts: list[str] = []
        for name, value in pkt.options:
            parts.extend((name, value))
        return struct.pack("!H", OP_OACK) + _encode_strings(parts)
    raise TypeError(f"not a TFTP packet: {pkt!r}")
