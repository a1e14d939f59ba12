"""Bit-exact DHCP and TFTP codecs plus PXE option inspection."""

from .dhcp import (
    ArchFamily,
    ClientArch,
    DhcpMessage,
    decode_dhcp,
    encode_dhcp,
    is_pxe_client,
)
from .errors import (
    BadCookie,
    CodecError,
    DuplicateMessageType,
    MalformedNetascii,
    OptionOverloadUnsupported,
    OversizedOption,
    Truncated,
    UnknownOpcode,
    UnterminatedOptions,
)
from .tftp import (
    Ack,
    Data,
    Error,
    Oack,
    Rrq,
    TftpPacket,
    Wrq,
    decode_tftp,
    encode_tftp,
)

__all__ = [
    "ArchFamily", "ClientArch", "DhcpMessage", "decode_dhcp", "encode_dhcp",
    "is_pxe_client",
    "CodecError", "Truncated", "BadCookie", "UnterminatedOptions",
    "DuplicateMessageType", "OptionOverloadUnsupported", "OversizedOption",
    "UnknownOpcode", "MalformedNetascii",
    "Rrq", "Wrq", "Data", "Ack", "Error", "Oack", "TftpPacket",
    "decode_tftp", "encode_tftp",
]
