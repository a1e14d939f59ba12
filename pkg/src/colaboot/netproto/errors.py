"""Typed decode/encode failures shared by the DHCP and TFTP codecs."""


class CodecError(ValueError):
    """Base class for every wire-format error raised by this package."""


class Truncated(CodecError):
    """Buffer ends before the fixed-size portion of the packet does."""


class BadCookie(CodecError):
    """DHCP magic cookie is not 99.130.83.99."""


class UnterminatedOptions(CodecError):
    """DHCP option area ran out before an end option (255) was seen."""


class DuplicateMessageType(CodecError):
    """More than one option 53 in a single DHCP message."""


class OptionOverloadUnsupported(CodecError):
    """DHCP option overload (option 52) is rejected, never honored."""


class OversizedOption(CodecError):
    """A DHCP option payload exceeds the 255-byte length field."""


class UnknownOpcode(CodecError):
    """TFTP opcode outside the 1-6 range."""


class MalformedNetascii(CodecError):
    """A NUL-terminated string field in a TFTP packet is missing its NUL."""
