"""colaboot: a diskless network-boot server suite.

PXE-aware DHCP, TFTP delivery of bootloader/kernel/initrd, HTTP streaming
of a read-only OS image from a versioned content-addressed asset store,
per-client boot-session tracking, deployment artifact generation, and a
simulated PXE client for end-to-end verification.
"""

__version__ = "0.1.0"
