"""Deployment artifact generation: firewall rules, installer script, server config.

All three generators emit inert, deterministic text. Scripts are written
for an operator to review and run; nothing here executes anything. The
CIFS-share steps are produced for installations that pair this suite with
an external file server even though images stream over HTTP here.
"""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass

from .config import from_mapping, parse_config_text

TARGET_WINDOWS_BATCH = "windows_batch"
TARGET_POSIX_SHELL = "posix_shell"

DHCP_PORTS = (67, 68)
TFTP_PORT = 69
CIFS_PORTS = (137, 138, 139, 445)


class UnsupportedDialect(Exception):
    pass


class MissingBootfile(Exception):
    pass


@dataclass(frozen=True)
class DeployProfile:
    server_ip: str
    image_port: int = 8080
    cifs_user: str = "bootshare"
    target_os: str = TARGET_WINDOWS_BATCH
    store_root: str = "store"
    share_name: str = "boot"
    pool_start: str = ""
    pool_end: str = ""
    subnet_mask: str = "255.255.255.0"
    router: str = ""
    dns: tuple[str, ...] = ()
    lease_seconds: int = 3600

    def __post_init__(self):
        ipaddress.IPv4Address(self.server_ip)

    @property
    def ports(self) -> dict:
        return {"dhcp": list(DHCP_PORTS), "tftp": TFTP_PORT,
                "cifs": list(CIFS_PORTS), "image": self.image_port}


def firewall_port_set(profile: DeployProfile) -> set[tuple[str, int]]:
    """The exact inbound-allow set: UDP boot ports, TCP+UDP CIFS, TCP image port."""
    rules: set[tuple[str, int]] = {("udp", p) for p in DHCP_PORTS}
    rules.add(("udp", TFTP_PORT))
    for port in CIFS_PORTS:
        rules.add(("tcp", port))
        rules.add(("udp", port))
    rules.add(("tcp", profile.image_port))
    return rules


_SERVICE_LABEL = {67: "dhcp", 68: "dhcp", 69: "tftp",
                  137: "cifs", 138: "cifs", 139: "cifs", 445: "cifs"}


def generate_firewall_rules(profile: DeployProfile) -> str:
    """One inbound-allow line per (protocol, port), deterministically ordered."""
    lines = ["# inbound allow rules for the boot server"]
    for proto, port in sorted(firewall_port_set(profile), key=lambda r: (r[1], r[0])):
        label = _SERVICE_LABEL.get(port, "image")
        lines.append(f"allow in proto={proto} port={port} # {label}")
    return "\n".join(lines) + "\n"


def _windows_installer(profile: DeployProfile) -> str:
    return (
        "@echo off\n"
        "rem boot-server provisioning script (generated; review before running)\n"
        "rem step 1: enable SMB 1.0 and CIFS file sharing support\n"
        "dism /online /enable-feature /featurename:SMB1Protocol /all /norestart\n"
        "rem step 2: create the file-sharing account\n"
        f"net user {profile.cifs_user} * /add\n"
        "rem step 3: share the asset store read-only\n"
        f"net share {profile.share_name}={profile.store_root} "
        f"/grant:{profile.cifs_user},READ\n"
        "rem step 4: start the server service\n"
        "net start lanmanserver\n"
    )


def _posix_installer(profile: DeployProfile) -> str:
    return (
        "#!/bin/sh\n"
        "# boot-server provisioning script (generated; review before running)\n"
        "set -eu\n"
        "# step 1: install SMB/CIFS serving support\n"
        "apt-get install -y samba\n"
        "# step 2: create the file-sharing account\n"
        f"useradd --system --no-create-home {profile.cifs_user}\n"
        "# step 3: share the asset store read-only\n"
        "cat >> /etc/samba/smb.conf <<EOF\n"
        f"[{profile.share_name}]\n"
        f"   path = {profile.store_root}\n"
        "   read only = yes\n"
        f"   valid users = {profile.cifs_user}\n"
        "EOF\n"
        "# step 4: start the server service\n"
        "systemctl restart smbd\n"
    )


def generate_installer_script(profile: DeployProfile) -> str:
    """Feature enablement, user creation, share creation, service start, in order."""
    if profile.target_os == TARGET_WINDOWS_BATCH:
        return _windows_installer(profile)
    if profile.target_os == TARGET_POSIX_SHELL:
        return _posix_installer(profile)
    raise UnsupportedDialect(profile.target_os)


def installer_filename(profile: DeployProfile) -> str:
    if profile.target_os == TARGET_WINDOWS_BATCH:
        return "install.bat"
    if profile.target_os == TARGET_POSIX_SHELL:
        return "install.sh"
    raise UnsupportedDialect(profile.target_os)


def generate_server_config(profile: DeployProfile, bootfiles: dict[str, str]) -> str:
    """Emit the config file the serve verb consumes; result must load cleanly."""
    if not bootfiles.get("bios"):
        raise MissingBootfile("a BIOS bootloader entry is required")
    uefi = bootfiles.get("uefi") or bootfiles["bios"]

    pool_start = profile.pool_start
    pool_end = profile.pool_end
    if not pool_start or not pool_end:
        # carve a /24-style default pool next to the server address
        base = ipaddress.IPv4Address(profile.server_ip)
        net = int(base) & 0xFFFFFF00
        pool_start = str(ipaddress.IPv4Address(net + 100))
        pool_end = str(ipaddress.IPv4Address(net + 199))
    router = profile.router or profile.server_ip
    dns = ", ".join(profile.dns) if profile.dns else profile.server_ip

    lines = [
        "# generated boot-server configuration",
        f"bind_address = {profile.server_ip}",
        f"next_server = {profile.server_ip}",
        f"pool_start = {pool_start}",
        f"pool_end = {pool_end}",
        f"subnet_mask = {profile.subnet_mask}",
        f"router = {router}",
        f"dns = {dns}",
        f"bootfile_bios = {bootfiles['bios']}",
        f"bootfile_uefi = {uefi}",
        f"lease_seconds = {profile.lease_seconds}",
        f"image_port = {profile.image_port}",
        f"store_root = {profile.store_root}",
        f"image_url_template = http://{profile.server_ip}:{profile.image_port}/assets/{{path}}",
    ]
    text = "\n".join(lines) + "\n"
    from_mapping(parse_config_text(text))  # generation and the loader must not drift
    return text


def load_profile(raw: dict[str, str]) -> DeployProfile:
    """Build a profile from flat key=value text already parsed into a dict."""
    kwargs: dict = {}
    for key in ("server_ip", "cifs_user", "target_os", "store_root", "share_name",
                "pool_start", "pool_end", "subnet_mask", "router"):
        if key in raw:
            kwargs[key] = raw[key]
    if "image_port" in raw:
        kwargs["image_port"] = int(raw["image_port"])
    if "lease_seconds" in raw:
        kwargs["lease_seconds"] = int(raw["lease_seconds"])
    if "dns" in raw:
        kwargs["dns"] = tuple(p.strip() for p in raw["dns"].split(",") if p.strip())
    if "server_ip" not in kwargs:
        raise ValueError("profile needs server_ip")
    return DeployProfile(**kwargs)
