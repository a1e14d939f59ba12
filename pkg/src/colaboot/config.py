"""Server configuration: flat ``key = value`` file, COLABOOT_* env overrides.

Every key is validated before any socket opens; a bad config never gets a
half-started server. The full grammar and key list live in docs/config.md.
"""

from __future__ import annotations

import ipaddress
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

ENV_PREFIX = "COLABOOT_"

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigInvalid(Exception):
    pass


@dataclass
class ServerConfig:
    pool_start: str = ""
    pool_end: str = ""
    bind_address: str = "0.0.0.0"
    dhcp_port: int = 67
    tftp_port: int = 69
    image_port: int = 8080
    subnet_mask: str = "255.255.255.0"
    router: str = "0.0.0.0"
    dns: list[str] = field(default_factory=list)
    next_server: str = ""
    bootfile_bios: str = "pxelinux.0"
    bootfile_uefi: str = "bootx64.efi"
    bootfile_uefi32: str = ""
    lease_seconds: int = 3600
    offer_ttl_seconds: int = 30
    pxe_only: bool = False
    tftp_blksize_max: int = 1428
    tftp_timeout: float = 1.0
    tftp_retries: int = 5
    store_root: str = "store"
    sync_source: str = ""
    sync_interval: int = 300
    image_url_template: str = ""
    event_log: str = ""


def _parse_bool(key: str, raw: str) -> bool:
    low = raw.strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ConfigInvalid(f"{key}: expected a boolean, got {raw!r}")


def _parse_int(key: str, raw: str) -> int:
    try:
        return int(raw.strip())
    except ValueError:
        raise ConfigInvalid(f"{key}: expected an integer, got {raw!r}") from None


def _parse_float(key: str, raw: str) -> float:
    try:
        return float(raw.strip())
    except ValueError:
        raise ConfigInvalid(f"{key}: expected a number, got {raw!r}") from None


def parse_config_text(text: str) -> dict[str, str]:
    """Parse the flat key = value grammar; '#' starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigInvalid(f"line {lineno}: expected key = value, got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip().lower()
        if not key:
            raise ConfigInvalid(f"line {lineno}: empty key")
        out[key] = value.strip()
    return out


def _ip(key: str, raw: str) -> str:
    try:
        return str(ipaddress.IPv4Address(raw.strip()))
    except (ipaddress.AddressValueError, ValueError):
        raise ConfigInvalid(f"{key}: not an IPv4 address: {raw!r}") from None


def _port(key: str, value: int) -> int:
    if not 0 <= value <= 65535:
        raise ConfigInvalid(f"{key}: port {value} outside 0-65535")
    return value


def from_mapping(raw: dict[str, str]) -> ServerConfig:
    """Build and validate a ServerConfig from string key/values."""
    known = {f.name for f in fields(ServerConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigInvalid(f"unknown keys: {', '.join(sorted(unknown))}")

    cfg = ServerConfig()
    for key, value in raw.items():
        if key in ("dhcp_port", "tftp_port", "image_port"):
            setattr(cfg, key, _port(key, _parse_int(key, value)))
        elif key in ("lease_seconds", "offer_ttl_seconds", "tftp_blksize_max",
                     "tftp_retries", "sync_interval"):
            setattr(cfg, key, _parse_int(key, value))
        elif key == "tftp_timeout":
            cfg.tftp_timeout = _parse_float(key, value)
        elif key == "pxe_only":
            cfg.pxe_only = _parse_bool(key, value)
        elif key == "dns":
            cfg.dns = [_ip("dns", part) for part in value.split(",") if part.strip()]
        elif key in ("pool_start", "pool_end", "subnet_mask", "router",
                     "next_server", "bind_address"):
            setattr(cfg, key, _ip(key, value))
        else:
            setattr(cfg, key, value)

    validate(cfg)
    return cfg


def validate(cfg: ServerConfig) -> None:
    if not cfg.pool_start or not cfg.pool_end:
        raise ConfigInvalid("pool_start and pool_end are required")
    start = ipaddress.IPv4Address(cfg.pool_start)
    end = ipaddress.IPv4Address(cfg.pool_end)
    if int(end) < int(start):
        raise ConfigInvalid(f"pool_end {end} precedes pool_start {start}")
    try:
        ipaddress.IPv4Address(cfg.subnet_mask)
    except ValueError:
        raise ConfigInvalid(f"subnet_mask invalid: {cfg.subnet_mask!r}") from None
    if not cfg.next_server:
        cfg.next_server = cfg.bind_address
    if cfg.next_server == "0.0.0.0":
        raise ConfigInvalid("next_server (or a concrete bind_address) is required")
    if not cfg.bootfile_bios:
        raise ConfigInvalid("bootfile_bios is required")
    if not cfg.bootfile_uefi:
        raise ConfigInvalid("bootfile_uefi is required")
    if cfg.lease_seconds <= 0:
        raise ConfigInvalid("lease_seconds must be positive")
    if cfg.offer_ttl_seconds <= 0:
        raise ConfigInvalid("offer_ttl_seconds must be positive")
    if not 8 <= cfg.tftp_blksize_max <= 65464:
        raise ConfigInvalid(f"tftp_blksize_max {cfg.tftp_blksize_max} outside 8-65464")
    if cfg.tftp_timeout <= 0:
        raise ConfigInvalid("tftp_timeout must be positive")
    if cfg.tftp_retries < 0:
        raise ConfigInvalid("tftp_retries must be >= 0")
    if cfg.sync_interval <= 0:
        raise ConfigInvalid("sync_interval must be positive")
    # port 0 means "ephemeral, kernel-assigned", so only real ports can collide
    if cfg.dhcp_port and cfg.dhcp_port == cfg.tftp_port:
        raise ConfigInvalid("dhcp_port and tftp_port collide")


def env_overrides(env: dict[str, str] | None = None) -> dict[str, str]:
    """COLABOOT_<KEY> variables, mapped 1:1 to lowercase config keys."""
    if env is None:
        env = dict(os.environ)
    out = {}
    for name, value in env.items():
        if name.startswith(ENV_PREFIX):
            out[name[len(ENV_PREFIX):].lower()] = value
    return out


def load_config(path: str | Path, env: dict[str, str] | None = None) -> ServerConfig:
    """Read a config file, overlay COLABOOT_* variables, validate everything."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    raw = parse_config_text(text)
    raw.update(env_overrides(env))
    return from_mapping(raw)
