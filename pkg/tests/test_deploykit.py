"""Deployment artifact generation: port-set fidelity, golden scripts, round-trip."""

import re

import pytest

from colaboot.config import from_mapping, parse_config_text
from colaboot.deploykit import (
    TARGET_POSIX_SHELL,
    DeployProfile,
    MissingBootfile,
    UnsupportedDialect,
    firewall_port_set,
    generate_firewall_rules,
    generate_installer_script,
    generate_server_config,
    installer_filename,
    load_profile,
)
from conftest import GOLDEN

BOOTFILES = {"bios": "pxelinux.0", "uefi": "bootx64.efi"}


def windows_profile(**overrides) -> DeployProfile:
    base = dict(server_ip="192.168.10.1", image_port=8080, cifs_user="bootshare",
                store_root="C:\\boot\\store")
    base.update(overrides)
    return DeployProfile(**base)


def parse_rules(text: str) -> set[tuple[str, int]]:
    rules = set()
    for line in text.splitlines():
        m = re.match(r"allow in proto=(\w+) port=(\d+)", line)
        if m:
            rules.add((m.group(1), int(m.group(2))))
    return rules


class TestFirewallRules:
    def test_port_set_is_exactly_the_boot_service_set(self):
        rules = firewall_port_set(windows_profile())
        expected = (
            {("udp", 67), ("udp", 68), ("udp", 69)}
            | {(proto, port) for port in (137, 138, 139, 445)
               for proto in ("tcp", "udp")}
            | {("tcp", 8080)}
        )
        assert rules == expected

    def test_rendered_rules_parse_back_to_the_same_set(self):
        profile = windows_profile()
        assert parse_rules(generate_firewall_rules(profile)) == firewall_port_set(profile)

    def test_image_port_is_echoed_in_final_rule(self):
        text = generate_firewall_rules(windows_profile(image_port=9999))
        assert text.rstrip().splitlines()[-1] == "allow in proto=tcp port=9999 # image"

    def test_generation_is_deterministic(self):
        profile = windows_profile()
        assert generate_firewall_rules(profile) == generate_firewall_rules(profile)

    def test_golden_firewall(self):
        assert generate_firewall_rules(windows_profile()) == \
            (GOLDEN / "firewall.txt").read_text()


class TestInstallerScript:
    def test_windows_script_has_the_four_steps_in_order(self):
        script = generate_installer_script(windows_profile())
        smb = script.index("SMB1Protocol")
        user = script.index("net user bootshare")
        share = script.index("net share boot=C:\\boot\\store")
        start = script.index("net start")
        assert smb < user < share < start

    def test_posix_script_has_the_same_steps(self):
        script = generate_installer_script(
            windows_profile(target_os=TARGET_POSIX_SHELL, store_root="/var/lib/boot/store"))
        samba = script.index("samba")
        user = script.index("useradd")
        share = script.index("/var/lib/boot/store")
        start = script.index("systemctl restart")
        assert samba < user < share < start

    def test_unknown_dialect(self):
        with pytest.raises(UnsupportedDialect):
            generate_installer_script(windows_profile(target_os="applescript"))
        with pytest.raises(UnsupportedDialect):
            installer_filename(windows_profile(target_os="applescript"))

    def test_installer_filenames(self):
        assert installer_filename(windows_profile()) == "install.bat"
        assert installer_filename(
            windows_profile(target_os=TARGET_POSIX_SHELL)) == "install.sh"

    def test_golden_windows(self):
        assert generate_installer_script(windows_profile()) == \
            (GOLDEN / "install_windows.bat").read_text()

    def test_golden_posix(self):
        script = generate_installer_script(
            windows_profile(target_os=TARGET_POSIX_SHELL,
                            store_root="/var/lib/boot/store"))
        assert script == (GOLDEN / "install_posix.sh").read_text()


class TestServerConfig:
    def test_generated_config_loads_back(self):
        text = generate_server_config(windows_profile(), BOOTFILES)
        cfg = from_mapping(parse_config_text(text))
        assert cfg.next_server == "192.168.10.1"
        assert cfg.bootfile_bios == "pxelinux.0"
        assert cfg.bootfile_uefi == "bootx64.efi"
        assert cfg.image_port == 8080

    def test_next_server_equals_profile_ip(self):
        text = generate_server_config(windows_profile(server_ip="10.7.7.7"), BOOTFILES)
        cfg = from_mapping(parse_config_text(text))
        assert cfg.next_server == "10.7.7.7"
        assert cfg.bind_address == "10.7.7.7"

    def test_missing_bios_bootfile(self):
        with pytest.raises(MissingBootfile):
            generate_server_config(windows_profile(), {"uefi": "bootx64.efi"})

    def test_missing_uefi_falls_back_to_bios(self):
        text = generate_server_config(windows_profile(), {"bios": "pxelinux.0"})
        cfg = from_mapping(parse_config_text(text))
        assert cfg.bootfile_uefi == "pxelinux.0"

    def test_explicit_pool_respected(self):
        profile = windows_profile(pool_start="192.168.10.50", pool_end="192.168.10.60")
        cfg = from_mapping(parse_config_text(generate_server_config(profile, BOOTFILES)))
        assert (cfg.pool_start, cfg.pool_end) == ("192.168.10.50", "192.168.10.60")

    def test_golden_config(self):
        assert generate_server_config(windows_profile(), BOOTFILES) == \
            (GOLDEN / "server_config.conf").read_text()


class TestProfileLoading:
    def test_round_trip_through_flat_text(self):
        raw = parse_config_text(
            "server_ip = 10.0.0.2\nimage_port = 8081\ncifs_user = filer\n"
            "target_os = posix_shell\ndns = 10.0.0.2, 1.1.1.1\n")
        profile = load_profile(raw)
        assert profile.server_ip == "10.0.0.2"
        assert profile.image_port == 8081
        assert profile.target_os == TARGET_POSIX_SHELL
        assert profile.dns == ("10.0.0.2", "1.1.1.1")

    def test_server_ip_required(self):
        with pytest.raises(ValueError):
            load_profile({"image_port": "8080"})

    def test_bad_server_ip_rejected(self):
        with pytest.raises(Exception):
            load_profile({"server_ip": "not-an-ip"})
