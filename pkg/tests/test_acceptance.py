"""Acceptance suite: every release criterion, one pass/fail line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the criterion lines.
These tests drive the real servers over loopback through the public CLI and
wire protocols wherever the criterion allows it.
"""

import contextlib
import hashlib
import json
import random
import socket
import struct
import time

import pytest
from hypothesis import given, settings

from colaboot import client_sim
from colaboot.bootlab import AssetSizes, BootLab
from colaboot.boot_session import BootState, BootTracker
from colaboot.cli import main
from colaboot.config import from_mapping, parse_config_text
from colaboot.deploykit import (
    DeployProfile,
    firewall_port_set,
    generate_firewall_rules,
    generate_server_config,
)
from colaboot.netproto import CodecError, decode_dhcp, decode_tftp, encode_dhcp
from colaboot.netproto import dhcp as dhcpproto
from test_dhcp_codec import dhcp_messages
from test_tftp_codec import _packets as tftp_packets


@pytest.fixture
def criterion(capsys):
    """Context manager printing one ACCEPTANCE n: PASS/FAIL line per criterion."""

    @contextlib.contextmanager
    def _report(number: int, name: str):
        try:
            yield
        except BaseException:
            with capsys.disabled():
                print(f"\nACCEPTANCE {number} {name}: FAIL")
            raise
        with capsys.disabled():
            print(f"\nACCEPTANCE {number} {name}: PASS")

    return _report


def fetched_digests_match(result: dict, manifest: dict) -> bool:
    by_role = {}
    for entry in manifest["assets"]:
        by_role.setdefault(entry["role"], set()).add(entry["digest"])
    return all(result["fetched"][role]["digest"] in by_role[role]
               for role in ("bootloader", "config", "kernel", "initrd", "image"))


class TestCriterion1EndToEndBoot:
    def test_single_client_full_size_boot(self, criterion, capsys):
        """64 KiB loader + 1 KiB config + 8 MiB kernel + 16 MiB initrd + 64 MiB image."""
        with criterion(1, "end-to-end loopback boot"):
            started = time.monotonic()
            rc = main(["simulate", "--clients", "1", "--loss", "0", "--seed", "1",
                       "--json"])
            elapsed = time.monotonic() - started
            out = capsys.readouterr().out
            assert rc == 0
            doc = json.loads(out)

            assert doc["report"]["booted"] == 1
            result = doc["results"][0]
            assert result["ok"] is True
            sizes = {role: item["bytes"] for role, item in result["fetched"].items()}
            assert sizes == {"bootloader": 64 * 1024, "config": 1024,
                             "kernel": 8 * 1024 * 1024, "initrd": 16 * 1024 * 1024,
                             "image": 64 * 1024 * 1024}
            assert fetched_digests_match(result, doc["manifest"])
            assert doc["report"]["throughput_bytes_per_s"] > 0
            assert elapsed < 30, f"boot took {elapsed:.1f}s, budget is 30s"


class TestCriterion2FleetBoot:
    def test_25_clients_25_distinct_leases(self, criterion, capsys):
        with criterion(2, "fleet boot"):
            started = time.monotonic()
            rc = main(["simulate", "--clients", "25", "--loss", "0", "--seed", "2",
                       "--pool-size", "100", "--json"])
            elapsed = time.monotonic() - started
            out = capsys.readouterr().out
            assert rc == 0
            doc = json.loads(out)

            assert doc["report"]["booted"] == 25
            assert all(r["ok"] for r in doc["results"])
            leases = [r["lease"] for r in doc["results"]]
            assert len(set(leases)) == 25  # injective lease assignment
            assert all(fetched_digests_match(r, doc["manifest"])
                       for r in doc["results"])
            assert elapsed < 120, f"fleet took {elapsed:.1f}s, budget is 120s"


class TestCriterion3LossResilience:
    def test_ten_seeds_at_ten_percent_loss(self, criterion):
        """Every lossy run completes with correct digests or fails cleanly."""
        with criterion(3, "loss resilience"):
            sizes = AssetSizes(bootloader=16 * 1024, config=1024, kernel=64 * 1024,
                               initrd=128 * 1024, image=256 * 1024)
            with BootLab(sizes=sizes, pool_size=20, tftp_timeout=0.1,
                         tftp_retries=12) as lab:
                endpoints = lab.endpoints()
                template = client_sim.SimClientConfig(
                    mac=client_sim.fleet_mac(0), loss_rate=0.1, seed=0,
                    blksize_request=512, tftp_timeout=0.1, tftp_retries=20)
                results = client_sim.run_fleet(10, template, endpoints)

                manifest = {e.role: e.digest for e in endpoints.manifest.assets
                            if e.role != "bootloader"}
                bootloaders = {e.digest for e in endpoints.manifest.assets
                               if e.role == "bootloader"}
                wrong_digest_completions = 0
                for result in results:
                    if result.ok:
                        for role, (_, digest) in result.fetched.items():
                            expected_ok = (digest in bootloaders if role == "bootloader"
                                           else digest == manifest[role])
                            if not expected_ok:
                                wrong_digest_completions += 1
                    else:
                        assert result.error, "failure must carry a reason"
                assert wrong_digest_completions == 0
                # the retry budget should carry most seeds through 10% loss
                assert sum(1 for r in results if r.ok) >= 8


class TestCriterion4CodecRoundTrip:
    @settings(max_examples=500, deadline=None)
    @given(dhcp_messages())
    def test_dhcp_round_trip_500(self, msg):
        assert decode_dhcp(encode_dhcp(msg)) == msg

    @settings(max_examples=500, deadline=None)
    @given(tftp_packets)
    def test_tftp_round_trip_500(self, pkt):
        from colaboot.netproto import encode_tftp
        assert decode_tftp(encode_tftp(pkt)) == pkt

    def test_fuzz_10000_buffers_zero_crashes(self, criterion):
        with criterion(4, "codec round-trip and fuzz"):
            rng = random.Random(0xC0DEC)
            for _ in range(10_000):
                buf = rng.randbytes(rng.randrange(0, 600))
                for decoder in (decode_dhcp, decode_tftp):
                    try:
                        decoder(buf)
                    except CodecError:
                        pass  # typed rejection is the contract; anything else crashes


class TestCriterion5AtomicUpdate:
    def test_mid_boot_client_stays_on_old_version(self, criterion):
        with criterion(5, "atomic update with per-boot pinning"):
            sizes = AssetSizes(bootloader=16 * 1024, config=1024, kernel=128 * 1024,
                               initrd=256 * 1024, image=1024 * 1024)
            with BootLab(sizes=sizes, pool_size=10) as lab:
                v1_endpoints = lab.endpoints()
                v1_digests = {e.path: e.digest for e in v1_endpoints.manifest.assets}
                switched = []

                def flip_mid_boot(phase):
                    if phase == "kernel" and not switched:
                        lab.publish_version(2, seed=999)
                        report = lab.sync()
                        assert report.new_version == 2
                        switched.append(True)

                first = client_sim.run_boot(
                    client_sim.SimClientConfig(mac=client_sim.fleet_mac(1)),
                    v1_endpoints, phase_hook=flip_mid_boot)
                assert switched, "sync hook never fired"
                assert first.ok, first.error
                assert first.manifest_version == 1
                # every byte fetched mid-flip verifies against version 1
                assert first.fetched["kernel"][1] == v1_digests["vmlinuz"]
                assert first.fetched["initrd"][1] == v1_digests["initrd.img"]
                assert first.fetched["image"][1] == v1_digests["os-image.sqfs"]

                # the next boot picks up version 2
                v2_endpoints = lab.endpoints()
                assert v2_endpoints.manifest.version == 2
                second = client_sim.run_boot(
                    client_sim.SimClientConfig(mac=client_sim.fleet_mac(2)),
                    v2_endpoints)
                assert second.ok, second.error
                assert second.manifest_version == 2
                v2_digests = {e.path: e.digest for e in v2_endpoints.manifest.assets}
                assert second.fetched["kernel"][1] == v2_digests["vmlinuz"]
                assert second.fetched["kernel"][1] != v1_digests["vmlinuz"]


class TestCriterion6ArchDispatch:
    def _discover(self, arch_code: int, xid: int) -> bytes:
        vendor = f"PXEClient:Arch:{arch_code:05d}:UNDI:002001".encode()
        return encode_dhcp(dhcpproto.DhcpMessage(
            op=dhcpproto.BOOTREQUEST, xid=xid, client_mac=bytes([0x52, 0, 0, 0, 0, arch_code]),
            options=[
                (dhcpproto.OPT_MSG_TYPE, bytes([dhcpproto.DISCOVER])),
                (dhcpproto.OPT_CLIENT_ARCH, struct.pack("!H", arch_code)),
                (dhcpproto.OPT_VENDOR_CLASS, vendor),
            ]))

    def test_bios_and_uefi_get_their_bootfiles(self, criterion):
        with criterion(6, "architecture dispatch"):
            sizes = AssetSizes(bootloader=4096, config=512, kernel=8192,
                               initrd=8192, image=8192)
            with BootLab(sizes=sizes, pool_size=10) as lab:
                sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
                sock.bind(("127.0.0.1", 0))
                sock.settimeout(5)
                offers = {}
                for arch_code, xid in ((0, 0x10), (7, 0x17)):
                    sock.sendto(self._discover(arch_code, xid),
                                ("127.0.0.1", lab.stack.dhcp.port))
                    raw, _ = sock.recvfrom(2048)
                    offers[arch_code] = decode_dhcp(raw)
                sock.close()
                assert offers[0].file == "pxelinux.0"
                assert offers[0].option(67) == b"pxelinux.0"
                assert offers[7].file == "bootx64.efi"
                assert offers[7].option(67) == b"bootx64.efi"


class TestCriterion7DeploykitFidelity:
    def test_firewall_set_and_config_round_trip(self, criterion):
        with criterion(7, "deploykit fidelity"):
            profile = DeployProfile(server_ip="192.168.10.1", image_port=8080)
            expected = (
                {("udp", 67), ("udp", 68), ("udp", 69)}
                | {(proto, port) for port in (137, 138, 139, 445)
                   for proto in ("tcp", "udp")}
                | {("tcp", 8080)}
            )
            assert firewall_port_set(profile) == expected
            rendered = generate_firewall_rules(profile)
            seen = set()
            for line in rendered.splitlines():
                if line.startswith("allow in"):
                    parts = dict(p.split("=") for p in line.split()[2:4])
                    seen.add((parts["proto"], int(parts["port"])))
            assert seen == expected

            text = generate_server_config(profile, {"bios": "pxelinux.0",
                                                    "uefi": "bootx64.efi"})
            cfg = from_mapping(parse_config_text(text))
            assert cfg.next_server == "192.168.10.1"
            assert cfg.bootfile_bios == "pxelinux.0"


class TestCriterion8BlockWrap:
    def test_600_kib_at_blksize_8_wraps_past_65535(self, criterion):
        with criterion(8, "block-number wrap"):
            kernel_bytes = 600 * 1024
            assert kernel_bytes // 8 > 65535  # the transfer must wrap
            sizes = AssetSizes(bootloader=4096, config=512, kernel=kernel_bytes,
                               initrd=8192, image=16384)
            with BootLab(sizes=sizes, pool_size=10) as lab:
                endpoints = lab.endpoints()
                result = client_sim.run_boot(
                    client_sim.SimClientConfig(mac=client_sim.fleet_mac(3),
                                               blksize_request=8),
                    endpoints)
                assert result.ok, result.error
                expected = endpoints.manifest.entry("vmlinuz")
                assert result.fetched["kernel"] == (kernel_bytes, expected.digest)


class TestCriterion9ReadOnlyStore:
    def test_fleet_boot_never_writes_to_activated_content(self, criterion):
        with criterion(9, "read-only store guarantee"):
            sizes = AssetSizes(bootloader=16 * 1024, config=1024, kernel=64 * 1024,
                               initrd=128 * 1024, image=256 * 1024)
            with BootLab(sizes=sizes, pool_size=20) as lab:
                store_root = lab.store.root

                def fingerprint():
                    out = {}
                    for path in sorted(store_root.rglob("*")):
                        if path.is_file():
                            stat = path.stat()
                            out[str(path)] = (stat.st_size, stat.st_mtime_ns,
                                              hashlib.sha256(path.read_bytes()).hexdigest())
                    return out

                before = fingerprint()
                results = client_sim.run_fleet(
                    5, client_sim.SimClientConfig(mac=client_sim.fleet_mac(0), seed=9),
                    lab.endpoints())
                assert all(r.ok for r in results)
                time.sleep(0.3)  # let late server-side events settle
                after = fingerprint()
                assert after == before, "store content changed during a fleet boot"


class TestTrackerReachesBooted:
    def test_criterion_1_companion_tracker_state(self):
        """The tracked session for a clean boot terminates in Booted."""
        sizes = AssetSizes(bootloader=8192, config=512, kernel=16384,
                           initrd=16384, image=32768)
        with BootLab(sizes=sizes, pool_size=10) as lab:
            result = client_sim.run_boot(
                client_sim.SimClientConfig(mac=client_sim.fleet_mac(4)),
                lab.endpoints())
            assert result.ok
            tracker = BootTracker()
            tracker.feed(result.events)
            session = tracker.sessions()[0]
            assert session.state is BootState.BOOTED
            assert session.bytes_image == 32768
