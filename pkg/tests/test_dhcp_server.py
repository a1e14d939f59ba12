"""DHCP handlers: offers with boot fields, lease lifecycle, invariants."""

import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from colaboot.config import ServerConfig
from colaboot.dhcp_server import (
    BootConfig,
    LeaseTable,
    NotPxe,
    PoolExhausted,
    expire_leases,
    handle_discover,
    handle_release,
    handle_request,
    reply_destination,
)
from colaboot.netproto import ArchFamily, DhcpMessage
from colaboot.netproto import dhcp as proto


def server_config(**overrides) -> ServerConfig:
    cfg = ServerConfig(
        pool_start="192.168.10.100", pool_end="192.168.10.199",
        bind_address="192.168.10.1", subnet_mask="255.255.255.0",
        router="192.168.10.1", dns=["192.168.10.1", "8.8.8.8"],
        next_server="192.168.10.1",
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


def mac(i: int) -> bytes:
    return bytes([0x52, 0x54, 0, 0, i >> 8, i & 0xFF])


def discover(client: bytes, arch: int | None = 0, xid: int = 0x1111,
             pxe: bool = True) -> DhcpMessage:
    options = [(proto.OPT_MSG_TYPE, bytes([proto.DISCOVER]))]
    if arch is not None:
        options.append((proto.OPT_CLIENT_ARCH, struct.pack("!H", arch)))
    if pxe:
        options.append((proto.OPT_VENDOR_CLASS, b"PXEClient:Arch:00000:UNDI:002001"))
    return DhcpMessage(op=proto.BOOTREQUEST, xid=xid, client_mac=client, options=options)


def request(client: bytes, ip: str, xid: int = 0x1111) -> DhcpMessage:
    return DhcpMessage(op=proto.BOOTREQUEST, xid=xid, client_mac=client, options=[
        (proto.OPT_MSG_TYPE, bytes([proto.REQUEST])),
        (proto.OPT_REQUESTED_IP, proto.pack_ip(ip)),
        (proto.OPT_SERVER_ID, proto.pack_ip("192.168.10.1")),
    ])


def binl_fields(msg: DhcpMessage) -> tuple:
    return (msg.siaddr, msg.file, msg.option(66), msg.option(67))


class TestDiscover:
    def test_bios_client_gets_bios_bootfile(self):
        cfg = server_config()
        table = LeaseTable(cfg.pool_start, cfg.pool_end)
        offer = handle_discover(discover(mac(1), arch=0), cfg, table, now=0.0)
        assert offer.msg_type == proto.OFFER
        assert offer.file == "pxelinux.0"
        assert offer.siaddr == "192.168.10.1"
        assert offer.yiaddr == "192.168.10.100"
        assert offer.xid == 0x1111

    def test_uefi_client_gets_uefi_bootfile(self):
        cfg = server_config()
        table = LeaseTable(cfg.pool_start, cfg.pool_end)
        offer = handle_discover(discover(mac(1), arch=7), cfg, table, now=0.0)
        assert offer.file == "bootx64.efi"
        assert offer.option(67) == b"bootx64.efi"

    def test_unknown_arch_falls_back_to_bios(self):
        cfg = server_config()
        table = LeaseTable(cfg.pool_start, cfg.pool_end)
        offer = handle_discover(discover(mac(1), arch=11), cfg, table, now=0.0)
        assert offer.file == "pxelinux.0"

    def test_missing_arch_option_falls_back_to_bios(self):
        cfg = server_config()
        table = LeaseTable(cfg.pool_start, cfg.pool_end)
        offer = handle_discover(discover(mac(1), arch=None), cfg, table, now=0.0)
        assert offer.file == "pxelinux.0"

    def test_offer_carries_network_options(self):
        cfg = server_config()
        table = LeaseTable(cfg.pool_start, cfg.pool_end)
        offer = handle_discover(discover(mac(1)), cfg, table, now=0.0)
        assert offer.option(1) == proto.pack_ip("255.255.255.0")
        assert offer.option(3) == proto.pack_ip("192.168.10.1")
        assert offer.option(6) == proto.pack_ip("192.168.10.1") + proto.pack_ip("8.8.8.8")
        assert offer.option(51) == struct.pack("!I", 3600)
        assert offer.option(54) == proto.pack_ip("192.168.10.1")
        assert offer.option(66) == b"192.168.10.1"
        assert offer.option(67) == b"pxelinux.0"

    def test_pool_exhaustion_is_pigeonhole(self):
        cfg = server_config(pool_end="192.168.10.104")  # 5 addresses
        table = LeaseTable(cfg.pool_start, cfg.pool_end)
        for i in range(5):
            handle_discover(discover(mac(i)), cfg, table, now=0.0)
        with pytest.raises(PoolExhausted):
            handle_discover(discover(mac(99)), cfg, table, now=0.0)

    def test_repeat_discover_reuses_same_ip(self):
        cfg = server_config()
        table = LeaseTable(cfg.pool_start, cfg.pool_end)
        first = handle_discover(discover(mac(1)), cfg, table, now=0.0)
        again = handle_discover(discover(mac(1)), cfg, table, now=1.0)
        assert first.yiaddr == again.yiaddr
        assert len(table.offers) == 1

    def test_pxe_only_rejects_plain_dhcp(self):
        cfg = server_config(pxe_only=True)
        table = LeaseTable(cfg.pool_start, cfg.pool_end)
        with pytest.raises(NotPxe):
            handle_discover(discover(mac(1), pxe=False), cfg, table, now=0.0)
        # and the pool is untouched
        assert table.free_count(0.0) == 100

    def test_pxe_only_accepts_pxe(self):
        cfg = server_config(pxe_only=True)
        table = LeaseTable(cfg.pool_start, cfg.pool_end)
        offer = handle_discover(discover(mac(1), pxe=True), cfg, table, now=0.0)
        assert offer.msg_type == proto.OFFER

    def test_expired_offer_frees_address(self):
        cfg = server_config(pool_end="192.168.10.100")  # single address
        table = LeaseTable(cfg.pool_start, cfg.pool_end)
        handle_discover(discover(mac(1)), cfg, table, now=0.0)
        with pytest.raises(PoolExhausted):
            handle_discover(discover(mac(2)), cfg, table, now=10.0)
        # offer TTL is 30s; at t=31 the reservation lapsed
        offer = handle_discover(discover(mac(2)), cfg, table, now=31.0)
        assert offer.yiaddr == "192.168.10.100"


class TestRequest:
    def test_happy_path_activates_lease(self):
        cfg = server_config()
        table = LeaseTable(cfg.pool_start, cfg.pool_end)
        offer = handle_discover(discover(mac(1)), cfg, table, now=0.0)
        ack, lease = handle_request(request(mac(1), offer.yiaddr), cfg, table, now=1.0)
        assert ack.msg_type == proto.ACK
        assert lease is not None
        assert lease.ip == offer.yiaddr
        assert lease.expiry == 1.0 + 3600
        assert table.active[mac(1)] is lease

    def test_binl_fields_identical_between_offer_and_ack(self):
        cfg = server_config()
        table = LeaseTable(cfg.pool_start, cfg.pool_end)
        offer = handle_discover(discover(mac(1), arch=7), cfg, table, now=0.0)
        ack, _ = handle_request(request(mac(1), offer.yiaddr), cfg, table, now=1.0)
        assert binl_fields(offer) == binl_fields(ack)

    def test_mismatched_ip_gets_nak(self):
        cfg = server_config()
        table = LeaseTable(cfg.pool_start, cfg.pool_end)
        handle_discover(discover(mac(1)), cfg, table, now=0.0)
        nak, lease = handle_request(request(mac(1), "10.0.0.5"), cfg, table, now=1.0)
        assert nak.msg_type == proto.NAK
        assert lease is None
        assert mac(1) not in table.active

    def test_unknown_client_gets_nak(self):
        cfg = server_config()
        table = LeaseTable(cfg.pool_start, cfg.pool_end)
        nak, lease = handle_request(request(mac(9), "10.0.0.5"), cfg, table, now=0.0)
        assert nak.msg_type == proto.NAK
        assert lease is None

    def test_retransmitted_request_is_idempotent(self):
        cfg = server_config()
        table = LeaseTable(cfg.pool_start, cfg.pool_end)
        offer = handle_discover(discover(mac(1)), cfg, table, now=0.0)
        datagram = request(mac(1), offer.yiaddr)
        first, _ = handle_request(datagram, cfg, table, now=1.0)
        second, _ = handle_request(datagram, cfg, table, now=1.0)
        assert first == second
        assert len(table.active) == 1

    def test_renewal_extends_expiry(self):
        cfg = server_config()
        table = LeaseTable(cfg.pool_start, cfg.pool_end)
        offer = handle_discover(discover(mac(1)), cfg, table, now=0.0)
        handle_request(request(mac(1), offer.yiaddr), cfg, table, now=1.0)
        renew = DhcpMessage(op=proto.BOOTREQUEST, xid=0x2222, client_mac=mac(1),
                            ciaddr=offer.yiaddr,
                            options=[(proto.OPT_MSG_TYPE, bytes([proto.REQUEST]))])
        ack, lease = handle_request(renew, cfg, table, now=1800.0)
        assert ack.msg_type == proto.ACK
        assert lease.expiry == 1800.0 + 3600

    def test_release_expires_immediately(self):
        cfg = server_config()
        table = LeaseTable(cfg.pool_start, cfg.pool_end)
        offer = handle_discover(discover(mac(1)), cfg, table, now=0.0)
        handle_request(request(mac(1), offer.yiaddr), cfg, table, now=1.0)
        release = DhcpMessage(op=proto.BOOTREQUEST, client_mac=mac(1),
                              options=[(proto.OPT_MSG_TYPE, bytes([proto.RELEASE]))])
        assert handle_release(release, table)
        assert mac(1) not in table.active


class TestExpiry:
    def _leased_table(self, cfg, expiries):
        table = LeaseTable(cfg.pool_start, cfg.pool_end)
        for i, expiry in enumerate(expiries):
            offer = handle_discover(discover(mac(i)), cfg, table, now=0.0)
            _, lease = handle_request(request(mac(i), offer.yiaddr), cfg, table, now=0.0)
            lease.expiry = expiry
        return table

    def test_one_of_three_expired(self):
        cfg = server_config()
        table = self._leased_table(cfg, [10.0, 100.0, 100.0])
        free_before = table.free_count(50.0)
        assert expire_leases(table, 50.0) == 1
        assert table.free_count(50.0) == free_before + 1

    def test_empty_table(self):
        cfg = server_config()
        table = LeaseTable(cfg.pool_start, cfg.pool_end)
        assert expire_leases(table, 1e9) == 0

    def test_boundary_is_strict(self):
        cfg = server_config()
        table = self._leased_table(cfg, [50.0])
        assert expire_leases(table, 50.0) == 0  # expiry == now is retained
        assert expire_leases(table, 50.000001) == 1


class TestInvariants:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 30), st.booleans()), min_size=1, max_size=60))
    def test_active_leases_map_ips_injectively(self, actions):
        cfg = server_config(pool_end="192.168.10.119")  # 20 addresses
        table = LeaseTable(cfg.pool_start, cfg.pool_end)
        now = 0.0
        for client, confirm in actions:
            now += 1.0
            try:
                offer = handle_discover(discover(mac(client)), cfg, table, now=now)
            except PoolExhausted:
                continue
            if confirm:
                handle_request(request(mac(client), offer.yiaddr), cfg, table, now=now)
            ips = [l.ip for l in table.active.values()]
            assert len(ips) == len(set(ips))
            macs = {l.ip: l.mac for l in table.active.values()}
            assert len(macs) == len(ips)

    def test_bootconfig_requires_bios_and_uefi(self):
        with pytest.raises(ValueError):
            BootConfig(next_server="1.2.3.4",
                       bootfile_by_arch={ArchFamily.LEGACY_BIOS: "pxelinux.0"})


class TestReplyDestination:
    def test_relay_goes_back_through_relay(self):
        msg = DhcpMessage(giaddr="10.0.0.1")
        assert reply_destination(msg, ("10.9.9.9", 67)) == ("10.0.0.1", 67)

    def test_bound_client_gets_unicast(self):
        msg = DhcpMessage(ciaddr="192.168.10.50")
        assert reply_destination(msg, ("192.168.10.50", 68)) == ("192.168.10.50", 68)

    def test_broadcast_flag_honored(self):
        msg = DhcpMessage(flags=proto.FLAG_BROADCAST)
        assert reply_destination(msg, ("192.168.10.50", 68)) == ("255.255.255.255", 68)

    def test_unbound_source_forces_broadcast(self):
        msg = DhcpMessage()
        assert reply_destination(msg, ("0.0.0.0", 68)) == ("255.255.255.255", 68)

    def test_routable_source_answered_directly(self):
        msg = DhcpMessage()
        assert reply_destination(msg, ("127.0.0.5", 41234)) == ("127.0.0.5", 41234)
