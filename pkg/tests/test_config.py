"""Config parsing, validation, and environment overrides."""

import pytest

from colaboot.config import (
    ConfigInvalid,
    ServerConfig,
    env_overrides,
    from_mapping,
    load_config,
    parse_config_text,
)

GOOD = """
# boot server
bind_address = 192.168.10.1
pool_start = 192.168.10.100
pool_end   = 192.168.10.199
subnet_mask = 255.255.255.0
router = 192.168.10.1
dns = 192.168.10.1, 8.8.8.8
next_server = 192.168.10.1
bootfile_bios = pxelinux.0
bootfile_uefi = bootx64.efi
lease_seconds = 7200
pxe_only = true
tftp_blksize_max = 1428
image_port = 8080
store_root = /var/lib/boot/store
sync_source = http://drive.example/exports
"""


class TestParsing:
    def test_full_config_parses(self, tmp_path):
        path = tmp_path / "colaboot.conf"
        path.write_text(GOOD)
        cfg = load_config(path, env={})
        assert cfg.pool_start == "192.168.10.100"
        assert cfg.dns == ["192.168.10.1", "8.8.8.8"]
        assert cfg.pxe_only is True
        assert cfg.lease_seconds == 7200
        assert cfg.sync_source == "http://drive.example/exports"

    def test_comments_and_blank_lines_ignored(self):
        raw = parse_config_text("# hi\n\nkey = value # trailing\n")
        assert raw == {"key": "value"}

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigInvalid):
            parse_config_text("just words\n")

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigInvalid, match="unknown keys"):
            from_mapping({"pool_start": "10.0.0.1", "pool_end": "10.0.0.2",
                          "next_server": "10.0.0.1", "warp_factor": "9"})

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(ConfigInvalid):
            load_config(tmp_path / "absent.conf", env={})


class TestValidation:
    def base(self, **overrides):
        raw = {"pool_start": "10.0.0.100", "pool_end": "10.0.0.150",
               "next_server": "10.0.0.1"}
        raw.update(overrides)
        return raw

    def test_minimal_valid(self):
        cfg = from_mapping(self.base())
        assert isinstance(cfg, ServerConfig)
        assert cfg.next_server == "10.0.0.1"

    def test_pool_required(self):
        with pytest.raises(ConfigInvalid, match="pool_start"):
            from_mapping({"next_server": "10.0.0.1"})

    def test_reversed_pool_rejected(self):
        with pytest.raises(ConfigInvalid, match="precedes"):
            from_mapping(self.base(pool_start="10.0.0.200"))

    def test_bad_ip_rejected(self):
        with pytest.raises(ConfigInvalid, match="IPv4"):
            from_mapping(self.base(router="not-an-ip"))

    def test_bad_port_rejected(self):
        with pytest.raises(ConfigInvalid, match="port"):
            from_mapping(self.base(image_port="70000"))

    def test_bad_bool_rejected(self):
        with pytest.raises(ConfigInvalid, match="boolean"):
            from_mapping(self.base(pxe_only="perhaps"))

    def test_next_server_defaults_to_bind_address(self):
        cfg = from_mapping({"pool_start": "10.0.0.100", "pool_end": "10.0.0.150",
                            "bind_address": "10.0.0.1"})
        assert cfg.next_server == "10.0.0.1"

    def test_wildcard_bind_needs_explicit_next_server(self):
        with pytest.raises(ConfigInvalid, match="next_server"):
            from_mapping({"pool_start": "10.0.0.100", "pool_end": "10.0.0.150"})

    def test_blksize_bounds(self):
        with pytest.raises(ConfigInvalid, match="blksize"):
            from_mapping(self.base(tftp_blksize_max="4"))
        with pytest.raises(ConfigInvalid, match="blksize"):
            from_mapping(self.base(tftp_blksize_max="70000"))

    def test_port_collision_rejected(self):
        with pytest.raises(ConfigInvalid, match="collide"):
            from_mapping(self.base(dhcp_port="69", tftp_port="69"))

    def test_ephemeral_ports_may_collide(self):
        cfg = from_mapping(self.base(dhcp_port="0", tftp_port="0"))
        assert cfg.dhcp_port == 0


class TestEnvOverrides:
    def test_prefix_mapping(self):
        env = {"COLABOOT_POOL_START": "10.1.0.5", "PATH": "/bin",
               "COLABOOT_PXE_ONLY": "yes"}
        assert env_overrides(env) == {"pool_start": "10.1.0.5", "pxe_only": "yes"}

    def test_env_wins_over_file(self, tmp_path):
        path = tmp_path / "colaboot.conf"
        path.write_text(GOOD)
        cfg = load_config(path, env={"COLABOOT_LEASE_SECONDS": "60"})
        assert cfg.lease_seconds == 60

    def test_env_override_is_validated_too(self, tmp_path):
        path = tmp_path / "colaboot.conf"
        path.write_text(GOOD)
        with pytest.raises(ConfigInvalid):
            load_config(path, env={"COLABOOT_POOL_END": "bogus"})
