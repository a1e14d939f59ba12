"""Command-line entrypoint: serve, sync, verify, generate, simulate, status, gc.

Exit codes follow the contract in docs/cli.md: 0 success, 1 failed
verification or failed boots or bad usage, 2 unreachable sync remote.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path

from . import asset_store, bootlab, client_sim, deploykit
from .asset_store import AssetStore, RemoteUnreachable, StoreError, VerificationFailed
from .boot_session import BootEvent, BootTracker
from .config import ConfigInvalid, load_config, parse_config_text
from .stack import PortInUse, ServiceStack

logger = logging.getLogger("colaboot.cli")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_UNREACHABLE = 2


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default="colaboot.conf", help="config file path")
    parser.add_argument("--json", action="store_true", help="machine-readable output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="colaboot",
        description="diskless network-boot server suite",
    )
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run DHCP + TFTP + image services until interrupted")
    _add_common(p)

    p = sub.add_parser("sync", help="one-shot sync from the configured remote source")
    _add_common(p)

    p = sub.add_parser("verify", help="verify the active manifest against stored content")
    _add_common(p)

    p = sub.add_parser("status", help="render the boot-session table from the event log")
    _add_common(p)

    p = sub.add_parser("gc", help="delete blobs referenced by no manifest version")
    _add_common(p)

    p = sub.add_parser("generate", help="write firewall rules, installer, server config")
    p.add_argument("--profile", required=True, help="deploy profile file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("simulate",
                       help="boot simulated PXE clients against an in-process stack")
    p.add_argument("--clients", type=int, default=1)
    p.add_argument("--loss", type=float, default=0.0, help="datagram loss probability")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--arch", choices=["bios", "uefi"], default="bios")
    p.add_argument("--pool-size", type=int, default=100)
    p.add_argument("--bootloader-bytes", type=int, default=64 * 1024)
    p.add_argument("--config-bytes", type=int, default=1024)
    p.add_argument("--kernel-bytes", type=int, default=8 * 1024 * 1024)
    p.add_argument("--initrd-bytes", type=int, default=16 * 1024 * 1024)
    p.add_argument("--image-bytes", type=int, default=64 * 1024 * 1024)
    p.add_argument("--blksize", type=int, default=16384)
    p.add_argument("--json", action="store_true")

    return parser


def _load(args):
    try:
        return load_config(args.config)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return None


def cmd_serve(args) -> int:
    cfg = _load(args)
    if cfg is None:
        return EXIT_FAILED
    stack = ServiceStack(cfg)
    stop = threading.Event()

    def _interrupt(signum, frame):
        stop.set()

    signal.signal(signal.SIGINT, _interrupt)
    signal.signal(signal.SIGTERM, _interrupt)
    try:
        stack.start()
    except PortInUse as exc:
        print(f"startup failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except (StoreError, RemoteUnreachable) as exc:
        print(f"startup failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    eps = stack.endpoints()
    print(f"serving: dhcp={eps['dhcp'][1]} tftp={eps['tftp'][1]} image={eps['image_url']}",
          flush=True)
    try:
        stop.wait()
    finally:
        stack.stop()
    print("shut down cleanly", flush=True)
    return EXIT_OK


def cmd_sync(args) -> int:
    cfg = _load(args)
    if cfg is None:
        return EXIT_FAILED
    if not cfg.sync_source:
        print("no sync_source configured", file=sys.stderr)
        return EXIT_FAILED
    store = AssetStore(cfg.store_root)
    try:
        report = asset_store.sync_once(cfg.sync_source, store)
    except RemoteUnreachable as exc:
        print(f"remote unreachable: {exc}", file=sys.stderr)
        return EXIT_UNREACHABLE
    except (VerificationFailed, StoreError) as exc:
        print(f"sync failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    if args.json:
        print(json.dumps({"fetched": report.fetched, "bytes": report.bytes,
                          "new_version": report.new_version}))
    elif report.new_version is None:
        print("store already current")
    else:
        print(f"activated version {report.new_version} "
              f"({report.fetched} objects, {report.bytes} bytes)")
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = _load(args)
    if cfg is None:
        return EXIT_FAILED
    store = AssetStore(cfg.store_root)
    try:
        report = store.verify()
    except StoreError as exc:
        print(f"verify failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    if args.json:
        print(json.dumps({"ok": report.ok,
                          "items": [{"path": i.path, "status": i.status}
                                    for i in report.items]}))
    else:
        for item in report.items:
            print(f"{item.status:16} {item.path}")
    return EXIT_OK if report.ok else EXIT_FAILED


def cmd_status(args) -> int:
    cfg = _load(args)
    if cfg is None:
        return EXIT_FAILED
    tracker = BootTracker()
    log_path = Path(cfg.event_log) if cfg.event_log else None
    if log_path and log_path.is_file():
        with open(log_path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line:
                    tracker.record_event(BootEvent.from_json(line))
    report = tracker.report()
    if args.json:
        print(report.to_json())
    else:
        _print_report(report)
    return EXIT_OK


def cmd_gc(args) -> int:
    cfg = _load(args)
    if cfg is None:
        return EXIT_FAILED
    store = AssetStore(cfg.store_root)
    removed = store.gc()
    if args.json:
        print(json.dumps({"removed": removed}))
    else:
        print(f"removed {len(removed)} unreferenced blobs")
    return EXIT_OK


def cmd_generate(args) -> int:
    try:
        raw = parse_config_text(Path(args.profile).read_text())
        profile = deploykit.load_profile(raw)
    except (OSError, ValueError, ConfigInvalid) as exc:
        print(f"bad profile: {exc}", file=sys.stderr)
        return EXIT_FAILED
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bootfiles = {"bios": raw.get("bootfile_bios", "pxelinux.0"),
                 "uefi": raw.get("bootfile_uefi", "bootx64.efi")}
    try:
        firewall = deploykit.generate_firewall_rules(profile)
        installer = deploykit.generate_installer_script(profile)
        server_cfg = deploykit.generate_server_config(profile, bootfiles)
    except (deploykit.UnsupportedDialect, deploykit.MissingBootfile) as exc:
        print(f"generation failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    written = {
        "firewall.txt": firewall,
        deploykit.installer_filename(profile): installer,
        "colaboot.conf": server_cfg,
    }
    for name, text in written.items():
        (out / name).write_text(text)
    if args.json:
        print(json.dumps({"written": sorted(written)}))
    else:
        for name in written:
            print(f"wrote {out / name}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    sizes = bootlab.AssetSizes(
        bootloader=args.bootloader_bytes, config=args.config_bytes,
        kernel=args.kernel_bytes, initrd=args.initrd_bytes, image=args.image_bytes,
    )
    arch_code = 0 if args.arch == "bios" else 7
    lab = bootlab.BootLab(sizes=sizes, pool_size=args.pool_size, seed=args.seed + 1)
    try:
        lab.start()
        template = client_sim.SimClientConfig(
            mac=client_sim.fleet_mac(0), arch_code=arch_code,
            loss_rate=args.loss, seed=args.seed, blksize_request=args.blksize,
        )
        endpoints = lab.endpoints()
        results = client_sim.run_fleet(args.clients, template, endpoints)
        manifest_doc = endpoints.manifest.to_dict()
    finally:
        lab.stop()

    tracker = BootTracker()
    for result in results:
        tracker.feed(result.events)
    report = tracker.report()

    if args.json:
        print(json.dumps({"results": [r.to_dict() for r in results],
                          "report": report.to_dict(),
                          "manifest": manifest_doc}, indent=2))
    else:
        for r in results:
            status = "ok" if r.ok else f"FAILED ({r.error})"
            print(f"{r.mac}  lease={r.lease or '-':15}  "
                  f"total={r.durations.get('total', 0):.2f}s  {status}")
        _print_report(report)
    return EXIT_OK if all(r.ok for r in results) else EXIT_FAILED


def _print_report(report) -> None:
    print(f"sessions={report.sessions} booted={report.booted} "
          f"failed={report.failed} in_progress={report.in_progress}")
    if report.p50_seconds is not None:
        print(f"boot time p50={report.p50_seconds:.2f}s p95={report.p95_seconds:.2f}s")
    if report.throughput_bytes_per_s is not None:
        print(f"throughput {report.throughput_bytes_per_s / 1e6:.1f} MB/s "
              f"(tftp {report.total_bytes_tftp} B, image {report.total_bytes_image} B)")
    for entry in report.entries:
        dur = f"{entry.duration_seconds:.2f}s" if entry.duration_seconds is not None else "-"
        print(f"  {entry.client_id:20} {entry.state:20} v{entry.manifest_version or '-'} "
              f"tftp={entry.bytes_tftp} image={entry.bytes_image} {dur}")


_COMMANDS = {
    "serve": cmd_serve,
    "sync": cmd_sync,
    "verify": cmd_verify,
    "status": cmd_status,
    "gc": cmd_gc,
    "generate": cmd_generate,
    "simulate": cmd_simulate,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
