"""Per-client boot-session tracking across the DHCP, TFTP, and image phases.

Each client walks a fixed ladder of states; any out-of-order jump marks the
session failed rather than crashing the tracker. A session whose first
observed event is not a DISCOVER is created in "inferred" mode (flagged) so
a tracker started mid-boot still produces usable reports.
"""

from __future__ import annotations

import enum
import json
import math
import threading
import time
from dataclasses import dataclass, field

from .asset_store import ROLE_BOOTLOADER, ROLE_CONFIG, ROLE_INITRD, ROLE_KERNEL


class BootState(enum.Enum):
    DISCOVERING = "discovering"
    OFFERED = "offered"
    REQUESTED = "requested"
    ACKED = "acked"
    LOADING_BOOTLOADER = "loading_bootloader"
    LOADING_KERNEL = "loading_kernel"
    LOADING_INITRD = "loading_initrd"
    FETCHING_IMAGE = "fetching_image"
    BOOTED = "booted"
    FAILED = "failed"


_LADDER = [
    BootState.DISCOVERING,
    BootState.OFFERED,
    BootState.REQUESTED,
    BootState.ACKED,
    BootState.LOADING_BOOTLOADER,
    BootState.LOADING_KERNEL,
    BootState.LOADING_INITRD,
    BootState.FETCHING_IMAGE,
    BootState.BOOTED,
]
_RANK = {state: i for i, state in enumerate(_LADDER)}

EV_DHCP_DISCOVER = "dhcp_discover"
EV_DHCP_OFFER = "dhcp_offer"
EV_DHCP_REQUEST = "dhcp_request"
EV_DHCP_ACK = "dhcp_ack"
EV_TFTP_RRQ = "tftp_rrq"
EV_TFTP_COMPLETE = "tftp_complete"
EV_IMAGE_FIRST_BYTE = "image_first_byte"
EV_IMAGE_COMPLETE = "image_complete"

EVENT_KINDS = {
    EV_DHCP_DISCOVER, EV_DHCP_OFFER, EV_DHCP_REQUEST, EV_DHCP_ACK,
    EV_TFTP_RRQ, EV_TFTP_COMPLETE, EV_IMAGE_FIRST_BYTE, EV_IMAGE_COMPLETE,
}

_TFTP_PHASE = {
    ROLE_BOOTLOADER: BootState.LOADING_BOOTLOADER,
    ROLE_CONFIG: BootState.LOADING_BOOTLOADER,  # config fetch is the bootloader running
    ROLE_KERNEL: BootState.LOADING_KERNEL,
    ROLE_INITRD: BootState.LOADING_INITRD,
}


@dataclass
class BootEvent:
    client_id: str
    kind: str
    timestamp: float
    size: int | None = None
    asset_role: str | None = None
    manifest_version: int | None = None

    def to_json(self) -> str:
        doc = {"client_id": self.client_id, "kind": self.kind, "timestamp": self.timestamp}
        if self.size is not None:
            doc["size"] = self.size
        if self.asset_role is not None:
            doc["asset_role"] = self.asset_role
        if self.manifest_version is not None:
            doc["manifest_version"] = self.manifest_version
        return json.dumps(doc)

    @classmethod
    def from_json(cls, line: str) -> "BootEvent":
        doc = json.loads(line)
        return cls(
            client_id=doc["client_id"], kind=doc["kind"], timestamp=doc["timestamp"],
            size=doc.get("size"), asset_role=doc.get("asset_role"),
            manifest_version=doc.get("manifest_version"),
        )


@dataclass
class BootSession:
    client_id: str
    state: BootState = BootState.DISCOVERING
    transitions: list[tuple[BootState, float]] = field(default_factory=list)
    bytes_tftp: int = 0
    bytes_image: int = 0
    manifest_version: int | None = None
    inferred: bool = False
    failure_reason: str | None = None

    @property
    def result(self) -> str:
        if self.state is BootState.BOOTED:
            return "booted"
        if self.state is BootState.FAILED:
            return f"failed({self.failure_reason})"
        return "in_progress"

    @property
    def started_at(self) -> float | None:
        return self.transitions[0][1] if self.transitions else None

    def duration(self) -> float | None:
        """Discovering-to-Booted wall time; None unless both ends were seen."""
        if self.state is not BootState.BOOTED or self.inferred:
            return None
        if not self.transitions or self.transitions[0][0] is not BootState.DISCOVERING:
            return None
        return self.transitions[-1][1] - self.transitions[0][1]

    def throughput(self) -> float | None:
        d = self.duration()
        if d is None or d <= 0:
            return None
        return (self.bytes_tftp + self.bytes_image) / d

    def _enter(self, state: BootState, ts: float) -> None:
        if self.transitions:
            ts = max(ts, self.transitions[-1][1])  # keep timestamps non-decreasing
        self.transitions.append((state, ts))
        self.state = state

    def _fail(self, reason: str, ts: float) -> None:
        self.failure_reason = reason
        self._enter(BootState.FAILED, ts)


def _target_state(event: BootEvent) -> BootState | None:
    """The ladder state an event drives toward; None for pure milestones."""
    if event.kind == EV_DHCP_DISCOVER:
        return BootState.DISCOVERING
    if event.kind == EV_DHCP_OFFER:
        return BootState.OFFERED
    if event.kind == EV_DHCP_REQUEST:
        return BootState.REQUESTED
    if event.kind == EV_DHCP_ACK:
        return BootState.ACKED
    if event.kind == EV_TFTP_RRQ:
        return _TFTP_PHASE.get(event.asset_role or "")
    if event.kind == EV_IMAGE_FIRST_BYTE:
        return BootState.FETCHING_IMAGE
    if event.kind == EV_IMAGE_COMPLETE:
        return BootState.BOOTED
    return None  # tftp_complete and unknown roles only move counters


class BootTracker:
    """Funnels events from all services into per-client sessions.

    Thread-safe: submissions serialize through one internal lock, so there
    is exactly one logical consumer of session state.
    """

    def __init__(self, clock=time.monotonic):
        self.clock = clock
        self._lock = threading.Lock()
        self._sessions: list[BootSession] = []
        self._active: dict[str, BootSession] = {}

    def record_event(self, event: BootEvent) -> BootSession:
        if event.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {event.kind!r}")
        with self._lock:
            return self._apply(event)

    def submit(self, event: BootEvent) -> None:
        """record_event for callers that don't need the session back."""
        self.record_event(event)

    def feed(self, events) -> None:
        for event in events:
            self.record_event(event)

    def _apply(self, event: BootEvent) -> BootSession:
        ts = event.timestamp
        session = self._active.get(event.client_id)

        if event.kind == EV_DHCP_DISCOVER:
            # a DISCOVER always begins a fresh boot attempt
            session = BootSession(client_id=event.client_id)
            session._enter(BootState.DISCOVERING, ts)
            self._sessions.append(session)
            self._active[event.client_id] = session
            return session

        if session is None:
            # mid-boot adoption: flag it, start from wherever the stream is
            session = BootSession(client_id=event.client_id, inferred=True)
            start = _target_state(event)
            if start is None:
                start = _TFTP_PHASE.get(event.asset_role or "", BootState.DISCOVERING) \
                    if event.kind == EV_TFTP_COMPLETE else BootState.DISCOVERING
            session._enter(start, ts)
            self._sessions.append(session)
            self._active[event.client_id] = session
            self._account(session, event)
            self._pin_version(session, event, ts)
            return session

        if session.state is BootState.FAILED:
            return session  # only a new DISCOVER revives this client

        self._account(session, event)
        if self._pin_version(session, event, ts):
            return session

        target = _target_state(event)
        if target is None or session.state is BootState.BOOTED:
            return session
        have = _RANK[session.state]
        want = _RANK[target]
        if want <= have:
            return session  # duplicate or stale milestone: idempotent re-entry
        if want == have + 1:
            session._enter(target, ts)
        else:
            session._fail("protocol_violation", ts)
        return session

    def _account(self, session: BootSession, event: BootEvent) -> None:
        if event.size:
            if event.kind in (EV_TFTP_COMPLETE, EV_TFTP_RRQ):
                session.bytes_tftp += event.size
            elif event.kind in (EV_IMAGE_COMPLETE, EV_IMAGE_FIRST_BYTE):
                session.bytes_image += event.size

    def _pin_version(self, session: BootSession, event: BootEvent, ts: float) -> bool:
        """Record the first manifest version seen; a later conflict fails the session."""
        if event.manifest_version is None:
            return False
        if session.manifest_version is None:
            session.manifest_version = event.manifest_version
            return False
        if session.manifest_version != event.manifest_version:
            session._fail("version_mixed", ts)
            return True
        return False

    def sessions(self) -> list[BootSession]:
        with self._lock:
            return list(self._sessions)

    def clear(self) -> None:
        with self._lock:
            self._sessions.clear()
            self._active.clear()

    def report(self) -> "BootReport":
        return boot_report(self)


class ClientRegistry:
    """Leased-IP to (MAC, pinned manifest version) map shared by the services.

    The DHCP ACK writes an entry; TFTP and the image service read it to
    serve one consistent manifest version for the whole client boot and to
    attribute their events to the right client.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._by_ip: dict[str, tuple[str, int | None]] = {}

    def pin(self, ip: str, mac: str, version: int | None) -> None:
        with self._lock:
            self._by_ip[ip] = (mac, version)

    def lookup(self, ip: str) -> tuple[str, int | None] | None:
        with self._lock:
            return self._by_ip.get(ip)

    def client_id(self, ip: str) -> str:
        entry = self.lookup(ip)
        return entry[0] if entry else f"ip:{ip}"

    def version_for(self, ip: str) -> int | None:
        entry = self.lookup(ip)
        return entry[1] if entry else None


def _percentile(sorted_values: list[float], pct: float) -> float:
    """Nearest-rank percentile over a pre-sorted, non-empty list."""
    k = max(1, math.ceil(pct / 100.0 * len(sorted_values)))
    return sorted_values[k - 1]


@dataclass(frozen=True)
class SessionSummary:
    client_id: str
    state: str
    result: str
    manifest_version: int | None
    bytes_tftp: int
    bytes_image: int
    duration_seconds: float | None
    throughput_bytes_per_s: float | None
    inferred: bool

    def to_dict(self) -> dict:
        return {
            "client_id": self.client_id, "state": self.state, "result": self.result,
            "manifest_version": self.manifest_version,
            "bytes_tftp": self.bytes_tftp, "bytes_image": self.bytes_image,
            "duration_seconds": self.duration_seconds,
            "throughput_bytes_per_s": self.throughput_bytes_per_s,
            "inferred": self.inferred,
        }


@dataclass(frozen=True)
class BootReport:
    sessions: int
    booted: int
    failed: int
    in_progress: int
    p50_seconds: float | None
    p95_seconds: float | None
    total_bytes_tftp: int
    total_bytes_image: int
    throughput_bytes_per_s: float | None
    entries: tuple[SessionSummary, ...]

    def to_dict(self) -> dict:
        return {
            "sessions": self.sessions, "booted": self.booted, "failed": self.failed,
            "in_progress": self.in_progress,
            "p50_seconds": self.p50_seconds, "p95_seconds": self.p95_seconds,
            "total_bytes_tftp": self.total_bytes_tftp,
            "total_bytes_image": self.total_bytes_image,
            "throughput_bytes_per_s": self.throughput_bytes_per_s,
            "entries": [e.to_dict() for e in self.entries],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def boot_report(tracker: BootTracker) -> BootReport:
    """Summarize all sessions; failed and inferred boots stay out of the percentiles."""
    sessions = tracker.sessions()
    booted = [s for s in sessions if s.state is BootState.BOOTED]
    failed = [s for s in sessions if s.state is BootState.FAILED]
    durations = sorted(d for s in booted if (d := s.duration()) is not None)

    p50 = _percentile(durations, 50) if durations else None
    p95 = _percentile(durations, 95) if durations else None
    total_time = sum(durations)
    moved_bytes = sum(s.bytes_tftp + s.bytes_image for s in booted if s.duration() is not None)
    throughput = moved_bytes / total_time if total_time > 0 else None

    entries = tuple(
        SessionSummary(
            client_id=s.client_id, state=s.state.value, result=s.result,
            manifest_version=s.manifest_version,
            bytes_tftp=s.bytes_tftp, bytes_image=s.bytes_image,
            duration_seconds=s.duration(), throughput_bytes_per_s=s.throughput(),
            inferred=s.inferred,
        )
        for s in sessions
    )
    return BootReport(
        sessions=len(sessions), booted=len(booted), failed=len(failed),
        in_progress=len(sessions) - len(booted) - len(failed),
        p50_seconds=p50, p95_seconds=p95,
        total_bytes_tftp=sum(s.bytes_tftp for s in sessions),
        total_bytes_image=sum(s.bytes_image for s in sessions),
        throughput_bytes_per_s=throughput,
        entries=entries,
    )
