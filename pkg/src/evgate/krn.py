"""Key Revocation Notices: local stream, substrate mirror, dual-channel checks.

The substrate is modelled as an append-only JSON-lines log with sequence
numbers. The local KRN holds operator-entered revocations plus mirrored
substrate events, each linked back by ``substrate_id:seq``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

from .canonical import canonical_bytes, dump_json, sha256
from .errors import ConfigError, SequenceGap, UnknownKid

log = logging.getLogger(__name__)

FRESHNESS_MS = 5 * 60 * 1000
RECONCILE_INTERVAL_MS = 15 * 60 * 1000

VALID = "VALID"
REVOKED = "REVOKED"
REVOKED_PENDING_MIRROR = "REVOKED_PENDING_MIRROR"
UNDER_REVIEW = "UNDER_REVIEW"
UNREISSUABLE = "UNREISSUABLE"
STATUSES = (VALID, REVOKED, REVOKED_PENDING_MIRROR, UNDER_REVIEW, UNREISSUABLE)


@dataclass(frozen=True)
class KrnEntry:
    kid: str
    t0: int
    t1: int | None
    source: str  # local | substrate
    recorded_at: int
    linkage: str | None = None
    entry_hash: str = ""

    def __post_init__(self):
        if self.source not in ("local", "substrate"):
            raise ConfigError(f"unknown KRN source {self.source!r}")
        if self.t1 is not None and self.t0 > self.t1:
            raise ConfigError("revocation window must have t0 <= t1")
        expected = self.compute_hash()
        if self.entry_hash and self.entry_hash != expected:
            raise ConfigError(f"KRN entry hash mismatch for {self.kid}")
        object.__setattr__(self, "entry_hash", expected)

    def _body(self) -> dict:
        return {
            "kid": self.kid,
            "linkage": self.linkage,
            "recorded_at": self.recorded_at,
            "source": self.source,
            "t0": self.t0,
            "t1": self.t1,
        }

    def compute_hash(self) -> str:
        return sha256(canonical_bytes(self._body())).hex()

    def covers(self, kid: str, t: int) -> bool:
        return kid == self.kid and self.t0 <= t and (self.t1 is None or t <= self.t1)

    def to_dict(self) -> dict:
        return {**self._body(), "entry_hash": self.entry_hash}

    @classmethod
    def from_dict(cls, d: dict) -> "KrnEntry":
        return cls(d["kid"], int(d["t0"]), d.get("t1"), d["source"], int(d["recorded_at"]), d.get("linkage"), d.get("entry_hash", ""))


class KrnStream:
    """Append-only list of revocations, optionally backed by a JSONL file."""

    def __init__(self, entries: Iterable[KrnEntry] = (), path=None):
        self.entries: list[KrnEntry] = list(entries)
        self.path = Path(path) if path else None

    def linkages(self) -> set[str]:
        return {e.linkage for e in self.entries if e.linkage}

    def append(self, entry: KrnEntry) -> bool:
        """Append unless an entry with the same linkage is already present."""
        if entry.linkage and entry.linkage in self.linkages():
            return False
        self.entries.append(entry)
        if self.path is not None:
            with self.path.open("ab") as fh:
                fh.write(canonical_bytes(entry.to_dict()) + b"\n")
        return True

    def revoke(self, kid: str, t0: int, t1: int | None, now: int) -> KrnEntry:
        e = KrnEntry(kid, t0, t1, "local", now)
        self.append(e)
        return e

    def revoked(self, kid: str, t: int) -> bool:
        return any(e.covers(kid, t) for e in self.entries)

    @classmethod
    def load(cls, path) -> "KrnStream":
        path = Path(path)
        entries = []
        if path.exists():
            try:
                for line in path.read_text().splitlines():
                    if line.strip():
                        entries.append(KrnEntry.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ConfigError(f"bad KRN file {path}: {exc}") from exc
        return cls(entries, path)


@dataclass(frozen=True)
class SubstrateEvent:
    seq: int
    kid: str
    t0: int
    t1: int | None
    recorded_at: int

    def linkage(self, substrate_id: str) -> str:
        return f"{substrate_id}:{self.seq}"

    def to_dict(self) -> dict:
        return {"kid": self.kid, "recorded_at": self.recorded_at, "seq": self.seq, "t0": self.t0, "t1": self.t1}

    @classmethod
    def from_dict(cls, d: dict) -> "SubstrateEvent":
        return cls(int(d["seq"]), d["kid"], int(d["t0"]), d.get("t1"), int(d["recorded_at"]))


class SubstrateLog:
    """File-backed mock of an external revocation feed."""

    def __init__(self, path=None, substrate_id: str = "substrate", events: Iterable[SubstrateEvent] = ()):
        self.path = Path(path) if path else None
        self.substrate_id = substrate_id
        self.events: list[SubstrateEvent] = list(events)
        if self.path is not None and self.path.exists() and not self.events:
            try:
                self.events = [
                    SubstrateEvent.from_dict(json.loads(line))
                    for line in self.path.read_text().splitlines()
                    if line.strip()
                ]
            except (ValueError, KeyError, TypeError) as exc:
                raise ConfigError(f"bad substrate log {self.path}: {exc}") from exc

    def publish(self, kid: str, t0: int, t1: int | None, now: int) -> SubstrateEvent:
        seq = self.events[-1].seq + 1 if self.events else 1
        ev = SubstrateEvent(seq, kid, t0, t1, now)
        self.events.append(ev)
        if self.path is not None:
            with self.path.open("ab") as fh:
                fh.write(canonical_bytes(ev.to_dict()) + b"\n")
        return ev

    def revoked(self, kid: str, t: int) -> bool:
        return any(e.kid == kid and e.t0 <= t and (e.t1 is None or t <= e.t1) for e in self.events)


@dataclass
class MirrorState:
    last_sync: int | None = None
    cursor: int = 0
    gaps: list[tuple[int, int]] = field(default_factory=list)

    def lag(self, now: int) -> int | None:
        if self.last_sync is None:
            return None
        return max(0, now - self.last_sync)

    def to_dict(self) -> dict:
        return {"cursor": self.cursor, "gaps": [list(g) for g in self.gaps], "last_sync": self.last_sync}

    @classmethod
    def from_dict(cls, d: dict) -> "MirrorState":
        return cls(d.get("last_sync"), int(d.get("cursor", 0)), [tuple(g) for g in d.get("gaps", [])])

    def save(self, path) -> None:
        dump_json(self.to_dict(), path)

    @classmethod
    def load(cls, path) -> "MirrorState":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read mirror state {path}: {exc}") from exc


@dataclass(frozen=True)
class VerificationStatus:
    status: str
    reasons: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return self.status == VALID


def check_dual(
    kid: str,
    signed_at: int,
    local_krn: KrnStream | None,
    substrate_krn: SubstrateLog | None,
    mirror_state: MirrorState | None,
    now: int,
    freshness_ms: int = FRESHNESS_MS,
) -> VerificationStatus:
    """Adjudicate a kid's status from both channels; every ambiguity fails closed.

    ``now`` and ``signed_at`` share one time unit with the KRN windows;
    ``freshness_ms`` must be expressed in that unit too.
    """
    if local_krn is None or substrate_krn is None:
        reasons = ["stale_mirror"]
        if local_krn is not None and local_krn.revoked(kid, signed_at):
            reasons.append("revoked_local")
        return VerificationStatus(REVOKED_PENDING_MIRROR, tuple(reasons))
    loc = local_krn.revoked(kid, signed_at)
    sub = substrate_krn.revoked(kid, signed_at)
    if loc and sub:
        return VerificationStatus(REVOKED, ("revoked",))
    if loc or sub:
        return VerificationStatus(REVOKED_PENDING_MIRROR, ("revoked_pending_mirror",))
    lag = mirror_state.lag(now) if mirror_state is not None else None
    if lag is None or lag > freshness_ms:
        return VerificationStatus(REVOKED_PENDING_MIRROR, ("stale_mirror",))
    return VerificationStatus(VALID)


@dataclass(frozen=True)
class MirrorResult:
    appended: tuple[KrnEntry, ...]
    gap: SequenceGap | None = None


def mirror_sync(substrate: SubstrateLog, local_krn: KrnStream, mirror_state: MirrorState, clock) -> MirrorResult:
    """Copy new substrate events into the local KRN, in sequence order.

    Replays are no-ops. A sequence gap stops the sync, is recorded on the
    mirror state, and leaves ``last_sync`` untouched so lag keeps growing
    until the backfill arrives.
    """
    now = clock.now_ms()
    appended = []
    for ev in sorted(substrate.events, key=lambda e: e.seq):
        if ev.seq <= mirror_state.cursor:
            continue
        if ev.seq != mirror_state.cursor + 1:
            gap = SequenceGap(mirror_state.cursor + 1, ev.seq)
            mirror_state.gaps.append((gap.expected, gap.got))
            log.warning("%s; reconciliation scheduled", gap)
            return MirrorResult(tuple(appended), gap)
        entry = KrnEntry(ev.kid, ev.t0, ev.t1, "substrate", now, ev.linkage(substrate.substrate_id))
        if local_krn.append(entry):
            appended.append(entry)
        mirror_state.cursor = ev.seq
    mirror_state.last_sync = now
    return MirrorResult(tuple(appended))


# --------------------------------------------------------------------------
# receipt store and re-attestation


@dataclass
class ReceiptRecord:
    receipt: dict
    status: str = VALID
    rationale: str = ""

    @property
    def kid(self) -> str:
        return self.receipt["signature"]["kid"]

    @property
    def signed_at(self) -> int:
        return int(self.receipt["signed_at"])


@dataclass
class ReceiptStore:
    records: dict[str, ReceiptRecord] = field(default_factory=dict)
    promotions_frozen: bool = False
    log: list[dict] = field(default_factory=list)

    def add(self, receipt: dict) -> None:
        self.records[receipt["receipt_id"]] = ReceiptRecord(receipt)


def revoke_window(
    kid: str,
    t0: int,
    t1: int | None,
    receipt_store: ReceiptStore,
    trust_store,
    local_krn: KrnStream | None = None,
    now: int = 0,
) -> list[str]:
    """Freeze promotions and flag every receipt ``kid`` signed inside the window."""
    if kid not in trust_store:
        raise UnknownKid(kid)
    if local_krn is not None:
        local_krn.revoke(kid, t0, t1, now)
    receipt_store.promotions_frozen = True
    flagged = []
    for rid, rec in sorted(receipt_store.records.items()):
        if rec.kid == kid and t0 <= rec.signed_at and (t1 is None or rec.signed_at <= t1):
            if rec.status == VALID:
                rec.status = UNDER_REVIEW
            flagged.append(rid)
    receipt_store.log.append({"action": "revoke_window", "flagged": flagged, "kid": kid, "t0": t0, "t1": t1, "ts": now})
    return flagged


def reattest(
    receipt_store: ReceiptStore,
    receipt_id: str,
    new_key,
    now: int,
    evidence_available: Callable[[dict], bool] | bool = True,
    rationale: str = "evidence no longer available",
) -> ReceiptRecord:
    """Re-sign an UNDER_REVIEW receipt with ``new_key`` or mark it UNREISSUABLE."""
    from .receipt import resign_receipt

    rec = receipt_store.records[receipt_id]
    if rec.status != UNDER_REVIEW:
        raise ValueError(f"{receipt_id} is {rec.status}, not {UNDER_REVIEW}")
    ok = evidence_available(rec.receipt) if callable(evidence_available) else evidence_available
    if ok:
        rec.receipt = resign_receipt(rec.receipt, new_key, now)
        rec.status = VALID
        rec.rationale = f"re-attested by {new_key.kid}"
    else:
        rec.status = UNREISSUABLE
        rec.rationale = rationale
    receipt_store.log.append({"action": "reattest", "receipt_id": receipt_id, "status": rec.status, "ts": now})
    return rec


@dataclass(frozen=True)
class DriftReport:
    substrate_only: tuple[str, ...]
    local_only: tuple[str, ...]
    backfilled: tuple[KrnEntry, ...]
    incidents: tuple[dict, ...]

    @property
    def clean(self) -> bool:
        return not self.substrate_only and not self.local_only

    def to_dict(self) -> dict:
        return {
            "backfilled": [e.to_dict() for e in self.backfilled],
            "incidents": list(self.incidents),
            "local_only": list(self.local_only),
            "substrate_only": list(self.substrate_only),
        }


def reconcile(
    local_krn: KrnStream,
    substrate: SubstrateLog,
    now: int,
    promotion_digest: str | None = None,
    mirror_state: MirrorState | None = None,
) -> DriftReport:
    """Compare both channels; backfill substrate-only events, flag local-only ones.

    Meant to run every 15 minutes. Local-only revocations are left for an
    operator: the direction of that drift is not resolved automatically.
    """
    have = local_krn.linkages()
    sub_windows = {(e.kid, e.t0, e.t1) for e in substrate.events}
    substrate_only = []
    backfilled = []
    for ev in sorted(substrate.events, key=lambda e: e.seq):
        link = ev.linkage(substrate.substrate_id)
        if link not in have:
            substrate_only.append(link)
            entry = KrnEntry(ev.kid, ev.t0, ev.t1, "substrate", now, link)
            if local_krn.append(entry):
                backfilled.append(entry)
    local_only = [
        e.entry_hash for e in local_krn.entries if e.source == "local" and (e.kid, e.t0, e.t1) not in sub_windows
    ]
    incidents = []
    for link in substrate_only:
        incidents.append({"kind": "krn_drift", "direction": "substrate_only", "ref": link, "promotion_digest": promotion_digest, "ts": now})
    for h in local_only:
        incidents.append({"kind": "krn_drift", "direction": "local_only", "ref": h, "promotion_digest": promotion_digest, "ts": now, "review": "operator"})
    if mirror_state is not None and substrate.events:
        last = max(e.seq for e in substrate.events)
        if all(ev.linkage(substrate.substrate_id) in local_krn.linkages() for ev in substrate.events):
            mirror_state.cursor = max(mirror_state.cursor, last)
            mirror_state.gaps.clear()
            mirror_state.last_sync = now
    return DriftReport(tuple(substrate_only), tuple(local_only), tuple(backfilled), tuple(incidents))


def status_summary(local_krn: KrnStream, mirror_state: MirrorState, now: int) -> Mapping[str, object]:
    lag = mirror_state.lag(now)
    return {
        "cursor": mirror_state.cursor,
        "entries": len(local_krn.entries),
        "fresh": lag is not None and lag <= FRESHNESS_MS,
        "gaps": [list(g) for g in mirror_state.gaps],
        "lag_ms": lag,
        "last_sync": mirror_state.last_sync,
    }


@dataclass
class KrnState:
    """Both channels plus mirror freshness, as handed to a receipt verifier.

    A ``None`` channel means it could not be fetched.
    """

    local: KrnStream | None
    substrate: SubstrateLog | None
    mirror: MirrorState | None

    def check(self, kid: str, signed_at: int, now: int) -> VerificationStatus:
        return check_dual(kid, signed_at, self.local, self.substrate, self.mirror, now)
