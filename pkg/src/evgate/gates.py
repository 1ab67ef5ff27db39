"""Deterministic pre-emission gates.

All functions here are pure: the same fragments, policy and ``now`` always
produce the same decision and the same reason list.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from datetime import date, datetime, timezone
from typing import Mapping, Sequence

from .errors import MissingDates
from .independence import IndependenceReport
from .policy import Fragment, PolicySnapshot

SCOPE_CATEGORIES = (
    "jurisdiction",
    "effective_date",
    "license_ttl",
    "trust_tier",
    "temporal_monoculture",
    "anchor_missing",
    "language_mismatch",
    "duplicate",
    "timeout",
    "malformed_license",
)


@dataclass(frozen=True)
class ScopeReason:
    category: str
    fragment_ids: tuple[str, ...]

    @property
    def fragment_count(self) -> int:
        return len(self.fragment_ids)

    def to_dict(self, redact_ids: bool = False) -> dict:
        return {
            "category": self.category,
            "fragment_count": self.fragment_count,
            "fragment_ids": [] if redact_ids else list(self.fragment_ids),
        }


def to_date(now: int | date | datetime) -> date:
    if isinstance(now, datetime):
        return now.date()
    if isinstance(now, date):
        return now
    return datetime.fromtimestamp(now, tz=timezone.utc).date()


def _normalize(text: str) -> str:
    return re.sub(r"\s+", " ", text.lower()).strip()


def shingles(text: str, n: int = 8) -> set[str]:
    t = _normalize(text)
    if len(t) <= n:
        return {t}
    return {t[i : i + n] for i in range(len(t) - n + 1)}


def jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def _malformed_license(f: Fragment) -> bool:
    lic = f.license
    if lic is None or not isinstance(lic.terms_id, str) or not lic.terms_id:
        return True
    return lic.ttl_expiry is not None and not isinstance(lic.ttl_expiry, int)


def _duplicates(fragments: Sequence[Fragment], threshold: float) -> set[str]:
    dups: set[str] = set()
    seen_hash: dict[bytes, str] = {}
    kept: list[tuple[str, set[str]]] = []
    for f in fragments:
        if f.content_hash in seen_hash:
            dups.add(f.fid)
            continue
        seen_hash[f.content_hash] = f.fid
        if f.body:
            sh = shingles(f.body)
            if any(jaccard(sh, other) >= threshold for _, other in kept):
                dups.add(f.fid)
                continue
            kept.append((f.fid, sh))
    return dups


def scope_ok(
    fragments: Sequence[Fragment],
    policy: PolicySnapshot,
    now: int | date | datetime,
    topic: str | None = None,
) -> tuple[bool, list[ScopeReason]]:
    """Check every fragment against the route's scope policy.

    ``now`` is a Unix timestamp (seconds) or a date. Failures never raise;
    they are returned as reasons grouped by category in a fixed order.
    """
    today = to_date(now)
    ts = now if isinstance(now, int) else int(datetime.combine(today, datetime.min.time(), timezone.utc).timestamp())
    bad: dict[str, list[str]] = {c: [] for c in SCOPE_CATEGORIES}
    for f in fragments:
        if policy.route_jurisdictions and f.jurisdiction not in policy.route_jurisdictions:
            bad["jurisdiction"].append(f.fid)
        if (f.effective_start and f.effective_start > today) or (
            f.effective_end and f.effective_end < today
        ):
            bad["effective_date"].append(f.fid)
        if _malformed_license(f):
            bad["malformed_license"].append(f.fid)
        elif f.license.ttl_expiry is not None and f.license.ttl_expiry < ts:
            bad["license_ttl"].append(f.fid)
        if f.trust_tier < policy.min_trust_tier:
            bad["trust_tier"].append(f.fid)
        if not f.selectors or f.problems():
            bad["anchor_missing"].append(f.fid)
        if policy.route_language and f.language != policy.route_language:
            bad["language_mismatch"].append(f.fid)
        if f.timed_out:
            bad["timeout"].append(f.fid)
    dups = _duplicates(fragments, policy.near_duplicate_threshold)
    bad["duplicate"] = [f.fid for f in fragments if f.fid in dups]
    if topic is not None and topic in policy.drifting_topics:
        try:
            ok, _ = temporal_diversity_ok(fragments, policy, True)
        except MissingDates:
            ok = False
        if not ok:
            bad["temporal_monoculture"] = [f.fid for f in fragments]
    reasons = [ScopeReason(c, tuple(ids)) for c, ids in bad.items() if ids]
    return not reasons, reasons


# --------------------------------------------------------------------------
# temporal diversity


def _month_index(d: date) -> int:
    return d.year * 12 + d.month - 1


def add_months(d: date, months: int) -> date:
    idx = _month_index(d) + months
    y, m = divmod(idx, 12)
    m += 1
    # clamp day to month length
    for day in (d.day, 30, 29, 28):
        try:
            return date(y, m, min(d.day, day))
        except ValueError:
            continue
    raise ValueError("unreachable")


@dataclass(frozen=True)
class TemporalWindow:
    start: date
    end: date
    midpoint: date
    members: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "end": self.end.isoformat(),
            "members": list(self.members),
            "midpoint": self.midpoint.isoformat(),
            "start": self.start.isoformat(),
        }


def temporal_windows(fragments: Sequence[Fragment], window_months: int = 6) -> list[TemporalWindow]:
    """Bucket fragments into consecutive ``window_months`` windows.

    Buckets start at the earliest publication date. A window's midpoint is
    the midpoint of its members' dates.
    """
    dated = sorted(((f.publication_date, f.fid) for f in fragments))
    origin = dated[0][0]
    buckets: dict[int, list[tuple[date, str]]] = {}
    for d, fid in dated:
        months = _month_index(d) - _month_index(origin) - (1 if d.day < origin.day else 0)
        buckets.setdefault(months // window_months, []).append((d, fid))
    out = []
    for b in sorted(buckets):
        members = buckets[b]
        lo, hi = members[0][0], members[-1][0]
        start = add_months(origin, b * window_months)
        end = add_months(origin, (b + 1) * window_months)
        mid = date.fromordinal((lo.toordinal() + hi.toordinal()) // 2)
        out.append(TemporalWindow(start, end, mid, tuple(sorted(fid for _, fid in members))))
    return out


def temporal_diversity_ok(
    fragments: Sequence[Fragment], policy: PolicySnapshot, topic_is_drifting: bool
) -> tuple[bool, list[TemporalWindow]]:
    if not topic_is_drifting:
        return True, []
    missing = [f.fid for f in fragments if f.publication_date is None]
    if missing:
        raise MissingDates(f"no publication date on {missing}")
    if not fragments:
        return False, []
    windows = temporal_windows(fragments)
    mids = sorted(w.midpoint for w in windows)
    ok = len(windows) >= 2 and add_months(mids[0], 12) <= mids[-1]
    return ok, windows


# --------------------------------------------------------------------------
# small-sample poisoning gate

POISONING_SUBGATES = ("issuer_diversity", "mses_monoculture", "g_indep", "issuer_share", "temporal")


@dataclass(frozen=True)
class GateResult:
    passed: bool
    reason: str | None = None
    failed_subgate: str | None = None
    detail: str = ""

    def to_dict(self) -> dict:
        return {
            "detail": self.detail,
            "failed_subgate": self.failed_subgate,
            "pass": self.passed,
            "reason": self.reason,
        }


def poisoning_gate(
    candidate_pool: Sequence[Fragment],
    final_mses: Sequence[Fragment],
    policy: PolicySnapshot,
    graph_report: IndependenceReport,
    topic_is_drifting: bool = False,
) -> GateResult:
    def fail(sub: str, detail: str) -> GateResult:
        return GateResult(False, "insufficient_diversity", sub, detail)

    issuers = {f.issuer for f in candidate_pool}
    if len(issuers) < policy.min_issuer_diversity:
        return fail("issuer_diversity", f"{len(issuers)} distinct issuers < {policy.min_issuer_diversity}")
    if policy.phase_b:
        counts = Counter(f.issuer for f in final_mses)
        over = sorted(i for i, c in counts.items() if c > 1)
        if over:
            return fail("mses_monoculture", f"issuers with >1 MSES fragment: {over}")
    if graph_report.g_indep < policy.frac("g_indep_min"):
        return fail("g_indep", f"g_indep {graph_report.g_indep} < {policy.g_indep_min}")
    if graph_report.max_share > policy.frac("issuer_cap"):
        return fail("issuer_share", f"max issuer share {graph_report.max_share} > {policy.issuer_cap}")
    if topic_is_drifting:
        try:
            ok, _ = temporal_diversity_ok(final_mses, policy, True)
        except MissingDates:
            ok = False
        if not ok:
            return fail("temporal", "supports do not span two separated windows")
    return GateResult(True)


# --------------------------------------------------------------------------
# metadata inference


@dataclass(frozen=True)
class ShardInfo:
    jurisdiction: str | None = None
    effective_start: date | None = None
    effective_end: date | None = None


@dataclass(frozen=True)
class InferredMetadata:
    jurisdiction: str | None
    effective_window: tuple[date | None, date | None]
    inferred_fields: tuple[str, ...]


def infer_metadata(
    fragment: Fragment, shard_catalog: Mapping[str, ShardInfo]
) -> tuple[InferredMetadata, float]:
    """Fill a missing jurisdiction or effective window from the fragment's shard.

    Explicit values on the fragment always win. Confidence is 1.0 when every
    missing field could be inherited and 0.0 otherwise.
    """
    shard = shard_catalog.get(fragment.shard_id, ShardInfo())
    inferred = []
    confident = True
    jur = fragment.jurisdiction
    if jur is None:
        if shard.jurisdiction is not None:
            jur = shard.jurisdiction
            inferred.append("jurisdiction")
        else:
            confident = False
    start, end = fragment.effective_start, fragment.effective_end
    if start is None and end is None and fragment.publication_date is None:
        if shard.effective_start is not None or shard.effective_end is not None:
            start, end = shard.effective_start, shard.effective_end
            inferred.append("effective_window")
        else:
            confident = False
    return InferredMetadata(jur, (start, end), tuple(inferred)), 1.0 if confident else 0.0


def needs_inference(fragment: Fragment) -> bool:
    """Missing jurisdiction, or no date of any kind."""
    undated = (
        fragment.effective_start is None
        and fragment.effective_end is None
        and fragment.publication_date is None
    )
    return fragment.jurisdiction is None or undated


def apply_inferred(fragment: Fragment, meta: InferredMetadata) -> Fragment:
    import dataclasses

    return dataclasses.replace(
        fragment,
        jurisdiction=meta.jurisdiction,
        effective_start=meta.effective_window[0],
        effective_end=meta.effective_window[1],
    )
