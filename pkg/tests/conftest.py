"""Shared builders for fragments, manifests and engine dependencies."""

from datetime import date

import pytest

from evgate.canonical import sha256
from evgate.clock import SimClock
from evgate.engine import Deps, TableVerifier, Verdict
from evgate.manifest import DocumentEntry, License, ShardId, build_manifest
from evgate.policy import Fragment, PolicySnapshot

LIC = License("cc-by-4.0", None)
T0 = 1_700_000_000_000


def frag(doc, issuer, pub=date(2021, 1, 1), cites=(), **kw):
    kw.setdefault("shard_id", "eu")
    kw.setdefault("jurisdiction", "EU")
    kw.setdefault("license", LIC)
    kw.setdefault("selectors", (f"{doc}#p1",))
    kw.setdefault("trust_tier", 2)
    kw.setdefault("body", f"body text of document {doc} with distinct wording {doc * 3}")
    return Fragment(doc, issuer, sha256(doc.encode()), publication_date=pub, upstream_citations=cites, fragment_id=doc, **kw)


def worked_example():
    """Four fragments; C cites B, and B and C share an issuer."""
    return {
        "A": frag("A", "EUR-Lex", date(2020, 3, 1)),
        "B": frag("B", "MDCG", date(2020, 5, 1)),
        "C": frag("C", "MDCG", date(2020, 9, 1), ("B",)),
        "D": frag("D", "Official Journal", date(2022, 6, 1)),
    }


def manifest_for(frs, shard="eu"):
    entries = [DocumentEntry(f.doc_id, f.content_hash, LIC, f.selectors, f.trust_tier, f.issuer) for f in frs]
    return build_manifest(entries, ShardId("EU", shard, "EU"))


def verdict(conf=0.9, p=0.001, contradict=False, ms=10, p_contra=0.9):
    return Verdict(not contradict, contradict, p, p_contra, conf, ms)


def make_deps(frs, clock=None, tables=None, **kw):
    clock = clock or SimClock(T0)
    default = {f.fid: verdict() for f in frs}
    tables = tables or {}
    verifiers = {t: TableVerifier(t, tables.get(t, default), clock) for t in ("cheap", "small", "heavy")}
    return Deps(verifiers, clock, {"eu": manifest_for(frs)}, **kw)


def base_policy(**kw):
    kw.setdefault("route_jurisdictions", ("EU",))
    kw.setdefault("sample_rate", 0.0)
    return PolicySnapshot(**kw)


@pytest.fixture
def example():
    return worked_example()


# --------------------------------------------------------------------------
# random MSES instances


def random_mses_instance(rng):
    """Supports plus a randomized gate predicate; the full set always passes."""
    from fractions import Fraction

    from evgate.mses import GateCheck, VerdictedFragment

    n = rng.randint(1, 10)
    n_issuers = rng.randint(1, 8)
    sup = tuple(
        VerdictedFragment(frag(f"f{i}", f"iss{rng.randrange(n_issuers)}"), rng.random() * 0.01, 0.9, round(rng.uniform(0.5, 1.0), 3))
        for i in range(n)
    )
    k = rng.randint(1, min(4, n_issuers))
    d = rng.randint(1, 3)
    s = rng.uniform(0, 2.5)
    required = set(rng.sample([v.fid for v in sup], min(n, rng.randint(0, 2))))
    cap = rng.choice([None, Fraction(1, 2), Fraction(2, 3)])

    def pred(subset):
        ids = {v.fid for v in subset}
        issuers = [v.fragment.issuer for v in subset]
        checks = [
            ("support_count", len(subset) >= k, (len(subset) - k + 1) / 10),
            ("g_indep", len(set(issuers)) >= d, (len(set(issuers)) - d + 1) / 6),
            ("fdr_budget", sum(v.calibrated_confidence for v in subset) >= s, 0.5),
            ("scope", required <= ids, 1.0),
        ]
        if cap is not None and subset:
            mx = max(Fraction(issuers.count(i), len(issuers)) for i in set(issuers))
            checks.append(("issuer_cap", mx <= cap, float(cap - mx) if mx <= cap else 0.0))
        for name, ok, _ in checks:
            if not ok:
                return GateCheck(False, name, (name,), {})
        return GateCheck(True, None, (), {n: max(0.0, min(1.0, sl)) for n, _, sl in checks})

    return sup, pred


# --------------------------------------------------------------------------
# engine scenarios


def passing_case(policy=None, request_kw=None, **deps_kw):
    """Three independent supports that clear every gate."""
    from evgate.engine import Request, RouteState

    ex = worked_example()
    frs = [ex[k] for k in "ABD"]
    clock = deps_kw.pop("clock", None) or SimClock(T0)
    deps = make_deps(frs, clock, **deps_kw)
    req = Request("r1", "claim", tuple(frs), arrival=T0, **(request_kw or {}))
    return req, policy or base_policy(), RouteState("default"), deps


# --------------------------------------------------------------------------
# budget governor trace


def budget_trace(n_events=50_000, days=7, trigger_rate=0.3, seed=5, incidents=((2, 6), (5, 3)), resubmit=0.05):
    """Drive a RouteState over a synthetic trace the way the engine does.

    ``incidents`` holds (day, hours) pairs. Returns the event log as tuples
    (ts, heavy, incident, request_id) plus per-request heavy call counts and
    the incident intervals.
    """
    import random

    from evgate.engine import RouteState

    rng = random.Random(seed)
    span = days * 24 * 3600 * 1000
    times = sorted(rng.randrange(span) for _ in range(n_events))
    st = RouteState("r")
    intervals = []
    pending = [(T0 + d * 86_400_000, h * 3_600_000) for d, h in incidents]
    log, calls, ids = [], {}, []
    for i, t in enumerate(times):
        now = T0 + t
        while pending and pending[0][0] <= now:
            start, dur = pending.pop(0)
            st.open_incident(f"INC-{len(intervals) + 1}", start, dur)
            intervals.append((start, start + dur))
        rid = ids[rng.randrange(len(ids))] if ids and rng.random() < resubmit else f"q{i}"
        ids.append(rid)
        heavy = incident = False
        if rng.random() < trigger_rate and st.heavy_calls.get(rid, 0) == 0:
            res = st.reserve(now, rid)
            if res is not None:
                st.note_heavy_call(rid)
                st.commit(res, now, rid)
                heavy, incident = True, res.incident_ticket is not None
                calls[rid] = calls.get(rid, 0) + 1
        if not heavy:
            st.record(now, False, False, rid)
        log.append((now, heavy, incident, rid))
    return log, calls, intervals


def window_share_oracle(log, window_ms=7 * 24 * 3600 * 1000):
    """Exact capped heavy share after every event, from prefix counts."""
    from bisect import bisect_right
    from fractions import Fraction

    ts = [e[0] for e in log]
    capped = [0]
    for e in log:
        capped.append(capped[-1] + (1 if e[1] and not e[2] else 0))
    out = []
    for i, e in enumerate(log):
        lo = bisect_right(ts, e[0] - window_ms)
        out.append((e[0], Fraction(capped[i + 1] - capped[lo], i + 1 - lo)))
    return out


# --------------------------------------------------------------------------
# dual-channel revocation truth table


def krn_truth_case(rev_local, rev_sub, fresh, fetch_ok, kid="k1", signed_at=T0, now=T0 + 1000):
    """Channel snapshots for one row of the 16-case table."""
    from evgate.krn import KrnStream, MirrorState, SubstrateLog

    local = KrnStream()
    sub = SubstrateLog()
    if rev_local:
        local.revoke(kid, signed_at - 10, None, now)
    if rev_sub:
        sub.publish(kid, signed_at - 10, None, now)
    mirror = MirrorState(last_sync=now - (60_000 if fresh else 6 * 60_000))
    return (local, sub if fetch_ok else None, mirror), kid, signed_at, now


def krn_expected(rev_local, rev_sub, fresh, fetch_ok):
    """Fail-closed rule: VALID only when nothing is revoked, fresh and fetched."""
    if not fetch_ok:
        return "REVOKED_PENDING_MIRROR", "stale_mirror"
    if rev_local and rev_sub:
        return "REVOKED", "revoked"
    if rev_local or rev_sub:
        return "REVOKED_PENDING_MIRROR", "revoked_pending_mirror"
    if not fresh:
        return "REVOKED_PENDING_MIRROR", "stale_mirror"
    return "VALID", None


# --------------------------------------------------------------------------
# signed receipts


def signed_case(*, delay=0, policy=None, fragments=None, kid="gate-key-1"):
    """Decide, finalize and sign one request; returns a dict of the pieces."""
    from evgate.engine import RouteState, decide
    from evgate.keys import KeyHandle, TrustStore
    from evgate.krn import KrnState, KrnStream, MirrorState, SubstrateLog
    from evgate.receipt import finalize

    from evgate.engine import Request

    policy = policy or base_policy(fragment_mode="full")
    ex = worked_example()
    frs = fragments or [ex[k] for k in "ABD"]
    clock = SimClock(T0)
    deps = make_deps(frs, clock, proof_latency_ms=(lambda r: delay) if delay else None)
    req = Request("r1", "claim", tuple(frs), arrival=T0)
    decision = decide(req, policy, RouteState("default"), deps)
    key = KeyHandle.generate(kid, seed="test-key")
    trust = TrustStore()
    trust.add(key.trusted())
    now = clock.now_ms()
    decision, receipt = finalize(decision, policy, key, now, answer="yes")
    krn = KrnState(KrnStream(), SubstrateLog(), MirrorState(last_sync=now))
    roots = {s: m.root.hex() for s, m in deps.manifests.items()}
    return {
        "decision": decision,
        "receipt": receipt,
        "key": key,
        "trust": trust,
        "krn": krn,
        "now": now,
        "roots": roots,
        "bodies": [f.body for f in frs],
        "policy": policy,
    }


def mutated_span_rejected(receipt, verify, rng):
    """Flip one byte of the signed span; True when the result is rejected.

    Mutations that no longer parse are rejected by construction; the rest
    are re-attached to the original signature and verified.
    """
    import json

    from evgate.receipt import canonical_bytes

    span = bytearray(canonical_bytes(receipt))
    i = rng.randrange(len(span))
    span[i] = (span[i] + rng.randrange(1, 256)) % 256
    try:
        mutated = json.loads(bytes(span).decode("utf-8"))
    except (ValueError, UnicodeDecodeError):
        return True
    if not isinstance(mutated, dict):
        return True
    mutated["signature"] = receipt["signature"]
    return not verify(mutated).passed


# --------------------------------------------------------------------------
# golden fixture

from pathlib import Path

GOLDEN = Path(__file__).parent / "fixtures" / "golden"


def gate_run(out, fixture=GOLDEN):
    from evgate.cli import main

    return main(["gate", "run", "--fixture", str(fixture), "--out", str(out)])


def tree_bytes(root):
    """Relative path -> bytes for every file under ``root``."""
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# --------------------------------------------------------------------------
# acceptance reporting

ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    """Record named checks for one criterion, print its line, then assert."""

    def record(cid, title, checks, detail=""):
        failed = [name for name, ok in checks.items() if not ok]
        line = f"[{'PASS' if not failed else 'FAIL'}] {cid} {title}"
        if detail:
            line += f" ({detail})"
        if failed:
            line += f" failed: {', '.join(failed)}"
        ACCEPTANCE.append(line)
        print(line)
        assert not failed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
