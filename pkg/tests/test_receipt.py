import copy
import json
import random
import socket

import pytest

from conftest import T0, base_policy, frag, mutated_span_rejected, signed_case, worked_example

from evgate.errors import MissingMandatoryField
from evgate.keys import KeyHandle, TrustStore
from evgate.krn import KrnState, KrnStream, MirrorState, SubstrateLog
from evgate.receipt import (
    Approval,
    build_promotion_receipt,
    build_receipt,
    latency_bin,
    mask_text,
    parse_receipt,
    proof_latency_histogram,
    receipt_file_bytes,
    resign_receipt,
    sign_receipt,
    verify_promotion,
    verify_receipt,
)


def check(c, receipt=None, **kw):
    kw.setdefault("manifest_roots", c["roots"])
    kw.setdefault("known_bodies", c["bodies"])
    return verify_receipt(receipt or c["receipt"], c["trust"], kw.pop("krn", c["krn"]), kw.pop("now", c["now"]), **kw)


@pytest.fixture(scope="module")
def full():
    return signed_case()


@pytest.fixture(scope="module")
def lite():
    return signed_case(delay=400)


def test_round_trip_through_file(full):
    r = parse_receipt(receipt_file_bytes(full["receipt"]))
    assert r == full["receipt"]
    assert check(full, r).passed


def test_signing_is_deterministic(full):
    again = signed_case()
    assert receipt_file_bytes(again["receipt"]) == receipt_file_bytes(full["receipt"])


def test_single_byte_mutations_fail(full):
    rng = random.Random(3)
    assert all(mutated_span_rejected(full["receipt"], lambda r: check(full, r), rng) for _ in range(200))


def test_field_edits_fail(full):
    for path, val in ((("return_state",), "ABSTAIN"), (("g_indep_value",), "1/2"), (("signed_at",), T0)):
        r = copy.deepcopy(full["receipt"])
        r[path[0]] = val
        assert not check(full, r).passed
    r = copy.deepcopy(full["receipt"])
    del r["proofs"]
    assert check(full, r).reasons == ("missing_field:proofs",)


def test_lite_has_no_bodies(lite):
    r = lite["receipt"]
    assert r["mode"] == "lite" and r["return_state"] == "PROMOTE_LITE"
    assert r["proof_timed_out"] is True
    blob = json.dumps(r)
    assert not any(b in blob for b in lite["bodies"])
    assert all("body" not in c for c in r["evidence"]["fragments"])
    assert check(lite).passed


def test_lite_with_body_is_rejected(lite):
    r = copy.deepcopy(lite["receipt"])
    r["evidence"]["fragments"][0]["body"] = "x"
    r = sign_receipt(r, lite["key"], lite["now"])
    assert "lite_contains_body" in check(lite, r).reasons


def test_offline_verification(full, monkeypatch):
    def no_network(*a, **k):
        raise AssertionError("network access attempted")

    monkeypatch.setattr(socket, "socket", no_network)
    monkeypatch.setattr(socket, "create_connection", no_network)
    assert check(full).passed


def test_revocation_fails_closed(full):
    kid, t = full["receipt"]["kid"], full["receipt"]["signed_at"]
    now = full["now"]
    both_l, both_s = KrnStream(), SubstrateLog()
    both_l.revoke(kid, t - 1, None, now)
    both_s.publish(kid, t - 1, None, now)
    fresh = MirrorState(last_sync=now)
    cases = {
        "revoked": KrnState(both_l, both_s, fresh),
        "revoked_pending_mirror": KrnState(KrnStream(), both_s, fresh),
        "stale_mirror": KrnState(KrnStream(), SubstrateLog(), MirrorState(last_sync=now - 5 * 60_000 - 1)),
    }
    for reason, state in cases.items():
        res = check(full, krn=state)
        assert not res.passed and reason in res.reasons
    assert check(full, krn=KrnState(KrnStream(), SubstrateLog(), MirrorState(last_sync=now - 5 * 60_000))).passed
    assert "stale_mirror" in check(full, krn=None).reasons


def test_reattestation_rescues_revoked_key(full):
    kid, t, now = full["receipt"]["kid"], full["receipt"]["signed_at"], full["now"]
    loc, sub = KrnStream(), SubstrateLog()
    loc.revoke(kid, t - 1, None, now)
    sub.publish(kid, t - 1, None, now)
    state = KrnState(loc, sub, MirrorState(last_sync=now))
    new = KeyHandle.generate("gate-key-2", seed="n")
    trust = TrustStore(dict(full["trust"].keys))
    trust.add(new.trusted())
    r = resign_receipt(full["receipt"], new, now)
    res = verify_receipt(r, trust, state, now, manifest_roots=full["roots"])
    assert res.passed and res.notes == ("reattested_by:gate-key-2",)


def test_trust_errors(full):
    assert check(full, now=full["now"]).passed
    empty = TrustStore()
    assert verify_receipt(full["receipt"], empty, full["krn"], full["now"]).reasons == ("unknown_kid",)
    k = full["key"]
    narrow = TrustStore()
    narrow.add(k.trusted(not_before=full["now"] + 1))
    res = verify_receipt(full["receipt"], narrow, full["krn"], full["now"])
    assert "key_not_valid_at_signing" in res.reasons
    assert not verify_receipt("junk", empty, None, 0).passed


def test_wrong_root_and_versions(full):
    res = check(full, manifest_roots={"eu": "00" * 32})
    assert res.reasons == ("proof_invalid:eu",)
    res = check(full, expected_versions={"route_version": "route/999"})
    assert res.reasons == ("policy_version_mismatch",)


def test_abstain_receipt_verifies():
    ex = worked_example()
    c = signed_case(fragments=[ex[k] for k in "ABC"])
    r = c["receipt"]
    assert r["return_state"] == "ABSTAIN" and r["abstain_reason"] == "independence_or_cap"
    assert r["answer_hash"] is None and r["proofs"] == {}
    assert check(c).passed


def test_promote_needs_independence(full):
    d = full["decision"]
    import dataclasses

    trace = dataclasses.replace(d.trace, independence=None)
    with pytest.raises(MissingMandatoryField):
        build_receipt(trace, d.evidence, full["policy"])


def test_pii_mask_and_abstain():
    ex = worked_example()
    leaky = frag("D", "Official Journal", ex["D"].publication_date, body="write to registry@example.org today")
    frs = [ex["A"], ex["B"], leaky]
    c = signed_case(fragments=frs)
    body = next(x["body"] for x in c["receipt"]["evidence"]["fragments"] if x["fragment_id"] == "D")
    assert body == "write to [REDACTED:email] today"
    assert c["receipt"]["pii_findings"][0]["kind"] == "email"
    c = signed_case(fragments=frs, policy=base_policy(fragment_mode="full", pii_action="abstain"))
    assert c["receipt"]["return_state"] == "ABSTAIN" and c["receipt"]["abstain_reason"] == "privacy"
    assert mask_text("call 555-123-4567", base_policy().pii_patterns) == "call [REDACTED:phone]"


def test_latency_histogram():
    assert [latency_bin(x) for x in (10, 11, 300, 301, 5000)] == ["le_10ms", "le_25ms", "le_300ms", "le_500ms", "gt_1000ms"]
    h = proof_latency_histogram(list(range(1, 101)))
    assert h == {"n": 100, "p50": "le_50ms", "p95": "le_100ms", "p99": "le_100ms"}
    assert proof_latency_histogram([])["p50"] is None


def test_promotion_quorum():
    keys = [KeyHandle.generate(f"ap{i}", seed=f"ap{i}") for i in range(3)]
    trust = TrustStore()
    for k in keys:
        trust.add(k.trusted())
    roots = {"eu": "11" * 32, "us": "22" * 32}
    r = build_promotion_receipt(roots, [Approval(keys[1], T0 + 5), Approval(keys[0], T0)], (3, 2))
    assert [a["kid"] for a in r["approvals"]] == ["ap0", "ap1"]
    assert verify_promotion(r, trust).passed
    short = build_promotion_receipt(roots, [Approval(keys[0], T0)], (3, 2))
    assert verify_promotion(short, trust).reasons == ("insufficient_quorum",)
    bad = copy.deepcopy(r)
    bad["manifest_roots"]["eu"] = "33" * 32
    assert "digest_mismatch" in verify_promotion(bad, trust).reasons
    dup = copy.deepcopy(r)
    dup["approvals"][1] = dict(dup["approvals"][0])
    assert "duplicate_approver" in verify_promotion(dup, trust).reasons
    with pytest.raises(ValueError):
        build_promotion_receipt(roots, [], (2, 3))
