import dataclasses
from datetime import date

import pytest

from conftest import base_policy, frag, worked_example

from evgate.errors import MissingDates
from evgate.gates import (
    ShardInfo,
    infer_metadata,
    needs_inference,
    poisoning_gate,
    scope_ok,
    temporal_diversity_ok,
    temporal_windows,
)
from evgate.independence import build_graph, g_indep
from evgate.manifest import License

NOW = date(2024, 1, 1)


def test_clean_fragments_pass_scope():
    ex = worked_example()
    ok, reasons = scope_ok([ex["A"], ex["B"], ex["D"]], base_policy(), NOW)
    assert ok and reasons == []


def test_scope_reasons_are_grouped_in_fixed_order():
    frs = [
        frag("J", "i1", jurisdiction="US"),
        frag("L", "i2", license=License("cc", 1_000)),
        frag("M", "i3", license=None),
        frag("T", "i4", trust_tier=0),
        frag("E", "i5", effective_start=date(2030, 1, 1)),
        frag("S", "i6", selectors=()),
        frag("G", "i7", language="de"),
    ]
    ok, reasons = scope_ok(frs, base_policy(min_trust_tier=1, route_language="en"), NOW)
    assert not ok
    cats = [r.category for r in reasons]
    assert cats == ["jurisdiction", "effective_date", "license_ttl", "trust_tier", "anchor_missing", "language_mismatch", "malformed_license"]
    assert dict((r.category, r.fragment_ids) for r in reasons)["jurisdiction"] == ("J",)


def test_duplicates_by_hash_and_shingles():
    a = frag("A", "i1", body="the quick brown fox jumps over the lazy dog near the river bank")
    b = frag("B", "i2", body="the quick brown fox jumps over the lazy dog near the river bank!")
    ok, reasons = scope_ok([a, b], base_policy(), NOW)
    assert not ok and reasons[0].category == "duplicate" and reasons[0].fragment_ids == ("B",)


def test_scope_is_deterministic():
    frs = [frag("J", "i1", jurisdiction="US"), frag("K", "i2", trust_tier=0)]
    assert scope_ok(frs, base_policy(min_trust_tier=1), NOW) == scope_ok(frs, base_policy(min_trust_tier=1), NOW)


def test_temporal_windows_and_diversity():
    frs = [frag("a", "i", date(2020, 1, 10)), frag("b", "i", date(2020, 3, 1)), frag("c", "i", date(2021, 8, 1))]
    ws = temporal_windows(frs)
    assert [w.members for w in ws] == [("a", "b"), ("c",)]
    ok, _ = temporal_diversity_ok(frs, base_policy(), True)
    assert ok
    close = [frag("a", "i", date(2020, 1, 10)), frag("c", "i", date(2020, 9, 1))]
    assert not temporal_diversity_ok(close, base_policy(), True)[0]
    assert temporal_diversity_ok(close, base_policy(), False)[0]
    with pytest.raises(MissingDates):
        temporal_diversity_ok([frag("x", "i", None)], base_policy(), True)


def test_drifting_topic_monoculture_scope_reason():
    frs = [frag("a", "i1", date(2020, 1, 10)), frag("b", "i2", date(2020, 2, 1))]
    ok, reasons = scope_ok(frs, base_policy(drifting_topics=("ai-act",)), NOW, topic="ai-act")
    assert not ok and reasons[0].category == "temporal_monoculture"


def _report(frs, pool):
    return g_indep(frs, build_graph(pool), base_policy())


def test_poisoning_gate_subgates_in_order():
    ex = worked_example()
    pool = list(ex.values())
    good = [ex["A"], ex["B"], ex["D"]]
    assert poisoning_gate(pool, good, base_policy(), _report(good, pool)).passed
    few = [ex["B"], ex["C"]]
    r = poisoning_gate(few, few, base_policy(), _report(few, pool))
    assert r.failed_subgate == "issuer_diversity" and r.reason == "insufficient_diversity"
    mono = [ex["A"], ex["B"], ex["C"]]
    assert poisoning_gate(pool, mono, base_policy(), _report(mono, pool)).failed_subgate == "mses_monoculture"
    assert poisoning_gate(pool, mono, base_policy(phase_b=False), _report(mono, pool)).failed_subgate == "g_indep"
    drift = poisoning_gate(pool, [ex["A"], ex["B"]], base_policy(), _report([ex["A"], ex["B"]], pool), True)
    assert drift.failed_subgate == "temporal"


def test_metadata_inference():
    f = dataclasses.replace(frag("x", "i", None), jurisdiction=None)
    assert needs_inference(f)
    meta, conf = infer_metadata(f, {"eu": ShardInfo("EU", date(2020, 1, 1), None)})
    assert conf == 1.0 and meta.jurisdiction == "EU" and meta.inferred_fields == ("jurisdiction", "effective_window")
    meta, conf = infer_metadata(f, {})
    assert conf == 0.0
    assert not needs_inference(frag("y", "i"))
