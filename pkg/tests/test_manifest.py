import hashlib
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import oracle_root

from evgate.clock import ScriptedClock, SimClock
from evgate.errors import DuplicateDocId, LeafCapExceeded, MalformedEntry, MalformedProof, SignerRevoked
from evgate.keys import KeyHandle, TrustStore
from evgate.manifest import (
    DocumentEntry,
    FileAnchorSink,
    License,
    Multiproof,
    ProofBudget,
    ShardId,
    ShardManifest,
    SmtProof,
    anchor_root,
    build_manifest,
    key_for,
    prove,
    prove_multi,
    update_manifest,
    verify_proof,
)

SHARD = ShardId("EU", "regs", "EU")
LIC = License("cc-by", None)


def entry(i):
    return DocumentEntry(f"doc-{i}", hashlib.sha256(str(i).encode()).digest(), LIC, (f"s{i}",), 1, "iss")


@settings(max_examples=25, deadline=None)
@given(st.sets(st.integers(0, 10_000), min_size=1, max_size=12))
def test_root_matches_recursive_oracle(ids):
    es = [entry(i) for i in sorted(ids)]
    assert build_manifest(es, SHARD).root == oracle_root(es)


def test_root_is_order_independent():
    es = [entry(i) for i in range(40)]
    assert build_manifest(es, SHARD).root == build_manifest(list(reversed(es)), SHARD).root


def test_inclusion_and_non_inclusion():
    m = build_manifest([entry(i) for i in range(200)], SHARD)
    p = prove(m, "doc-7")
    assert p.kind == "inclusion" and verify_proof(m.root, p).valid
    q = prove(m, "absent-doc")
    assert q.kind == "non-inclusion" and verify_proof(m.root, q.to_bytes()).valid
    assert SmtProof.from_bytes(p.to_bytes()) == p


def test_tampered_proof_fails():
    m = build_manifest([entry(i) for i in range(50)], SHARD)
    data = bytearray(prove(m, "doc-3").to_bytes())
    data[-1] ^= 0x01
    try:
        ok = verify_proof(m.root, bytes(data)).valid
    except MalformedProof:
        ok = False
    assert not ok


def test_multiproof_no_larger_than_singles():
    m = build_manifest([entry(i) for i in range(500)], SHARD)
    rng = random.Random(1)
    for _ in range(30):
        docs = [f"doc-{i}" for i in rng.sample(range(600), rng.randint(2, 12))]
        mp = prove_multi(m, docs)
        assert mp.compute_root() == m.root
        assert mp.size_bytes <= sum(prove(m, d).size_bytes for d in docs)
        assert Multiproof.from_bytes(mp.to_bytes()) == mp


def test_proof_timing_and_size_budget():
    m = build_manifest([entry(i) for i in range(10)], SHARD)
    clock = SimClock(0)
    slow = ScriptedClock([0, 400])
    assert not verify_proof(m.root, prove(m, "doc-1"), ProofBudget(), clock).timed_out
    check = verify_proof(m.root, prove(m, "doc-1"), ProofBudget(timeout_ms=100, max_size_bytes=10), slow)
    assert check.timed_out and check.oversize and check.valid


def test_entry_errors():
    with pytest.raises(DuplicateDocId):
        build_manifest([entry(1), entry(1)], SHARD)
    with pytest.raises(MalformedEntry):
        build_manifest([], SHARD)
    with pytest.raises(MalformedEntry):
        build_manifest([DocumentEntry("x", b"short", LIC)], SHARD)


def test_leaf_cap(monkeypatch):
    import evgate.manifest as mm

    monkeypatch.setattr(mm, "MAX_LEAVES", 5)
    with pytest.raises(LeafCapExceeded):
        build_manifest([entry(i) for i in range(6)], SHARD)


def test_save_load_and_update(tmp_path):
    m = build_manifest([entry(i) for i in range(5)], SHARD, sealed_at=10)
    m.save(tmp_path / "m.json")
    back = ShardManifest.load(tmp_path / "m.json")
    assert back.root == m.root and back.entry("doc-2") == m.entry("doc-2")
    m2 = update_manifest(m, [entry(i) for i in range(6)], sealed_at=20)
    assert m2.root != m.root and m2.superseded_roots == ((m.root.hex(), 10),)


def test_anchor_and_revoked_signer(tmp_path):
    m = build_manifest([entry(i) for i in range(3)], SHARD)
    key = KeyHandle.generate("anchor-1", seed="a")
    ts = TrustStore()
    ts.add(key.trusted())
    sink = FileAnchorSink(tmp_path / "anchors.jsonl")
    rec = anchor_root(m, key, sink, now=5)
    assert rec.verify(ts) and sink.records() == [rec]
    with pytest.raises(SignerRevoked):
        anchor_root(m, key, sink, now=6, is_revoked=lambda kid, t: True)


def test_key_is_sha256_of_doc_id():
    assert key_for("abc") == hashlib.sha256(b"abc").digest()


def test_one_key_multiproof_matches_single_size():
    m = build_manifest([entry(i) for i in range(300)], SHARD)
    for doc in ("doc-5", "absent-doc"):
        multi = prove_multi(m, [doc])
        assert multi.size_bytes == prove(m, doc).size_bytes
        back = Multiproof.from_bytes(multi.to_bytes())
        assert back == multi and verify_proof(m.root, multi.to_bytes()).valid
    with pytest.raises(MalformedProof):
        Multiproof.from_bytes(bytes([1, 2, 1, 0]) + b"\x00" * 96)
