"""Answer receipts (full and lite) and quorum promotion receipts.

A receipt is a canonical JSON object with a detached signature block. The
signed span is the whole object minus ``signature`` and ``resignatures``.
Verification is pure: it reads only the trust store and KRN state it is
handed.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .canonical import canonical_bytes as _canonical, canonical_hash, sha256_hex
from .errors import MalformedProof, MissingMandatoryField
from .keys import KeyHandle, TrustStore
from .krn import KrnState
from .manifest import SELECTOR_CAP, Multiproof, key_for
from .policy import Fragment, PolicySnapshot

RECEIPT_VERSION = "evgate-receipt/1"
PROMOTION_VERSION = "evgate-promotion/1"
UNSIGNED_FIELDS = ("signature", "resignatures")

# Upper bin edges (ms) for the proof latency summary.
LATENCY_BINS = (10, 25, 50, 100, 200, 300, 500, 1000)

COMMON_FIELDS = (
    "receipt_version",
    "receipt_id",
    "mode",
    "return_state",
    "reasons",
    "answer_hash",
    "route_version",
    "contract_version",
    "policy_snapshot_hash",
    "disclosure_scope",
    "fragment_mode",
    "evidence",
    "verifier_stats",
    "scope_diagnostics",
    "mses_issuer_counts",
    "g_indep_value",
    "K",
    "poisoning_gate_pass",
    "proofs",
    "proof_size_bytes",
    "proof_timed_out",
    "proof_latency_histogram",
    "jitter_policy",
    "signing_scheme",
    "promotion_digest",
    "promotion_approvals",
    "escalation_trail",
    "linkability_note",
)
SIGNED_FIELDS = ("kid", "alg", "signed_at")
PROMOTE_REQUIRED = ("g_indep_value", "K")


# --------------------------------------------------------------------------
# helpers


def canonical_bytes(receipt: Mapping) -> bytes:
    """Bytes covered by the signature: everything but the signature blocks."""
    return _canonical({k: v for k, v in receipt.items() if k not in UNSIGNED_FIELDS})


def parse_receipt(data: bytes | str) -> dict:
    return json.loads(data)


def receipt_file_bytes(receipt: Mapping) -> bytes:
    """On-disk form: the full object, canonical, newline-terminated."""
    return _canonical(dict(receipt)) + b"\n"


def latency_bin(ms: float) -> str:
    for edge in LATENCY_BINS:
        if ms <= edge:
            return f"le_{edge}ms"
    return f"gt_{LATENCY_BINS[-1]}ms"


def proof_latency_histogram(latencies_ms: Sequence[float]) -> dict:
    """p50/p95/p99 reported as bin labels, never as raw timings."""
    if not latencies_ms:
        return {"n": 0, "p50": None, "p95": None, "p99": None}
    xs = sorted(latencies_ms)

    def rank(p: int) -> float:
        # nearest-rank percentile
        k = max(1, -(-p * len(xs) // 100))
        return xs[k - 1]

    return {"n": len(xs), "p50": latency_bin(rank(50)), "p95": latency_bin(rank(95)), "p99": latency_bin(rank(99))}


def jitter_descriptor(policy: PolicySnapshot) -> dict:
    return {"halfwidth": policy.jitter_halfwidth, "name": policy.jitter_policy, "window": "session"}


# --------------------------------------------------------------------------
# PII scanning and redaction


@dataclass(frozen=True)
class PiiFinding:
    fragment_id: str
    field: str  # body | selector
    kind: str
    start: int
    end: int

    def to_dict(self) -> dict:
        return {"end": self.end, "field": self.field, "fragment_id": self.fragment_id, "kind": self.kind, "start": self.start}


def _scan_text(text: str, patterns: Mapping[str, str]) -> list[tuple[str, int, int]]:
    hits = []
    for kind, pat in sorted(patterns.items()):
        hits.extend((kind, m.start(), m.end()) for m in re.finditer(pat, text))
    return sorted(hits, key=lambda h: (h[1], h[2], h[0]))


def pii_scan(fragments: Iterable[Fragment], patterns: Mapping[str, str] | None = None) -> list[PiiFinding]:
    """Pattern-based scan of fragment bodies and selectors."""
    if patterns is None:
        patterns = PolicySnapshot().pii_patterns
    out = []
    for f in fragments:
        for kind, s, e in _scan_text(f.body or "", patterns):
            out.append(PiiFinding(f.fid, "body", kind, s, e))
        for sel in f.selectors:
            for kind, s, e in _scan_text(sel, patterns):
                out.append(PiiFinding(f.fid, "selector", kind, s, e))
    return out


def mask_text(text: str, patterns: Mapping[str, str]) -> str:
    hits = _scan_text(text, patterns)
    out, pos = [], 0
    for kind, s, e in hits:
        if s < pos:  # overlapping match already masked
            continue
        out.append(text[pos:s])
        out.append(f"[REDACTED:{kind}]")
        pos = e
    out.append(text[pos:])
    return "".join(out)


def redact(receipt: Mapping, policy: PolicySnapshot) -> tuple[dict, list[dict]]:
    """Mask PII in the receipt's cited bodies and selectors.

    Returns the redacted copy plus the findings. Oversized selectors are
    dropped and listed under ``rejected_selectors``; ``fragment_mode=hash``
    strips bodies entirely.
    """
    r = copy.deepcopy(dict(receipt))
    findings = []
    for cited in r.get("evidence", {}).get("fragments", []):
        fid = cited["fragment_id"]
        if "body" in cited:
            if r.get("fragment_mode") != "full" or r.get("mode") != "full":
                del cited["body"]
            else:
                for kind, s, e in _scan_text(cited["body"], policy.pii_patterns):
                    findings.append({"end": e, "field": "body", "fragment_id": fid, "kind": kind, "start": s})
                cited["body"] = mask_text(cited["body"], policy.pii_patterns)
        kept, rejected = [], []
        for sel in cited.get("selectors", []):
            if len(sel.encode()) > SELECTOR_CAP:
                rejected.append(sha256_hex(sel.encode()))
                continue
            for kind, s, e in _scan_text(sel, policy.pii_patterns):
                findings.append({"end": e, "field": "selector", "fragment_id": fid, "kind": kind, "start": s})
            kept.append(mask_text(sel, policy.pii_patterns))
        if "selectors" in cited:
            cited["selectors"] = kept
        if rejected:
            cited["rejected_selectors"] = rejected
    r["pii_findings"] = findings
    return r, findings


# --------------------------------------------------------------------------
# building


def _cited(f: Fragment, mode: str, policy: PolicySnapshot) -> dict:
    body = f.body or ""
    d = {
        "content_hash": f.content_hash.hex() if isinstance(f.content_hash, bytes) else f.content_hash,
        "doc_id": f.doc_id,
        "fragment_id": f.fid,
        "issuer": f.issuer,
        "shard_id": f.shard_id,
    }
    if not (mode == "lite" and policy.lite_omit_selectors):
        d["selectors"] = [s for s in f.selectors if len(s.encode()) <= SELECTOR_CAP]
    if policy.fragment_mode in ("digest", "full"):
        d["body_digest"] = sha256_hex(body.encode())
    if mode == "full" and policy.fragment_mode == "full":
        d["body"] = body
    return d


def build_receipt(
    trace,
    evidence,
    policy: PolicySnapshot,
    mode: str | None = None,
    *,
    answer: str = "",
    proof_latencies_ms: Sequence[float] | None = None,
    m_eff: Mapping | None = None,
    signing_scheme: Mapping | None = None,
    promotion_digest: str | None = None,
    promotion_approvals: Sequence[Mapping] = (),
) -> dict:
    """Unsigned receipt for a decision; ``mode`` defaults from the return state."""
    state = trace.return_state
    if mode is None:
        mode = "full" if state == "PROMOTE_FULL" else "lite"
    if mode not in ("full", "lite"):
        raise ValueError(f"mode must be full or lite, not {mode!r}")
    if mode == "full" and state != "PROMOTE_FULL":
        raise ValueError(f"{state} receipts must be lite")
    promote = state != "ABSTAIN"

    if promote and trace.independence is None:
        raise MissingMandatoryField("g_indep_value")
    if promote and (evidence.pack is None or not evidence.pack.mses):
        raise MissingMandatoryField("evidence.mses")

    pack = evidence.pack
    mses_ids = set(pack.mses) if (promote and pack) else set()
    cited = [_cited(v.fragment, mode, policy) for v in evidence.supports if v.fid in mses_ids]
    ev = {"fragments": cited}
    if promote and pack is not None:
        ev.update(pack.to_dict())
    counts: dict[str, int] = {}
    for c in cited:
        counts[c["issuer"]] = counts.get(c["issuer"], 0) + 1

    stats = dict(trace.multiplicity)
    if m_eff is not None:
        stats["m_eff"] = dict(m_eff)

    proofs = {}
    if promote:
        for shard, mp in sorted(evidence.multiproofs.items()):
            proofs[shard] = {"multiproof": mp.to_bytes().hex(), "root": evidence.roots[shard].hex()}
    proof = trace.proof or {"proof_size_bytes": 0, "proof_timed_out": False, "elapsed_ms": 0}
    lat = list(proof_latencies_ms) if proof_latencies_ms is not None else (
        [proof["elapsed_ms"]] if trace.proof else []
    )
    pg = trace.poisoning_gate
    indep = trace.independence

    r = {
        "receipt_version": RECEIPT_VERSION,
        "receipt_id": f"{trace.route_id}/{trace.request_id}",
        "mode": mode,
        "return_state": state,
        "reasons": list(trace.reasons),
        "abstain_reason": trace.abstain_reason,
        "answer_hash": sha256_hex(answer.encode()) if promote else None,
        "route_version": policy.route_version,
        "contract_version": policy.contract_version,
        "policy_snapshot_hash": trace.snapshot_hash,
        "disclosure_scope": policy.disclosure_scope,
        "fragment_mode": policy.fragment_mode,
        "evidence": ev,
        "verifier_stats": stats,
        "scope_diagnostics": {
            "inferred": dict(trace.inferred),
            "reasons": list(trace.reasons),
            "scope": list(trace.scope_reasons),
        },
        "mses_issuer_counts": dict(sorted(counts.items())),
        "g_indep_value": indep["g_indep"] if indep else None,
        "K": indep["k"] if indep else policy.k_hops,
        "independence": indep,
        "poisoning_gate_pass": bool(pg and pg["pass"]),
        "poisoning_gate_reason": None if (pg is None or pg["pass"]) else pg["reason"],
        "poisoning_gate_subgate": None if (pg is None or pg["pass"]) else pg["failed_subgate"],
        "proofs": proofs,
        "proof_size_bytes": int(proof["proof_size_bytes"]) if promote else 0,
        "proof_timed_out": bool(proof["proof_timed_out"]),
        "proof_latency_histogram": proof_latency_histogram(lat),
        "jitter_policy": jitter_descriptor(policy),
        "signing_scheme": dict(signing_scheme or {"type": "single"}),
        "promotion_digest": promotion_digest or "0" * 64,
        "promotion_approvals": [dict(a) for a in promotion_approvals],
        "escalation_trail": list(trace.escalation_trail),
        "linkability_note": "selectors and content hashes may link this receipt to source documents",
    }
    if trace.temporal_windows is not None:
        r["temporal_windows"] = list(trace.temporal_windows)
    return r


def lite_projection(receipt: Mapping, policy: PolicySnapshot | None = None) -> dict:
    """Drop bodies (and optionally selectors) from a receipt; must be re-signed."""
    r = {k: copy.deepcopy(v) for k, v in receipt.items() if k not in UNSIGNED_FIELDS}
    r["mode"] = "lite"
    for c in r.get("evidence", {}).get("fragments", []):
        c.pop("body", None)
        if policy is not None and policy.lite_omit_selectors:
            c.pop("selectors", None)
    return r


# --------------------------------------------------------------------------
# signing


def _sign_block(span: bytes, key: KeyHandle, signed_at: int) -> dict:
    return {"alg": key.alg, "kid": key.kid, "signed_at": signed_at, "value": key.sign(span).hex()}


def sign_receipt(receipt: Mapping, key: KeyHandle, signed_at: int) -> dict:
    """Set kid/alg/signed_at in the signed span and attach the signature."""
    r = {k: v for k, v in receipt.items() if k not in UNSIGNED_FIELDS}
    r.update(kid=key.kid, alg=key.alg, signed_at=int(signed_at))
    r["signature"] = _sign_block(canonical_bytes(r), key, int(signed_at))
    return r


def resign_receipt(receipt: Mapping, key: KeyHandle, now: int) -> dict:
    """Add a re-attestation signature over the unchanged signed span."""
    r = copy.deepcopy(dict(receipt))
    r.setdefault("resignatures", []).append(_sign_block(canonical_bytes(r), key, int(now)))
    return r


# --------------------------------------------------------------------------
# verification


@dataclass(frozen=True)
class VerifyResult:
    passed: bool
    reasons: tuple[str, ...] = ()
    notes: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"notes": list(self.notes), "pass": self.passed, "reasons": list(self.reasons)}


def _structure(r: Mapping) -> list[str]:
    missing = [f for f in COMMON_FIELDS + SIGNED_FIELDS if f not in r]
    if "signature" not in r:
        missing.append("signature")
    if not missing and r["return_state"] != "ABSTAIN":
        missing += [f for f in PROMOTE_REQUIRED if r.get(f) is None]
        if not r["evidence"].get("mses"):
            missing.append("evidence.mses")
    if not missing and r["return_state"] == "ABSTAIN" and not r.get("abstain_reason"):
        missing.append("abstain_reason")
    return [f"missing_field:{f}" for f in missing]


def _sig_ok(block: Mapping, span: bytes, trust_store: TrustStore) -> str | None:
    """None when the block verifies, else a reason code."""
    try:
        tk = trust_store.get(block["kid"])
    except Exception:
        return "unknown_kid"
    if tk.alg != block.get("alg"):
        return "alg_mismatch"
    try:
        sig = bytes.fromhex(block["value"])
    except (KeyError, ValueError, TypeError):
        return "signature_mismatch"
    if not tk.verify(span, sig):
        return "signature_mismatch"
    if not tk.valid_at(int(block["signed_at"])):
        return "key_not_valid_at_signing"
    return None


def _proofs(r: Mapping, manifest_roots: Mapping[str, str] | None) -> list[str]:
    bad = []
    cited = r["evidence"].get("fragments", [])
    for shard, p in sorted(r["proofs"].items()):
        try:
            mp = Multiproof.from_bytes(bytes.fromhex(p["multiproof"]))
            root = mp.compute_root().hex()
        except (MalformedProof, ValueError, KeyError, TypeError):
            bad.append(f"proof_invalid:{shard}")
            continue
        if root != p.get("root") or (manifest_roots is not None and manifest_roots.get(shard) != root):
            bad.append(f"proof_invalid:{shard}")
            continue
        present = {k for k, lf in zip(mp.keys, mp.leaves) if any(lf)}
        for c in cited:
            if c["shard_id"] == shard and key_for(c["doc_id"]) not in present:
                bad.append(f"proof_missing:{c['fragment_id']}")
    for c in cited:
        if c["shard_id"] not in r["proofs"] and r["return_state"] != "ABSTAIN":
            bad.append(f"proof_missing:{c['fragment_id']}")
    return bad


def verify_receipt(
    signed: Mapping,
    trust_store: TrustStore,
    krn_state: KrnState | None,
    now: int,
    *,
    manifest_roots: Mapping[str, str] | None = None,
    expected_versions: Mapping[str, str] | None = None,
    known_bodies: Iterable[str] = (),
) -> VerifyResult:
    """Offline check: structure, signature, proofs, revocation, versions.

    Never raises on bad input; every problem becomes an ordered reason.
    A missing KRN state is treated as an unreachable mirror (fail closed).
    """
    try:
        return _verify(signed, trust_store, krn_state, now, manifest_roots, expected_versions, tuple(known_bodies))
    except Exception as exc:  # malformed input of any shape
        return VerifyResult(False, (f"malformed:{type(exc).__name__}",))


def _verify(r, trust_store, krn_state, now, manifest_roots, expected_versions, known_bodies) -> VerifyResult:
    if not isinstance(r, Mapping):
        return VerifyResult(False, ("malformed:not_an_object",))
    reasons = _structure(r)
    if reasons:
        return VerifyResult(False, tuple(reasons))
    notes: list[str] = []
    span = canonical_bytes(r)
    sig = r["signature"]
    if (sig.get("kid"), sig.get("alg"), sig.get("signed_at")) != (r["kid"], r["alg"], r["signed_at"]):
        reasons.append("signature_mismatch")
    else:
        err = _sig_ok(sig, span, trust_store)
        if err:
            reasons.append(err)
    if r["mode"] == "lite":
        blob = json.dumps(r["evidence"])
        if any("body" in c for c in r["evidence"].get("fragments", [])) or any(
            b and b in blob for b in known_bodies
        ):
            reasons.append("lite_contains_body")
    reasons += _proofs(r, manifest_roots)

    # revocation: the primary signature, or a valid re-attestation
    if not reasons:
        if krn_state is None:
            krn_state = KrnState(None, None, None)
        primary = krn_state.check(r["kid"], int(r["signed_at"]), now)
        if not primary.ok:
            rescued = False
            for block in r.get("resignatures", []):
                if _sig_ok(block, span, trust_store) is None:
                    st = krn_state.check(block["kid"], int(block["signed_at"]), now)
                    if st.ok:
                        rescued = True
                        notes.append(f"reattested_by:{block['kid']}")
                        break
            if not rescued:
                reasons += list(primary.reasons) or [primary.status.lower()]
    if expected_versions:
        for k in ("route_version", "contract_version"):
            if k in expected_versions and expected_versions[k] != r[k]:
                reasons.append("policy_version_mismatch")
                break
    return VerifyResult(not reasons, tuple(reasons), tuple(notes))


# --------------------------------------------------------------------------
# finalization


def finalize(
    decision,
    policy: PolicySnapshot,
    key: KeyHandle,
    signed_at: int,
    *,
    answer: str = "",
    **build_kwargs,
):
    """PII scan, privacy escalation, receipt build, redaction and signing.

    Returns ``(decision, signed_receipt)``; the decision is replaced by an
    ABSTAIN(privacy) one when PII is found and the policy says abstain.
    """
    ev = decision.evidence
    mses = set(ev.pack.mses) if ev.pack and decision.return_state != "ABSTAIN" else set()
    cited = [v.fragment for v in ev.supports if v.fid in mses]
    findings = pii_scan(cited, policy.pii_patterns)
    if findings and policy.pii_action == "abstain" and decision.return_state != "ABSTAIN":
        trace = dataclasses.replace(
            decision.trace,
            return_state="ABSTAIN",
            reasons=list(decision.trace.reasons) + ["privacy"],
            abstain_reason="privacy",
            escalation_trail=list(decision.trace.escalation_trail)
            + [{"gate": "privacy", "policy_version": policy.route_version, "reason": "privacy", "ts": int(signed_at)}],
        )
        decision = dataclasses.replace(decision, return_state="ABSTAIN", trace=trace)
    receipt = build_receipt(decision.trace, decision.evidence, policy, answer=answer, **build_kwargs)
    receipt, _ = redact(receipt, policy)
    receipt["pii_findings"] = [f.to_dict() for f in findings]
    return decision, sign_receipt(receipt, key, signed_at)


# --------------------------------------------------------------------------
# promotion receipts


def promotion_digest(manifest_roots: Mapping[str, str]) -> str:
    """SHA-256 over the promoted manifest set (shard id -> root hex)."""
    return canonical_hash({k: manifest_roots[k] for k in sorted(manifest_roots)}).hex()


def _approval_payload(digest: str, ts: int) -> bytes:
    return _canonical({"promotion_digest": digest, "timestamp": int(ts)})


@dataclass(frozen=True)
class Approval:
    key: KeyHandle
    timestamp: int


def build_promotion_receipt(
    manifest_roots: Mapping[str, str],
    approvals: Sequence[Approval],
    scheme: tuple[int, int],
    *,
    artifacts: Mapping[str, bytes] | None = None,
    policy: PolicySnapshot | None = None,
    verifier_outcomes: Mapping | None = None,
    slo_results: Mapping | None = None,
) -> dict:
    n, t = scheme
    if not 1 <= t <= n:
        raise ValueError("scheme needs 1 <= t <= n")
    digest = promotion_digest(manifest_roots)
    ordered = sorted(approvals, key=lambda a: (a.timestamp, a.key.kid))
    policy = policy or PolicySnapshot()
    return {
        "approvals": [
            {
                "alg": a.key.alg,
                "kid": a.key.kid,
                "signature": a.key.sign(_approval_payload(digest, a.timestamp)).hex(),
                "timestamp": int(a.timestamp),
            }
            for a in ordered
        ],
        "artifact_hashes": {k: sha256_hex(v) for k, v in sorted((artifacts or {}).items())},
        "contract_version": policy.contract_version,
        "manifest_roots": dict(sorted(manifest_roots.items())),
        "policy_snapshot_hash": policy.snapshot_hash,
        "promotion_digest": digest,
        "receipt_version": PROMOTION_VERSION,
        "route_version": policy.route_version,
        "scheme": {"n": n, "t": t},
        "slo_results": dict(slo_results or {}),
        "thresholds": {
            "alpha": policy.alpha,
            "g_indep_min": policy.g_indep_min,
            "heavy_cap": policy.heavy_cap,
            "q": policy.q,
            "tau": policy.tau,
        },
        "verifier_outcomes": dict(verifier_outcomes or {}),
    }


def verify_promotion(receipt: Mapping, trust_store: TrustStore) -> VerifyResult:
    reasons = []
    try:
        digest = promotion_digest(receipt["manifest_roots"])
        if digest != receipt["promotion_digest"]:
            reasons.append("digest_mismatch")
        kids = [a["kid"] for a in receipt["approvals"]]
        if len(kids) != len(set(kids)):
            reasons.append("duplicate_approver")
        order = [(a["timestamp"], a["kid"]) for a in receipt["approvals"]]
        if order != sorted(order):
            reasons.append("approvals_unordered")
        valid = set()
        for a in receipt["approvals"]:
            block = {"alg": a["alg"], "kid": a["kid"], "signed_at": a["timestamp"], "value": a["signature"]}
            if _sig_ok(block, _approval_payload(receipt["promotion_digest"], a["timestamp"]), trust_store) is None:
                valid.add(a["kid"])
        t = int(receipt["scheme"]["t"])
        if len(valid) < t:
            reasons.append("insufficient_quorum")
    except (KeyError, TypeError, ValueError) as exc:
        reasons.append(f"malformed:{type(exc).__name__}")
    return VerifyResult(not reasons, tuple(reasons))
