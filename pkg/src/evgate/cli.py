"""``evgate`` command-line entry point.

Exit codes: 0 success/pass, 1 verification or gate failure, 2 gate run
dominated by ABSTAIN, 3 configuration or input error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .canonical import canonical_bytes, dump_json, sha256_hex
from .clock import SimClock
from .engine import ABSTAIN, Deps, RateLimiter, Request, RouteState, TableVerifier, Verdict, decide
from .errors import EvGateError
from .gates import ShardInfo
from .independence import load_citation_index
from .keys import KeyHandle, TrustStore
from .krn import KrnState, KrnStream, MirrorState, SubstrateLog, mirror_sync, reconcile, status_summary
from .manifest import (
    ProofBudget,
    ShardId,
    ShardManifest,
    build_manifest,
    load_entries_jsonl,
    prove,
    prove_multi,
    verify_proof,
)
from .policy import PolicySnapshot, _date, load_fragments_jsonl
from .receipt import finalize, receipt_file_bytes, verify_receipt
from .simulator import SimConfig, analytic_claim_error, power_overlay, simulate
from .stats import sample_size_two_proportions

log = logging.getLogger("evgate")

EXIT_OK, EXIT_FAIL, EXIT_ABSTAIN, EXIT_CONFIG = 0, 1, 2, 3


class CliError(Exception):
    """Bad input; maps to exit 3."""


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


# --------------------------------------------------------------------------
# fixture bundles


@dataclass
class FixtureBundle:
    """A hash-pinned set of gate-run inputs described by ``bundle.json``.

    Every file the bundle names must appear in ``digests`` with its SHA-256.
    """

    root: Path
    policy: PolicySnapshot
    fragments: dict
    requests: list
    verdicts: dict
    manifests: dict
    citations: list
    shard_catalog: dict
    clock_start_ms: int
    clock_events: list
    proof_delays_ms: dict
    signing: dict
    answers: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "FixtureBundle":
        path = Path(path)
        root = path if path.is_dir() else path.parent
        spec = _read_json(root / "bundle.json" if path.is_dir() else path)
        digests = spec.get("digests", {})
        named = [spec["policy"], spec["fragments"], spec["requests"], spec["verdicts"]]
        named += list(spec.get("manifests", {}).values())
        if spec.get("citations"):
            named.append(spec["citations"])
        for rel in named:
            if rel not in digests:
                raise CliError(f"fixture file {rel} has no pinned digest")
        for rel, want in sorted(digests.items()):
            try:
                got = sha256_hex((root / rel).read_bytes())
            except OSError as exc:
                raise CliError(f"fixture file {rel}: {exc}") from exc
            if got != want:
                raise CliError(f"fixture hash mismatch for {rel}: pinned {want}, found {got}")
        policy = PolicySnapshot.load(root / spec["policy"])
        frs = {f.fid: f for f in load_fragments_jsonl(root / spec["fragments"])}
        reqs = []
        for line in (root / spec["requests"]).read_text().splitlines():
            if line.strip():
                reqs.append(Request.from_dict(json.loads(line), frs))
        raw = _read_json(root / spec["verdicts"])
        verdicts = {
            tier: {
                fid: [Verdict.from_dict(x) for x in v] if isinstance(v, list) else Verdict.from_dict(v)
                for fid, v in table.items()
            }
            for tier, table in raw.items()
        }
        manifests = {sid: ShardManifest.load(root / rel) for sid, rel in spec.get("manifests", {}).items()}
        cites = load_citation_index(root / spec["citations"]) if spec.get("citations") else []
        catalog = {}
        for sid, info in spec.get("shard_catalog", {}).items():
            catalog[sid] = ShardInfo(info.get("jurisdiction"), _date(info.get("effective_start")), _date(info.get("effective_end")))
        clock = spec.get("clock", {})
        return cls(
            root=root,
            policy=policy,
            fragments=frs,
            requests=sorted(reqs, key=lambda r: (r.arrival, r.request_id)),
            verdicts=verdicts,
            manifests=manifests,
            citations=cites,
            shard_catalog=catalog,
            clock_start_ms=int(clock.get("start_ms", 0)),
            clock_events=sorted(clock.get("events", []), key=lambda e: e["at_ms"]),
            proof_delays_ms=dict(spec.get("proof_delays_ms", {})),
            signing=dict(spec.get("signing", {"kid": "gate-key-1", "alg": "Ed25519", "seed": "fixture"})),
            answers=dict(spec.get("answers", {})),
        )


def run_bundle(bundle: FixtureBundle, out: Path) -> dict:
    """Decide every request, sign receipts and write the run directory."""
    policy = bundle.policy
    clock = SimClock(bundle.clock_start_ms)
    verifiers = {t: TableVerifier(t, bundle.verdicts.get(t, {}), clock) for t in ("cheap", "small", "heavy")}
    deps = Deps(
        verifiers,
        clock,
        bundle.manifests,
        bundle.shard_catalog,
        bundle.citations,
        proof_latency_ms=lambda r: int(bundle.proof_delays_ms.get(r.request_id, 0)),
    )
    key = KeyHandle.generate(bundle.signing["kid"], bundle.signing.get("alg", "Ed25519"), seed=bundle.signing["seed"])
    routes: dict[str, RouteState] = {}
    limiter = RateLimiter.from_policy(policy)
    events = list(bundle.clock_events)
    traces, receipts, denials = {}, {}, []
    counts: Counter = Counter()
    for req in bundle.requests:
        if req.arrival > clock.now_ms():
            clock.set(req.arrival)
        rs = routes.setdefault(req.route_id, RouteState(req.route_id, policy.heavy_cap))
        while events and events[0]["at_ms"] <= req.arrival:
            ev = events.pop(0)
            st = routes.setdefault(ev.get("route_id", req.route_id), RouteState(ev.get("route_id", req.route_id), policy.heavy_cap))
            if ev["action"] == "incident_open":
                st.open_incident(ev["ticket_id"], ev["at_ms"], int(ev["duration_ms"]))
            elif ev["action"] == "incident_close":
                st.close_incident(ev["at_ms"])
        if not limiter.admit(req.org_id, req.route_id, req.arrival):
            denials.append({"arrival": req.arrival, "org_id": req.org_id, "request_id": req.request_id, "route_id": req.route_id})
            continue
        d = decide(req, policy, rs, deps)
        d, receipt = finalize(d, policy, key, clock.now_ms(), answer=bundle.answers.get(req.request_id, req.claim))
        counts[d.return_state] += 1
        traces[req.request_id] = d.trace.to_dict()
        receipts[req.request_id] = receipt

    out.mkdir(parents=True, exist_ok=True)
    for rid, t in traces.items():
        _write_bytes(out / "traces" / f"{rid}.trace.json", canonical_bytes(t) + b"\n")
    for rid, r in receipts.items():
        _write_bytes(out / "receipts" / f"{rid}.receipt.json", receipt_file_bytes(r))
    ts = TrustStore()
    ts.add(key.trusted())
    _write_bytes(out / "trust.json", canonical_bytes(ts.to_dict()) + b"\n")
    end = clock.now_ms()
    krn_dir = out / "krn"
    krn_dir.mkdir(exist_ok=True)
    for name in ("local.jsonl", "substrate.jsonl"):
        _write_bytes(krn_dir / name, b"")
    _write_bytes(krn_dir / "mirror.json", canonical_bytes(MirrorState(end).to_dict()) + b"\n")
    incident_log = [e.to_dict() for st in routes.values() for e in st.incident_log]
    summary = {
        "clock_end_ms": end,
        "counts": dict(sorted(counts.items())),
        "denials": denials,
        "incident_log": incident_log,
        "policy_snapshot_hash": policy.snapshot_hash.hex(),
        "requests": len(bundle.requests),
    }
    _write_bytes(out / "summary.json", canonical_bytes(summary) + b"\n")
    return summary


# --------------------------------------------------------------------------
# commands


def cmd_manifest(args) -> int:
    if args.action == "build":
        entries = load_entries_jsonl(args.entries)
        shard = ShardId.from_dict(_read_json(args.shard))
        m = build_manifest(entries, shard, sealed_at=args.sealed_at)
        m.save(args.out)
        _emit({"leaf_count": m.leaf_count, "out": str(args.out), "root": m.root.hex()})
        return EXIT_OK
    if args.action == "prove":
        m = ShardManifest.load(args.manifest)
        docs = args.doc
        proof = prove(m, docs[0]) if len(docs) == 1 else prove_multi(m, docs)
        data = proof.to_bytes()
        _write_bytes(Path(args.out), data)
        info = {"out": str(args.out), "root": m.root.hex(), "size_bytes": len(data)}
        info["kind"] = proof.kind if hasattr(proof, "kind") else "multiproof"
        _emit(info)
        return EXIT_OK
    # verify
    try:
        root = bytes.fromhex(args.root)
        data = Path(args.proof).read_bytes()
    except (ValueError, OSError) as exc:
        raise CliError(str(exc)) from exc
    try:
        check = verify_proof(root, data, ProofBudget(args.timeout_ms))
    except EvGateError as exc:
        _emit({"error": str(exc), "valid": False})
        return EXIT_FAIL
    _emit(
        {
            "elapsed_ms": check.elapsed_ms,
            "oversize": check.oversize,
            "size_bytes": check.size_bytes,
            "timed_out": check.timed_out,
            "valid": check.valid,
        }
    )
    return EXIT_OK if check.valid and not check.timed_out else EXIT_FAIL


def cmd_gate_run(args) -> int:
    bundle = FixtureBundle.load(args.fixture)
    summary = run_bundle(bundle, Path(args.out))
    _emit(summary["counts"])
    n = sum(summary["counts"].values())
    return EXIT_ABSTAIN if n and summary["counts"].get(ABSTAIN, 0) * 2 > n else EXIT_OK


def _krn_state(args) -> KrnState:
    local = KrnStream.load(args.krn) if args.krn else None
    sub = SubstrateLog(args.substrate) if args.substrate else None
    mirror = MirrorState.load(args.mirror) if args.mirror else None
    return KrnState(local, sub, mirror)


def cmd_verify(args) -> int:
    try:
        receipt = json.loads(Path(args.receipt).read_text())
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read receipt: {exc}") from exc
    trust = TrustStore.load(args.trust)
    state = _krn_state(args)
    now = args.now if args.now is not None else int(time.time() * 1000)
    roots = _read_json(args.roots) if args.roots else None
    res = verify_receipt(receipt, trust, state, now, manifest_roots=roots)
    if res.passed:
        print("PASS")
    else:
        print("FAIL")
        for r in res.reasons:
            print(r)
    for n in res.notes:
        print(f"note: {n}")
    return EXIT_OK if res.passed else EXIT_FAIL


def cmd_krn(args) -> int:
    local = KrnStream.load(args.krn)
    mirror = MirrorState.load(args.mirror) if Path(args.mirror).exists() else MirrorState()
    if args.action == "mirror":
        sub = SubstrateLog(args.substrate)
        res = mirror_sync(sub, local, mirror, SimClock(args.now))
        mirror.save(args.mirror)
        _emit({"appended": len(res.appended), "gap": None if res.gap is None else [res.gap.expected, res.gap.got], **mirror.to_dict()})
        return EXIT_OK if res.gap is None else EXIT_FAIL
    if args.action == "reconcile":
        sub = SubstrateLog(args.substrate)
        rep = reconcile(local, sub, args.now, args.promotion_digest, mirror)
        mirror.save(args.mirror)
        _emit(rep.to_dict())
        return EXIT_OK if rep.clean else EXIT_FAIL
    _emit(dict(status_summary(local, mirror, args.now)))
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = SimConfig.from_dict(_read_json(args.config))
    res = simulate(cfg)
    out = res.to_dict()
    if cfg.cascade_rule in ("any_fp", "any_error") and (cfg.model == "independent" or (cfg.rho == 0 and cfg.model == "gaussian")):
        target = analytic_claim_error(cfg)
        out["baseline_check"] = {"analytic": target, "within_3se": res.claim_error.within(target)}
    if args.out:
        if str(args.out).endswith(".csv"):
            buf = io.StringIO()
            w = csv.writer(buf)
            w.writerow(["metric", "value", "se"])
            for k in ("claim_error", "answer_error", "fwer_post_holm", "fdr_post_by", "fp_rate", "fn_rate"):
                if out.get(k):
                    w.writerow([k, out[k]["value"], out[k]["se"]])
            _write_bytes(Path(args.out), buf.getvalue().encode())
        else:
            dump_json(out, args.out, pretty=True)
    _emit({k: out[k] for k in ("claim_error", "answer_error", "fwer_post_holm", "fdr_post_by", "config_hash") if k in out} | ({"baseline_check": out["baseline_check"]} if "baseline_check" in out else {}))
    return EXIT_OK


def cmd_power(args) -> int:
    rows = []
    for p0 in args.p0:
        plan = sample_size_two_proportions(p0, args.rel_drop, args.alpha, args.power, args.margin)
        rows.append({"n_per_arm": plan.n_per_arm, "n_with_margin": plan.n_with_margin, "p0": p0, "p1": plan.p1})
    if args.simulate:
        sim = {r["p0"]: r for r in power_overlay(args.p0, args.rel_drop, args.alpha, args.power, seed=args.seed)}
        for r in rows:
            r["n_simulated"] = sim[r["p0"]]["n_simulated"]
    cols = ["p0", "p1", "n_per_arm", "n_with_margin"] + (["n_simulated"] if args.simulate else [])
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: r[c] for c in cols})
    if args.out:
        _write_bytes(Path(args.out), buf.getvalue().encode())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def _percentiles(xs) -> dict:
    if not xs:
        return {}
    a = np.asarray(xs, dtype=float)
    return {f"p{q}": float(np.percentile(a, q, method="inverted_cdf")) for q in (50, 90, 95, 99)}


def build_report(traces: list[dict], receipt_results: list[bool] | None = None) -> dict:
    """Ops summary derived only from trace (and optional receipt) artifacts."""
    if not traces:
        raise CliError("no traces to report on")
    traces = sorted(traces, key=lambda t: (t["arrival_ms"], t["request_id"]))
    stages = sorted({s for t in traces for s in t["stage_timings"]})
    latency = {s: _percentiles([t["stage_timings"][s] for t in traces if s in t["stage_timings"]]) for s in stages}
    heavy = [t for t in traces if t["heavy_calls"]]
    incidents: dict[str, dict] = {}
    for t in traces:
        tk = t.get("incident_ticket")
        if tk:
            iv = incidents.setdefault(tk, {"decisions": 0, "end_ms": t["arrival_ms"], "start_ms": t["arrival_ms"], "ticket_id": tk})
            iv["decisions"] += 1
            iv["end_ms"] = max(iv["end_ms"], t["arrival_ms"])
    non_incident_heavy = [t for t in heavy if not t.get("incident_ticket")]
    reasons = Counter(t["abstain_reason"] for t in traces if t["return_state"] == ABSTAIN)
    proofs = [t["proof"] for t in traces if t.get("proof")]
    sizes = [p["proof_size_bytes"] for p in proofs if p["proof_size_bytes"]]
    rep = {
        "abstention_reasons": dict(sorted(reasons.items())),
        "clock": "simulated-clock",
        "heavy_share": {
            "capped_heavy_events": len(non_incident_heavy),
            "heavy_events": len(heavy),
            "share": len(heavy) / len(traces),
            "share_excluding_incidents": len(non_incident_heavy) / len(traces),
            "total_events": len(traces),
            "window_end_ms": traces[-1]["arrival_ms"],
            "window_start_ms": traces[0]["arrival_ms"],
        },
        "incident_intervals": sorted(incidents.values(), key=lambda i: i["start_ms"]),
        "latency_ms": latency,
        "proof": {
            "size_bytes": _percentiles(sizes),
            "timeout_rate": sum(1 for p in proofs if p["proof_timed_out"]) / len(proofs) if proofs else 0.0,
        },
        "return_states": dict(sorted(Counter(t["return_state"] for t in traces).items())),
        "total_requests": len(traces),
    }
    if receipt_results is not None:
        rep["receipt_verification_pass_rate"] = sum(receipt_results) / len(receipt_results) if receipt_results else None
    return rep


def cmd_report(args) -> int:
    run = Path(args.run)
    tdir = run / "traces" if (run / "traces").is_dir() else run
    traces = [json.loads(p.read_text()) for p in sorted(tdir.glob("*.trace.json"))]
    results = None
    rdir = run / "receipts"
    if rdir.is_dir() and (run / "trust.json").exists():
        trust = TrustStore.load(run / "trust.json")
        state = KrnState(KrnStream.load(run / "krn" / "local.jsonl"), SubstrateLog(run / "krn" / "substrate.jsonl"), MirrorState.load(run / "krn" / "mirror.json"))
        now = state.mirror.last_sync or 0
        results = [verify_receipt(json.loads(p.read_text()), trust, state, now).passed for p in sorted(rdir.glob("*.receipt.json"))]
    rep = build_report(traces, results)
    if args.out:
        dump_json(rep, args.out, pretty=True)
    _emit(rep)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evgate", description="Evidence gating, receipts and risk planning.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("manifest", help="build, prove and verify shard manifests")
    msub = m.add_subparsers(dest="action", required=True)
    b = msub.add_parser("build")
    b.add_argument("--entries", required=True)
    b.add_argument("--shard", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--sealed-at", type=int, default=0)
    pr = msub.add_parser("prove")
    pr.add_argument("--manifest", required=True)
    pr.add_argument("--doc", action="append", required=True)
    pr.add_argument("--out", required=True)
    v = msub.add_parser("verify")
    v.add_argument("--proof", required=True)
    v.add_argument("--root", required=True)
    v.add_argument("--timeout-ms", type=int, default=300)
    m.set_defaults(func=cmd_manifest)

    g = sub.add_parser("gate", help="run the decision engine over a fixture bundle")
    gsub = g.add_subparsers(dest="action", required=True)
    gr = gsub.add_parser("run")
    gr.add_argument("--fixture", required=True)
    gr.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gate_run)

    vr = sub.add_parser("verify", help="verify a receipt offline")
    vr.add_argument("receipt")
    vr.add_argument("--trust", required=True)
    vr.add_argument("--krn")
    vr.add_argument("--substrate")
    vr.add_argument("--mirror")
    vr.add_argument("--roots", help="JSON map shard id -> trusted root hex")
    vr.add_argument("--now", type=int, help="verification time, ms since epoch")
    vr.set_defaults(func=cmd_verify)

    k = sub.add_parser("krn", help="key revocation notices")
    ksub = k.add_subparsers(dest="action", required=True)
    for name in ("mirror", "reconcile", "status"):
        kp = ksub.add_parser(name)
        kp.add_argument("--krn", required=True)
        kp.add_argument("--mirror", required=True)
        kp.add_argument("--now", type=int, required=True)
        if name != "status":
            kp.add_argument("--substrate", required=True)
        if name == "reconcile":
            kp.add_argument("--promotion-digest")
    k.set_defaults(func=cmd_krn)

    s = sub.add_parser("simulate", help="Monte Carlo error propagation")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    pw = sub.add_parser("power", help="n per arm for a relative drop")
    pw.add_argument("--p0", type=float, action="append", required=True)
    pw.add_argument("--rel-drop", type=float, default=0.20)
    pw.add_argument("--power", type=float, default=0.85)
    pw.add_argument("--alpha", type=float, default=0.05)
    pw.add_argument("--margin", type=float, default=0.10)
    pw.add_argument("--simulate", action="store_true", help="add a simulation cross-check column")
    pw.add_argument("--seed", type=int, default=0)
    pw.add_argument("--out")
    pw.set_defaults(func=cmd_power)

    r = sub.add_parser("report", help="ops report from a gate-run directory")
    r.add_argument("run")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, EvGateError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
