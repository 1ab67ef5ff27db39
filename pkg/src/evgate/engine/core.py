"""The decision cascade.

Stages run in a fixed order: metadata, scope, cheap tier, small tier,
multiplicity budgets, heavy governance, independence, diversity and MSES,
justification, proofs. Each return carries reason codes drawn from
:data:`ABSTAIN_REASONS` or :data:`LITE_REASONS`; anything else is a bug.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Mapping, Sequence

from ..canonical import frac_str
from ..errors import MissingDates, MonocultureViolation, StageTimeout, UnmappedReason
from ..gates import (
    GateResult,
    ScopeReason,
    ShardInfo,
    apply_inferred,
    infer_metadata,
    needs_inference,
    poisoning_gate,
    scope_ok,
    temporal_diversity_ok,
)
from ..independence import IndependenceReport, build_graph, g_indep
from ..manifest import Multiproof, ProofCheck, ShardManifest, prove_multi
from ..mses import (
    EvidencePack,
    JustificationScore,
    VerdictedFragment,
    extract_mses,
    justification_score,
    standard_gate,
)
from ..policy import Fragment, PolicySnapshot
from ..stats import MultiplicityResult, by_fdr, holm_fwer, jitter_tau
from .budget import RouteState
from .stages import StagePolicy, fits_latency_budget, run_stage
from .verifiers import ABSENT, Verdict

log = logging.getLogger(__name__)

PROMOTE_FULL = "PROMOTE_FULL"
PROMOTE_LITE = "PROMOTE_LITE"
ABSTAIN = "ABSTAIN"
RETURN_STATES = (PROMOTE_FULL, PROMOTE_LITE, ABSTAIN)

ABSTAIN_REASONS = (
    "scope",
    "needs_cataloging",
    "retrieval_timeout",
    "insufficient_support",
    "risk_bounds",
    "heavy_veto",
    "heavy_timeout",
    "independence_or_cap",
    "insufficient_diversity",
    "justification",
    "low_confidence",
    "proof_timeout_or_size",
    "budget_exhausted",
    "privacy",
    "signing_failure",
    "internal_fault",
)
LITE_REASONS = ("proof_timeout_or_size", "heavy_budget_exhausted")
FULL_REASONS = ("all_gates_passed",)

TRIGGERS = ("disagreement", "margin_band", "high_stakes", "adversarial", "sampling", "low_conditional_power")


@dataclass(frozen=True)
class Request:
    request_id: str
    claim: str
    fragments: tuple[Fragment, ...]
    arrival: int = 0  # ms since the epoch
    session_class: str = "default"
    session_id: str = ""
    high_stakes: bool = False
    org_id: str = "org"
    route_id: str = "default"
    topic: str | None = None
    adversarial_score: float = 0.0
    retrieval_anomaly: bool = False
    allow_lite: bool = True

    def to_dict(self) -> dict:
        return {
            "adversarial_score": self.adversarial_score,
            "allow_lite": self.allow_lite,
            "arrival": self.arrival,
            "claim": self.claim,
            "fragments": [f.to_dict() for f in self.fragments],
            "high_stakes": self.high_stakes,
            "org_id": self.org_id,
            "request_id": self.request_id,
            "retrieval_anomaly": self.retrieval_anomaly,
            "route_id": self.route_id,
            "session_class": self.session_class,
            "session_id": self.session_id,
            "topic": self.topic,
        }

    @classmethod
    def from_dict(cls, d: dict, fragments: Mapping[str, Fragment] | None = None) -> "Request":
        frs = []
        for f in d.get("fragments", ()):
            if isinstance(f, str):
                frs.append(fragments[f])
            else:
                frs.append(Fragment.from_dict(f))
        return cls(
            request_id=d["request_id"],
            claim=d.get("claim", ""),
            fragments=tuple(frs),
            arrival=int(d.get("arrival", 0)),
            session_class=d.get("session_class", "default"),
            session_id=d.get("session_id", ""),
            high_stakes=bool(d.get("high_stakes", False)),
            org_id=d.get("org_id", "org"),
            route_id=d.get("route_id", "default"),
            topic=d.get("topic"),
            adversarial_score=float(d.get("adversarial_score", 0.0)),
            retrieval_anomaly=bool(d.get("retrieval_anomaly", False)),
            allow_lite=bool(d.get("allow_lite", True)),
        )


@dataclass(frozen=True)
class TrailEntry:
    ts: int
    gate: str
    policy_version: str
    reason: str

    def to_dict(self) -> dict:
        return {"gate": self.gate, "policy_version": self.policy_version, "reason": self.reason, "ts": self.ts}


@dataclass
class DecisionTrace:
    request_id: str
    route_id: str
    session_class: str
    snapshot_hash: str
    arrival_ms: int = 0
    return_state: str = ABSTAIN
    reasons: list[str] = field(default_factory=list)
    abstain_reason: str | None = None
    stage_timings: dict[str, int] = field(default_factory=dict)
    stage_attempts: dict[str, list[dict]] = field(default_factory=dict)
    triggers_fired: list[str] = field(default_factory=list)
    sampling_draw: str | None = None
    effective_sample_rate: str | None = None
    need_heavy: bool = False
    heavy_calls: int = 0
    reservation_id: str | None = None
    incident_ticket: str | None = None
    heavy_skipped: str | None = None
    scope_reasons: list[dict] = field(default_factory=list)
    inferred: dict[str, list[str]] = field(default_factory=dict)
    multiplicity: dict[str, Any] = field(default_factory=dict)
    independence: dict[str, Any] | None = None
    poisoning_gate: dict[str, Any] | None = None
    temporal_windows: list[dict] | None = None
    evidence: dict[str, Any] | None = None
    justification: dict[str, Any] | None = None
    tau_effective: float | None = None
    proof: dict[str, Any] | None = None
    escalation_trail: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Evidence:
    """Material the receipt builder needs beyond the trace."""

    fragments: tuple[Fragment, ...] = ()
    supports: tuple[VerdictedFragment, ...] = ()
    pack: EvidencePack | None = None
    independence: IndependenceReport | None = None
    justification: JustificationScore | None = None
    by: MultiplicityResult | None = None
    holm: MultiplicityResult | None = None
    multiproofs: dict[str, Multiproof] = field(default_factory=dict)
    roots: dict[str, bytes] = field(default_factory=dict)
    proof_check: ProofCheck | None = None
    scope: list[ScopeReason] = field(default_factory=list)
    poisoning: GateResult | None = None


@dataclass(frozen=True)
class Decision:
    return_state: str
    trace: DecisionTrace
    evidence: Evidence


@dataclass
class Deps:
    """Everything decide() calls out to."""

    verifiers: Mapping[str, Any]
    clock: Any
    manifests: Mapping[str, ShardManifest] = field(default_factory=dict)
    shard_catalog: Mapping[str, ShardInfo] = field(default_factory=dict)
    citation_index: Sequence[tuple[str, str, str]] = ()
    retriever: Callable[["Request", int], Sequence[Fragment]] | None = None
    # simulated proof-assembly latency per request (ms)
    proof_latency_ms: Callable[["Request"], int] | None = None


def sampling_draw(route_seed: str, request_id: str) -> Fraction:
    d = hashlib.sha256(f"{route_seed}|{request_id}".encode()).digest()
    return Fraction(int.from_bytes(d[:8], "big"), 2**64)


def effective_sample_rate(policy: PolicySnapshot, cp_low: bool) -> Fraction:
    rate = policy.frac("sample_rate")
    if cp_low:
        # raise sampling, never past the route cap
        rate = max(rate, min(policy.frac("low_power_sample_rate"), policy.frac("heavy_cap")))
    return rate


def heavy_triggered(
    request: Request,
    signals: Mapping[str, Any],
    policy: PolicySnapshot,
) -> tuple[bool, list[str]]:
    """Evaluate the heavy-verifier trigger set.

    ``signals`` keys: ``disagreement`` (bool), ``margin`` (float or None),
    ``cp_low`` (bool). The sampling draw is derived from the request id.
    """
    fired = []
    if signals.get("disagreement"):
        fired.append("disagreement")
    margin = signals.get("margin")
    lo, hi = policy.margin_band
    if margin is not None and lo <= margin <= hi:
        fired.append("margin_band")
    if request.high_stakes:
        fired.append("high_stakes")
    if request.adversarial_score >= policy.tau_icl or request.retrieval_anomaly:
        fired.append("adversarial")
    draw = sampling_draw(policy.route_seed, request.request_id)
    base = policy.frac("sample_rate")
    if draw < base:
        fired.append("sampling")
    elif signals.get("cp_low") and draw < effective_sample_rate(policy, True):
        fired.append("low_conditional_power")
    return bool(fired), fired


class _Abstain(Exception):
    def __init__(self, reason: str, state: str = ABSTAIN):
        super().__init__(reason)
        self.reason = reason
        self.state = state


def _check_reason(state: str, reason: str) -> None:
    allowed = {ABSTAIN: ABSTAIN_REASONS, PROMOTE_LITE: LITE_REASONS, PROMOTE_FULL: FULL_REASONS}[state]
    if reason not in allowed:
        raise UnmappedReason(f"{reason!r} is not a {state} reason")


def decide(request: Request, policy: PolicySnapshot, route_state: RouteState, deps: Deps) -> Decision:
    """Run the cascade for one admitted request. Never raises."""
    clock = deps.clock
    t0 = clock.now_ms()
    trace = DecisionTrace(request.request_id, request.route_id, request.session_class, policy.snapshot_hash.hex(), request.arrival)
    ev = Evidence(fragments=request.fragments)
    version = policy.route_version
    reservation = None
    heavy_done = False
    incident = None

    def trail(gate: str, reason: str) -> None:
        trace.escalation_trail.append(TrailEntry(clock.now_ms(), gate, version, reason).to_dict())

    def timed(stage: str, start: int) -> None:
        trace.stage_timings[stage] = trace.stage_timings.get(stage, 0) + clock.now_ms() - start

    def stage_policy(name: str) -> StagePolicy:
        return StagePolicy.for_stage(name, policy.stage_policy)

    try:
        fragments = list(request.fragments)

        # retrieval (optional: fixtures usually carry fragments already)
        if deps.retriever is not None:
            start = clock.now_ms()
            try:
                res = run_stage("retrieval", lambda t: deps.retriever(request, t), stage_policy("retrieval"), clock)
                fragments = list(res.value)
                trace.stage_attempts["retrieval"] = [a.to_dict() for a in res.attempts]
            except StageTimeout as exc:
                trace.stage_attempts["retrieval"] = [a.to_dict() for a in exc.attempts]
                timed("retrieval", start)
                raise _Abstain("retrieval_timeout")
            timed("retrieval", start)
        ev.fragments = tuple(fragments)

        # metadata inference for untagged fragments
        uncatalogued = []
        for i, f in enumerate(fragments):
            if needs_inference(f):
                meta, conf = infer_metadata(f, deps.shard_catalog)
                if conf < policy.metadata_confidence_min:
                    uncatalogued.append(f.fid)
                else:
                    fragments[i] = apply_inferred(f, meta)
                    if meta.inferred_fields:
                        trace.inferred[f.fid] = list(meta.inferred_fields)
        if uncatalogued:
            trace.notes.append(f"needs cataloging: {sorted(uncatalogued)}")
            trail("metadata", "needs_cataloging")
            raise _Abstain("needs_cataloging")

        # (1) scope
        ok, reasons = scope_ok(fragments, policy, request.arrival // 1000, request.topic)
        ev.scope = reasons
        trace.scope_reasons = [r.to_dict() for r in reasons]
        if not ok:
            for r in reasons:
                trail("scope", r.category)
            raise _Abstain("scope")

        # (2) cheap tier; timeouts skip straight to the small tier
        start = clock.now_ms()
        cheap: dict[str, Verdict | None] = {}
        for f in fragments:
            if f.timed_out:
                continue
            try:
                r = run_stage("cheap", lambda t, f=f: deps.verifiers["cheap"].evaluate(f, request.claim, t), stage_policy("cheap"), clock)
                cheap[f.fid] = r.value
            except StageTimeout:
                cheap[f.fid] = None
                trace.notes.append(f"cheap timeout on {f.fid}; skipped to small")
        timed("cheap", start)
        by_id = {f.fid: f for f in fragments}
        # rank by cheap-tier confidence; cheap timeouts go last
        ranked = sorted(cheap, key=lambda fid: (-(cheap[fid].calibrated_confidence if cheap[fid] else -1.0), fid))
        cand = [by_id[fid] for fid in ranked[: policy.top_k1]]

        # (3) small tier
        start = clock.now_ms()
        small: dict[str, Verdict] = {}
        for f in cand:
            try:
                r = run_stage("small", lambda t, f=f: deps.verifiers["small"].evaluate(f, request.claim, t), stage_policy("small"), clock)
                small[f.fid] = r.value
            except StageTimeout:
                trace.notes.append(f"small timeout on {f.fid}; dropped")
        timed("small", start)
        supp = [f for f in cand if f.fid in small and small[f.fid].support and not small[f.fid].contradict]
        if len(supp) < policy.min_supports:
            trail("small", "insufficient_support")
            raise _Abstain("insufficient_support")

        # (4) multiplicity budgets: BY on supports, Holm on every candidate's contradiction p
        by = by_fdr([small[f.fid].p_support for f in supp], policy.q)
        by = dataclasses.replace(by, ids=tuple(f.fid for f in supp), rejected=frozenset(supp[int(i)].fid for i in by.rejected))
        holm_in = [(f.fid, (small.get(f.fid) or ABSENT).p_contradict) for f in cand]
        holm = holm_fwer([p for _, p in holm_in], policy.alpha)
        holm = dataclasses.replace(holm, ids=tuple(i for i, _ in holm_in), rejected=frozenset(holm_in[int(i)][0] for i in holm.rejected))
        ev.by, ev.holm = by, holm
        trace.multiplicity = {"by": by.to_dict(), "holm": holm.to_dict()}
        supp = [f for f in supp if f.fid in by.rejected]
        if len(supp) < policy.min_supports or holm.rejected:
            trail("multiplicity", "risk_bounds")
            raise _Abstain("risk_bounds")

        # (5) heavy governance
        disagreement = any(
            cheap.get(f.fid) is not None and f.fid in small and cheap[f.fid].support != small[f.fid].support
            for f in cand
        )
        confs = [small[f.fid].calibrated_confidence for f in supp]
        margin = sum(confs) / len(confs)
        need_heavy, fired = heavy_triggered(
            request, {"disagreement": disagreement, "margin": margin, "cp_low": route_state.cp_low}, policy
        )
        trace.triggers_fired = fired
        trace.need_heavy = need_heavy
        trace.sampling_draw = frac_str(sampling_draw(policy.route_seed, request.request_id))
        trace.effective_sample_rate = frac_str(effective_sample_rate(policy, route_state.cp_low))
        now = clock.now_ms()
        incident = route_state.active_incident(now)
        if incident is not None:
            trace.incident_ticket = incident.ticket_id
        heavy_allowed_req = route_state.heavy_calls.get(request.request_id, 0) == 0
        have_capacity = False
        if need_heavy and heavy_allowed_req:
            reservation = route_state.reserve(now, request.request_id)
            have_capacity = reservation is not None
            if reservation is not None:
                trace.reservation_id = reservation.reservation_id
                if reservation.incident_ticket:
                    trace.incident_ticket = reservation.incident_ticket
        do_heavy = need_heavy and heavy_allowed_req and have_capacity
        if do_heavy and not fits_latency_budget(clock.now_ms() - t0, policy.latency_budget, policy.heavy_cost_ms):
            do_heavy = False
            trace.heavy_skipped = "latency_budget"
            trail("heavy", "skipped: latency budget")
        if need_heavy and reservation is not None and not do_heavy:
            route_state.release(reservation)
            reservation = None
        verdicts = {f.fid: small[f.fid] for f in supp}
        tier = {f.fid: "small" for f in supp}
        if do_heavy:
            route_state.note_heavy_call(request.request_id)
            trace.heavy_calls = 1
            heavy_done = True
            start = clock.now_ms()

            def heavy_all(t):
                out = {}
                for f in cand:
                    out[f.fid] = deps.verifiers["heavy"].evaluate(f, request.claim, t)
                    if clock.now_ms() - start > t:
                        raise StageTimeout("heavy")
                return out

            try:
                hv = run_stage("heavy", heavy_all, stage_policy("heavy"), clock).value
            except StageTimeout:
                timed("heavy", start)
                trail("heavy", "heavy_timeout")
                raise _Abstain("heavy_timeout")
            timed("heavy", start)
            if any(v.contradict for v in hv.values()):
                trail("heavy", "heavy_veto")
                raise _Abstain("heavy_veto")
            for f in supp:
                verdicts[f.fid] = hv[f.fid]
                tier[f.fid] = "heavy"

        # (6) independence and issuer cap
        graph = build_graph(fragments, deps.citation_index)
        rep = g_indep(supp, graph, policy)
        ev.independence = rep
        trace.independence = rep.to_dict()
        if not rep.passed:
            trail("independence", "independence_or_cap")
            raise _Abstain("independence_or_cap")

        # MSES, small-sample poisoning and temporal diversity
        drifting = request.topic is not None and request.topic in policy.drifting_topics
        vfs = tuple(
            VerdictedFragment(f, small[f.fid].p_support, small[f.fid].p_contradict, verdicts[f.fid].calibrated_confidence, tier[f.fid])
            for f in supp
        )
        ev.supports = vfs
        predicate = standard_gate(policy, graph, drifting)
        try:
            pack = extract_mses(vfs, predicate, policy) if predicate(vfs).passed else None
        except MonocultureViolation as exc:
            trace.notes.append(str(exc))
            pack = None
        mses_frs = [v.fragment for v in vfs if pack and v.fid in pack.mses]
        mses_rep = g_indep(mses_frs, graph, policy) if mses_frs else rep
        if pack is not None:
            ev.pack = pack
            trace.evidence = pack.to_dict()
        if drifting:
            try:
                _, windows = temporal_diversity_ok(mses_frs or [v.fragment for v in vfs], policy, True)
                trace.temporal_windows = [w.to_dict() for w in windows]
            except MissingDates:
                trace.temporal_windows = []
        pg = poisoning_gate(cand, mses_frs or [v.fragment for v in vfs], policy, mses_rep, drifting)
        if pg.passed and pack is None:
            pg = GateResult(False, "insufficient_diversity", "mses_monoculture", "no MSES satisfies the gates")
        ev.poisoning = pg
        trace.poisoning_gate = pg.to_dict()
        if not pg.passed:
            trail("poisoning", f"insufficient_diversity:{pg.failed_subgate}")
            raise _Abstain("insufficient_diversity")

        # justification and jittered confidence threshold
        js = justification_score(vfs, mses_rep, pack, policy)
        ev.justification = js
        trace.justification = js.to_dict()
        tau_eff = jitter_tau(policy.tau, request.session_id or request.request_id, policy.jitter_halfwidth)
        trace.tau_effective = tau_eff
        if js.J < policy.tau_j:
            trail("justification", "justification")
            raise _Abstain("justification")
        if js.support_strength < tau_eff:
            trail("confidence", "low_confidence")
            raise _Abstain("low_confidence")

        # (7) proofs for the MSES members, grouped by shard
        start = clock.now_ms()
        proof_problem = None
        try:
            res = run_stage("proof", lambda t: _assemble_proofs(mses_frs, deps, request, clock, policy.max_proof_bytes), stage_policy("proof"), clock)
            ev.multiproofs, ev.roots, check = res.value
            ev.proof_check = check
            if check is None or not check.valid:
                proof_problem = "missing"
            elif check.oversize:
                proof_problem = "oversize"
        except StageTimeout:
            proof_problem = "timeout"
        elapsed = clock.now_ms() - start
        timed("proofs", start)
        size = ev.proof_check.size_bytes if ev.proof_check else 0
        trace.proof = {
            "elapsed_ms": elapsed,
            "problem": proof_problem,
            "proof_size_bytes": size,
            "proof_timed_out": proof_problem == "timeout" or elapsed > policy.proof_timeout_ms,
        }
        if proof_problem is None and elapsed > policy.proof_timeout_ms:
            proof_problem = "timeout"
        lite_ok = policy.lite_permitted and request.allow_lite
        if proof_problem is not None:
            trail("proof", f"proof_timeout_or_size:{proof_problem}")
            if lite_ok and proof_problem == "timeout" and not ev.multiproofs:
                # the lite receipt still ships inclusion proofs, attached after the deadline
                ev.multiproofs, ev.roots, ev.proof_check = _assemble_proofs(
                    mses_frs, dataclasses.replace(deps, proof_latency_ms=None), request, clock, policy.max_proof_bytes
                )
            raise _Abstain("proof_timeout_or_size", PROMOTE_LITE if lite_ok else ABSTAIN)

        # (8) heavy needed but no capacity and no incident
        if need_heavy and incident is None and not have_capacity:
            trail("heavy", "heavy_budget_exhausted")
            if lite_ok:
                raise _Abstain("heavy_budget_exhausted", PROMOTE_LITE)
            raise _Abstain("budget_exhausted")

        state, reason = PROMOTE_FULL, "all_gates_passed"
    except _Abstain as a:
        state, reason = a.state, a.reason
    except Exception as exc:  # fail closed on any internal fault
        log.exception("internal fault in decide(%s)", request.request_id)
        trace.notes.append(f"internal fault: {type(exc).__name__}: {exc}")
        state, reason = ABSTAIN, "internal_fault"
        trace.escalation_trail.append(TrailEntry(clock.now_ms(), "engine", version, "internal_fault").to_dict())
    finally:
        end = clock.now_ms()
        if reservation is not None:
            if heavy_done:
                route_state.commit(reservation, end, request.request_id)
            else:
                route_state.release(reservation)
                route_state.record(end, False, False, request.request_id)
        else:
            route_state.record(end, False, False, request.request_id)

    _check_reason(state, reason)
    trace.return_state = state
    trace.reasons.append(reason)
    if state == ABSTAIN:
        trace.abstain_reason = reason
    if state == PROMOTE_LITE and ev.proof_check is None and trace.proof is None:
        trace.proof = {"elapsed_ms": 0, "problem": None, "proof_size_bytes": 0, "proof_timed_out": False}
    trace.stage_timings["total"] = clock.now_ms() - t0
    return Decision(state, trace, ev)


def _assemble_proofs(fragments: Sequence[Fragment], deps: Deps, request: Request, clock, max_bytes: int):
    if deps.proof_latency_ms is not None:
        delay = deps.proof_latency_ms(request)
        if delay:
            clock.sleep(delay)
    by_shard: dict[str, list[str]] = {}
    for f in fragments:
        by_shard.setdefault(f.shard_id, []).append(f.doc_id)
    proofs, roots = {}, {}
    total = 0
    ok = True
    for shard, docs in sorted(by_shard.items()):
        m = deps.manifests.get(shard)
        if m is None or any(m.entry(d) is None for d in docs):
            ok = False
            continue
        mp = prove_multi(m, docs)
        proofs[shard] = mp
        roots[shard] = m.root
        total += mp.size_bytes
        ok = ok and mp.compute_root() == m.root
    if not by_shard:
        ok = False
    check = ProofCheck(valid=ok, size_bytes=total, elapsed_ms=0, timed_out=False, oversize=total > max_bytes)
    return proofs, roots, check
