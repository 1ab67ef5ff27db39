"""Minimal sufficient evidence sets, counterfactual flips and justification.

The eliminator is generic over a gate predicate: any pure function from a
tuple of :class:`VerdictedFragment` to a :class:`GateCheck`.
:func:`standard_gate` builds the predicate the decision engine uses.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from .errors import EmptySlacks, MissingDates, MonocultureViolation, NonPassingInput
from .gates import temporal_diversity_ok
from .independence import IndependenceReport, ProvenanceGraph, g_indep
from .policy import Fragment, PolicySnapshot
from .stats import by_fdr, holm_fwer

GATE_ORDER = ("support_count", "fdr_budget", "fwer_budget", "g_indep", "issuer_cap", "temporal", "scope")
MAX_PASSES = 3


@dataclass(frozen=True)
class VerdictedFragment:
    fragment: Fragment
    support_p: float
    contradict_p: float
    calibrated_confidence: float
    tier: str = "small"

    def __post_init__(self):
        for name in ("support_p", "contradict_p", "calibrated_confidence"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.tier not in ("cheap", "small", "heavy"):
            raise ValueError(f"unknown tier {self.tier!r}")

    @property
    def fid(self) -> str:
        return self.fragment.fid

    @property
    def issuer(self) -> str:
        return self.fragment.issuer


@dataclass(frozen=True)
class GateCheck:
    passed: bool
    broken_gate: str | None = None
    reasons: tuple[str, ...] = ()
    slacks: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.broken_gate is not None and self.broken_gate not in GATE_ORDER:
            raise ValueError(f"unknown gate {self.broken_gate!r}")
        if self.passed != (self.broken_gate is None):
            raise ValueError("a failing check must name exactly one broken gate")


GatePredicate = Callable[[tuple[VerdictedFragment, ...]], GateCheck]
ScoreFn = Callable[[tuple[VerdictedFragment, ...]], float]


@dataclass(frozen=True)
class EvidencePack:
    mses: tuple[str, ...]
    delta_scores: dict[str, float]
    fragility: float
    counterfactual_flips: tuple[tuple[str, str], ...]
    recheck_passes: int
    per_fragment_reasons: dict[str, tuple[str, ...]]
    removal_order: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "counterfactual_flips": [list(f) for f in self.counterfactual_flips],
            "delta_scores": dict(sorted(self.delta_scores.items())),
            "fragility": self.fragility,
            "mses": list(self.mses),
            "per_fragment_reasons": {k: list(v) for k, v in sorted(self.per_fragment_reasons.items())},
            "recheck_passes": self.recheck_passes,
            "removal_order": list(self.removal_order),
        }


def fragility_index(gate_slacks: Mapping[str, float]) -> float:
    """1 minus the smallest normalized gate slack."""
    if not gate_slacks:
        raise EmptySlacks("fragility needs at least one gate slack")
    lo = min(gate_slacks.values())
    return float(min(1.0, max(0.0, 1 - lo)))


def _default_score(policy: PolicySnapshot) -> ScoreFn:
    w1, _, w3 = policy.justification_weights

    def score(s: tuple[VerdictedFragment, ...]) -> float:
        if not s:
            return 0.0
        strength = sum(v.calibrated_confidence for v in s) / len(s)
        return w1 * strength + w3 * min(1.0, policy.min_supports / len(s))

    return score


def counterfactual_flips(
    mses: Sequence[VerdictedFragment], gate_predicate: GatePredicate
) -> tuple[tuple[str, str], ...]:
    """For each member, the first gate broken by removing it alone.

    Members whose removal still passes are left out, so a minimal set
    lists every member.
    """
    mses = tuple(mses)
    if not mses or not gate_predicate(mses).passed:
        raise NonPassingInput("counterfactual flips need a passing, non-empty set")
    out = []
    for v in mses:
        check = gate_predicate(tuple(x for x in mses if x is not v))
        if not check.passed:
            out.append((v.fid, check.broken_gate))
    return tuple(out)


def extract_mses(
    supports: Sequence[VerdictedFragment],
    gate_predicate: GatePredicate,
    policy: PolicySnapshot,
    score: ScoreFn | None = None,
) -> EvidencePack:
    """Greedy backward elimination with at most three full passes.

    Each pass tries removals in ascending order of the member's marginal
    score (ties by fragment id). Under the Phase-B cap, members whose
    issuer is still duplicated are tried first; if duplicates survive,
    :class:`MonocultureViolation` is raised.
    """
    current = tuple(sorted(supports, key=lambda v: v.fid))
    if len({v.fid for v in current}) != len(current):
        raise ValueError("duplicate fragment ids in supports")
    if not current or not gate_predicate(current).passed:
        raise NonPassingInput("MSES extraction needs a passing support set")
    score = score or _default_score(policy)
    removed: list[str] = []
    passes = 0
    while passes < MAX_PASSES:
        passes += 1
        base = score(current)
        dup = Counter(v.issuer for v in current)

        def key(v):
            rest = tuple(x for x in current if x is not v)
            delta = base - score(rest)
            return (not (policy.phase_b and dup[v.issuer] > 1), delta, v.fid)

        changed = False
        for v in sorted(current, key=key):
            trial = tuple(x for x in current if x is not v)
            if trial and gate_predicate(trial).passed:
                current = trial
                removed.append(v.fid)
                changed = True
        if not changed:
            break
    if policy.phase_b:
        over = sorted(i for i, c in Counter(v.issuer for v in current).items() if c > 1)
        if over:
            raise MonocultureViolation(f"MSES keeps several fragments from {over}")
    final = gate_predicate(current)
    flips = counterfactual_flips(current, gate_predicate)
    base = score(current)
    deltas = {v.fid: base - score(tuple(x for x in current if x is not v)) for v in current}
    reasons = {fid: (f"removal breaks {g}",) for fid, g in flips}
    for fid in removed:
        reasons[fid] = ("removed: remaining set still passes",)
    return EvidencePack(
        mses=tuple(v.fid for v in current),
        delta_scores=deltas,
        fragility=fragility_index(final.slacks) if final.slacks else 0.0,
        counterfactual_flips=flips,
        recheck_passes=passes,
        per_fragment_reasons=reasons,
        removal_order=tuple(removed),
    )


@dataclass(frozen=True)
class JustificationScore:
    J: float
    support_strength: float
    independence: float
    minimality: float
    weights: tuple[float, float, float]

    def to_dict(self) -> dict:
        return {
            "J": self.J,
            "components": {
                "independence": self.independence,
                "minimality": self.minimality,
                "support_strength": self.support_strength,
            },
            "weights": list(self.weights),
        }


def justification_score(
    supports: Sequence[VerdictedFragment],
    independence_report: IndependenceReport,
    evidence_pack: EvidencePack,
    policy: PolicySnapshot,
) -> JustificationScore:
    members = set(evidence_pack.mses)
    chosen = [v for v in supports if v.fid in members]
    strength = sum(v.calibrated_confidence for v in chosen) / len(chosen) if chosen else 0.0
    indep = float(independence_report.g_indep)
    n = len(evidence_pack.mses)
    minimality = 0.0 if n == 0 else min(1.0, policy.min_supports / n)
    w = policy.justification_weights
    j = w[0] * strength + w[1] * indep + w[2] * minimality
    return JustificationScore(round(min(1.0, max(0.0, j)), 12), strength, indep, minimality, tuple(w))


def standard_gate(
    policy: PolicySnapshot,
    graph: ProvenanceGraph,
    topic_is_drifting: bool = False,
) -> GatePredicate:
    """The engine's evidence-set predicate over the core gates.

    fdr_budget requires every member to survive BY at ``q``; fwer_budget
    requires that Holm at ``alpha`` rejects no member's no-contradiction
    null.
    """
    gmin = policy.frac("g_indep_min")
    cap = policy.frac("issuer_cap")

    def predicate(s: tuple[VerdictedFragment, ...]) -> GateCheck:
        slacks: dict[str, float] = {}
        n = len(s)
        slacks["support_count"] = max(0.0, (n - policy.min_supports) / n) if n else 0.0
        if n < policy.min_supports:
            return GateCheck(False, "support_count", (f"{n} supports < {policy.min_supports}",), slacks)
        by = by_fdr([v.support_p for v in s], policy.q)
        if len(by.rejected) < n:
            return GateCheck(False, "fdr_budget", ("not every support survives BY",), slacks)
        slacks["fdr_budget"] = max(0.0, 1 - max(by.adjusted) / policy.q)
        holm = holm_fwer([v.contradict_p for v in s], policy.alpha)
        if holm.rejected:
            return GateCheck(False, "fwer_budget", ("significant contradiction under Holm",), slacks)
        slacks["fwer_budget"] = max(0.0, (min(holm.adjusted) - policy.alpha) / (1 - policy.alpha))
        rep = g_indep([v.fragment for v in s], graph, policy)
        slacks["g_indep"] = float((rep.g_indep - gmin) / (1 - gmin)) if gmin < 1 else 1.0
        if rep.g_indep < gmin:
            return GateCheck(False, "g_indep", (f"g_indep {rep.g_indep} < {gmin}",), slacks)
        slacks["issuer_cap"] = float((cap - rep.max_share) / cap) if cap else 0.0
        if rep.max_share > cap:
            return GateCheck(False, "issuer_cap", (f"issuer share {rep.max_share} > {cap}",), slacks)
        if policy.author_cap_enabled and rep.author_max_share > policy.frac("author_cap"):
            return GateCheck(False, "issuer_cap", ("author share above cap",), slacks)
        if topic_is_drifting:
            try:
                ok, _ = temporal_diversity_ok([v.fragment for v in s], policy, True)
            except MissingDates:
                ok = False
            slacks["temporal"] = 1.0 if ok else 0.0
            if not ok:
                return GateCheck(False, "temporal", ("supports lack temporal diversity",), slacks)
        return GateCheck(True, None, (), slacks)

    return predicate

