"""Provenance graph and the G_indep diversity score.

Nodes are ``doc:<id>`` and ``issuer:<name>``. Edges point from a document to
what it derives from: its issuer and every upstream citation. A node's
K-ancestor set is everything reachable in at most K edges, the node itself
included at distance 0. Two supports are flagged when their K-ancestor sets
intersect.
"""

from __future__ import annotations

import json
import logging
from collections import Counter, deque
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

from .canonical import frac_str
from .errors import ConfigError
from .policy import Fragment, PolicySnapshot

log = logging.getLogger(__name__)


def doc_node(doc_id: str) -> str:
    return f"doc:{doc_id}"


def issuer_node(issuer: str) -> str:
    return f"issuer:{issuer}"


def citation_node(ref: str) -> str:
    """Citations are doc ids unless explicitly prefixed with ``issuer:``."""
    if ref.startswith("issuer:") or ref.startswith("doc:"):
        return ref
    return doc_node(ref)


@dataclass
class ProvenanceGraph:
    nodes: set[str] = field(default_factory=set)
    parents: dict[str, set[str]] = field(default_factory=dict)
    placeholders: set[str] = field(default_factory=set)

    def add_node(self, n: str) -> None:
        self.nodes.add(n)
        self.parents.setdefault(n, set())

    def add_edge(self, child: str, parent: str) -> None:
        self.add_node(child)
        self.add_node(parent)
        self.parents[child].add(parent)

    @property
    def edges(self) -> list[tuple[str, str]]:
        return sorted((c, p) for c, ps in self.parents.items() for p in ps)

    def ancestors(self, node: str, k: int) -> dict[str, int]:
        """Nodes within ``k`` reverse-citation hops, mapped to their distance."""
        dist = {node: 0}
        queue = deque([node])
        while queue:
            n = queue.popleft()
            if dist[n] == k:
                continue
            for p in sorted(self.parents.get(n, ())):
                if p not in dist:
                    dist[p] = dist[n] + 1
                    queue.append(p)
        return dist


def build_graph(
    fragments: Iterable[Fragment],
    citation_index: Iterable[tuple[str, str, str]] | None = None,
) -> ProvenanceGraph:
    """Build the graph; citations to unknown nodes become placeholders."""
    g = ProvenanceGraph()
    fragments = list(fragments)
    for f in fragments:
        g.add_edge(doc_node(f.doc_id), issuer_node(f.issuer))
    known = set(g.nodes)
    pending: list[tuple[str, str]] = []
    for f in fragments:
        for ref in f.upstream_citations:
            pending.append((doc_node(f.doc_id), citation_node(ref)))
    for src, dst, _rel in citation_index or ():
        pending.append((citation_node(src), citation_node(dst)))
    for child, parent in pending:
        if parent not in known and parent not in g.placeholders:
            g.placeholders.add(parent)
            log.warning("dangling provenance reference %s -> %s; placeholder created", child, parent)
        g.add_edge(child, parent)
    return g


def load_citation_index(path) -> list[tuple[str, str, str]]:
    out = []
    try:
        for line in Path(path).read_text().splitlines():
            if line.strip():
                d = json.loads(line)
                out.append((d["from_id"], d["to_id"], d.get("relation", "cites")))
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"bad citation index {path}: {exc}") from exc
    return out


@dataclass(frozen=True)
class IndependenceReport:
    k: int
    pairs: int
    shared: int
    flagged_pairs: tuple[tuple[str, str, str], ...]
    g_indep: Fraction
    issuer_shares: dict[str, Fraction]
    max_share: Fraction
    passed: bool
    vacuous: bool
    author_max_share: Fraction | None = None

    def to_dict(self) -> dict:
        return {
            "flagged_pairs": [list(p) for p in self.flagged_pairs],
            "g_indep": frac_str(self.g_indep),
            "issuer_shares": {k: frac_str(v) for k, v in sorted(self.issuer_shares.items())},
            "k": self.k,
            "max_share": frac_str(self.max_share),
            "pairs": self.pairs,
            "pass": self.passed,
            "shared": self.shared,
            "vacuous": self.vacuous,
        }


def issuer_shares(supports: Sequence[Fragment]) -> tuple[dict[str, Fraction], Fraction]:
    if not supports:
        raise ValueError("issuer_shares needs at least one support")
    n = len(supports)
    counts = Counter(f.issuer for f in supports)
    shares = {i: Fraction(c, n) for i, c in counts.items()}
    return shares, max(shares.values())


def _author_max_share(supports: Sequence[Fragment]) -> Fraction:
    counts = Counter(f.author or f"anon:{f.issuer}" for f in supports)
    return Fraction(max(counts.values()), len(supports))


def g_indep(
    supports: Sequence[Fragment], graph: ProvenanceGraph, policy: PolicySnapshot
) -> IndependenceReport:
    k = policy.k_hops
    n = len(supports)
    anc = [graph.ancestors(doc_node(f.doc_id), k) for f in supports]
    flagged = []
    for i, j in combinations(range(n), 2):
        common = anc[i].keys() & anc[j].keys()
        if common:
            a, b = sorted((supports[i].fid, supports[j].fid))
            flagged.append((a, b, min(common)))
    flagged.sort()
    pairs = n * (n - 1) // 2
    if pairs:
        score = 1 - Fraction(len(flagged), pairs)
    else:
        score = Fraction(1)
    if n:
        shares, max_share = issuer_shares(supports)
    else:
        shares, max_share = {}, Fraction(0)
    ok = score >= policy.frac("g_indep_min") and max_share <= policy.frac("issuer_cap")
    author_share = None
    if policy.author_cap_enabled and n:
        author_share = _author_max_share(supports)
        ok = ok and author_share <= policy.frac("author_cap")
    return IndependenceReport(
        k=k,
        pairs=pairs,
        shared=len(flagged),
        flagged_pairs=tuple(flagged),
        g_indep=score,
        issuer_shares=shares,
        max_share=max_share,
        passed=ok,
        vacuous=pairs == 0,
        author_max_share=author_share,
    )
