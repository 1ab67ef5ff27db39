"""Policy snapshots and evidence fragments.

A :class:`PolicySnapshot` is immutable and content addressed: its
``snapshot_hash`` is SHA-256 over the canonical JSON of every other field.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from datetime import date
from fractions import Fraction
from pathlib import Path
from typing import Any

from .canonical import canonical_bytes, parse_frac, sha256
from .errors import ConfigError
from .manifest import SELECTOR_CAP, License

DISCLOSURE_SCOPES = ("internal-only", "partner", "public")
FRAGMENT_MODES = ("hash", "digest", "full")

# J.1 segment budgets (ms); "e2e" is the end-to-end p95 target.
DEFAULT_LATENCY_BUDGET = {
    "retrieval": 250,
    "cheap": 120,
    "small": 180,
    "heavy": 220,
    "proofs": 80,
    "signing": 50,
    "e2e": 900,
}

# J.2: timeout ms, retries, backoff kind, backoff base ms
DEFAULT_STAGE_POLICY = {
    "retrieval": {"timeout_ms": 250, "retries": 1, "backoff": "exponential", "base_ms": 25},
    "cheap": {"timeout_ms": 60, "retries": 1, "backoff": "fixed", "base_ms": 30},
    "small": {"timeout_ms": 120, "retries": 1, "backoff": "exponential", "base_ms": 25},
    "heavy": {"timeout_ms": 220, "retries": 0, "backoff": "none", "base_ms": 0},
    "proof": {"timeout_ms": 300, "retries": 0, "backoff": "none", "base_ms": 0},
    "signing": {"timeout_ms": 120, "retries": 1, "backoff": "fixed", "base_ms": 60},
    "krn_fetch": {"timeout_ms": 300, "retries": 1, "backoff": "fixed", "base_ms": 150},
}

DEFAULT_PII_PATTERNS = {
    "email": r"[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}",
    "phone": r"(?<!\d)(?:\+?\d{1,3}[ .-]?)?(?:\(\d{2,4}\)[ .-]?)?\d{3,4}[ .-]\d{3,4}(?:[ .-]\d{2,4})?(?!\d)",
    "national_id": r"\b\d{3}-\d{2}-\d{4}\b",
}


def _unit(name: str, v: float) -> None:
    if not 0 <= v <= 1:
        raise ConfigError(f"{name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class PolicySnapshot:
    route_version: str = "route/1"
    contract_version: str = "contract/1"
    route_id: str = "default"
    tau: float = 0.80
    tau_j: float = 0.70
    alpha: float = 0.05
    q: float = 0.05
    g_indep_min: float = 0.70
    k_hops: int = 3
    k_justification: str = ""
    issuer_cap: float = 0.50
    author_cap_enabled: bool = False
    author_cap: float = 0.50
    margin_band: tuple[float, float] = (0.55, 0.75)
    heavy_cap: float = 0.15
    sample_rate: float = 0.10
    low_power_sample_rate: float = 0.20
    tau_icl: float = 0.80
    jitter_halfwidth: float = 0.02
    stage_policy: dict = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_STAGE_POLICY)))
    proof_timeout_ms: int = 300
    max_proof_bytes: int = 64 * 1024
    latency_budget: dict = field(default_factory=lambda: dict(DEFAULT_LATENCY_BUDGET))
    heavy_cost_ms: int = 220
    min_supports: int = 2
    min_issuer_diversity: int = 3
    phase_b: bool = True
    drifting_topics: tuple[str, ...] = ()
    disclosure_scope: str = "internal-only"
    fragment_mode: str = "hash"
    lite_permitted: bool = True
    lite_omit_selectors: bool = False
    justification_weights: tuple[float, float, float] = (0.5, 0.3, 0.2)
    route_jurisdictions: tuple[str, ...] = ()
    route_language: str | None = None
    min_trust_tier: int = 0
    metadata_confidence_min: float = 0.9
    near_duplicate_threshold: float = 0.9
    top_k1: int = 8
    storey_lambda: float = 0.5
    pii_action: str = "mask"
    pii_patterns: dict = field(default_factory=lambda: dict(DEFAULT_PII_PATTERNS))
    route_seed: str = "route-seed"
    route_burst_qps: int = 50
    org_sustained_qps: int = 10
    org_burst: int = 50
    proof_policy_version: str = "proof-policy/1"
    jitter_policy: str = "uniform-session"

    def __post_init__(self):
        for name in (
            "tau", "tau_j", "alpha", "q", "g_indep_min", "issuer_cap", "author_cap",
            "heavy_cap", "sample_rate", "low_power_sample_rate", "tau_icl",
            "metadata_confidence_min", "near_duplicate_threshold",
        ):
            _unit(name, getattr(self, name))
        lo, hi = self.margin_band
        _unit("margin_band", lo)
        _unit("margin_band", hi)
        if lo > hi:
            raise ConfigError("margin_band must be (low, high)")
        if self.k_hops < 1:
            raise ConfigError("k_hops must be >= 1")
        if self.k_hops < 3 and not self.k_justification.strip():
            raise ConfigError("k_hops < 3 requires a recorded k_justification")
        if not 0 <= self.jitter_halfwidth < 0.5:
            raise ConfigError("jitter_halfwidth out of range")
        if self.disclosure_scope not in DISCLOSURE_SCOPES:
            raise ConfigError(f"disclosure_scope must be one of {DISCLOSURE_SCOPES}")
        if self.fragment_mode not in FRAGMENT_MODES:
            raise ConfigError(f"fragment_mode must be one of {FRAGMENT_MODES}")
        w = self.justification_weights
        if len(w) != 3 or any(x < 0 for x in w) or sum(parse_frac(x) for x in w) != 1:
            raise ConfigError("justification_weights must be three non-negative weights summing to 1")
        if self.pii_action not in ("mask", "abstain"):
            raise ConfigError("pii_action must be 'mask' or 'abstain'")
        if self.min_supports < 1 or self.top_k1 < 1:
            raise ConfigError("min_supports and top_k1 must be positive")
        if not 0 < self.storey_lambda < 1:
            raise ConfigError("storey_lambda must lie in (0, 1)")

    # exact thresholds for rational comparisons
    def frac(self, name: str) -> Fraction:
        return parse_frac(getattr(self, name))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @property
    def snapshot_hash(self) -> bytes:
        return sha256(canonical_bytes(self.to_dict()))

    def to_file_dict(self) -> dict:
        d = self.to_dict()
        d["snapshot_hash"] = self.snapshot_hash.hex()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PolicySnapshot":
        d = dict(d)
        claimed = d.pop("snapshot_hash", None)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown policy fields: {sorted(unknown)}")
        for k in ("margin_band", "drifting_topics", "justification_weights", "route_jurisdictions"):
            if k in d:
                d[k] = tuple(d[k])
        try:
            snap = cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        if claimed is not None and claimed != snap.snapshot_hash.hex():
            raise ConfigError("policy snapshot_hash does not match its contents")
        return snap

    @classmethod
    def load(cls, path) -> "PolicySnapshot":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load policy {path}: {exc}") from exc

    def replace(self, **changes: Any) -> "PolicySnapshot":
        return dataclasses.replace(self, **changes)


def _date(v) -> date | None:
    if v is None or isinstance(v, date):
        return v
    return date.fromisoformat(v)


@dataclass(frozen=True)
class Fragment:
    doc_id: str
    issuer: str
    content_hash: bytes
    shard_id: str = ""
    author: str = ""
    jurisdiction: str | None = None
    effective_start: date | None = None
    effective_end: date | None = None
    publication_date: date | None = None
    license: License | None = None
    trust_tier: int = 0
    language: str = "en"
    selectors: tuple[str, ...] = ()
    upstream_citations: tuple[str, ...] = ()
    body: str | None = None
    fragment_id: str = ""
    timed_out: bool = False

    def __post_init__(self):
        if not self.fragment_id:
            object.__setattr__(self, "fragment_id", self.doc_id)

    @property
    def fid(self) -> str:
        return self.fragment_id

    @property
    def effective_window(self) -> tuple[date | None, date | None]:
        return self.effective_start, self.effective_end

    def problems(self) -> list[str]:
        out = []
        if not isinstance(self.content_hash, bytes) or len(self.content_hash) != 32:
            out.append("content_hash must be 32 bytes")
        if any(len(s.encode("utf-8")) > SELECTOR_CAP for s in self.selectors):
            out.append(f"selector exceeds {SELECTOR_CAP} bytes")
        if self.effective_start and self.effective_end and self.effective_start > self.effective_end:
            out.append("effective window start after end")
        return out

    def to_dict(self) -> dict:
        return {
            "author": self.author,
            "body": self.body,
            "content_hash": self.content_hash.hex(),
            "doc_id": self.doc_id,
            "effective_end": self.effective_end.isoformat() if self.effective_end else None,
            "effective_start": self.effective_start.isoformat() if self.effective_start else None,
            "fragment_id": self.fragment_id,
            "issuer": self.issuer,
            "jurisdiction": self.jurisdiction,
            "language": self.language,
            "license": self.license.to_dict() if self.license else None,
            "publication_date": self.publication_date.isoformat() if self.publication_date else None,
            "selectors": list(self.selectors),
            "shard_id": self.shard_id,
            "timed_out": self.timed_out,
            "trust_tier": self.trust_tier,
            "upstream_citations": list(self.upstream_citations),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Fragment":
        try:
            lic = d.get("license")
            return cls(
                doc_id=d["doc_id"],
                issuer=d["issuer"],
                content_hash=bytes.fromhex(d["content_hash"]),
                shard_id=d.get("shard_id", ""),
                author=d.get("author", ""),
                jurisdiction=d.get("jurisdiction"),
                effective_start=_date(d.get("effective_start")),
                effective_end=_date(d.get("effective_end")),
                publication_date=_date(d.get("publication_date")),
                license=License.from_dict(lic) if isinstance(lic, dict) and "terms_id" in lic else None,
                trust_tier=int(d.get("trust_tier", 0)),
                language=d.get("language", "en"),
                selectors=tuple(d.get("selectors", ())),
                upstream_citations=tuple(d.get("upstream_citations", ())),
                body=d.get("body"),
                fragment_id=d.get("fragment_id", ""),
                timed_out=bool(d.get("timed_out", False)),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"bad fragment: {exc}") from exc


def load_fragments_jsonl(path) -> list[Fragment]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    out = []
    for i, line in enumerate(lines, 1):
        if line.strip():
            try:
                out.append(Fragment.from_dict(json.loads(line)))
            except ValueError as exc:
                raise ConfigError(f"{path}:{i}: {exc}") from exc
    return out
