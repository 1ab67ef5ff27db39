"""Pluggable verifier tiers.

A tier evaluates one fragment against a claim. :class:`TableVerifier`
replays precomputed verdicts and charges their latency to a simulated
clock, which is how fixtures and tests drive the cascade.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

from ..policy import Fragment

TIERS = ("cheap", "small", "heavy")


@dataclass(frozen=True)
class Verdict:
    support: bool
    contradict: bool
    p_support: float
    p_contradict: float
    calibrated_confidence: float
    elapsed_ms: int = 0

    def __post_init__(self):
        for name in ("p_support", "p_contradict", "calibrated_confidence"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    def to_dict(self) -> dict:
        return {
            "calibrated_confidence": self.calibrated_confidence,
            "contradict": self.contradict,
            "elapsed_ms": self.elapsed_ms,
            "p_contradict": self.p_contradict,
            "p_support": self.p_support,
            "support": self.support,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Verdict":
        return cls(
            support=bool(d["support"]),
            contradict=bool(d["contradict"]),
            p_support=float(d["p_support"]),
            p_contradict=float(d["p_contradict"]),
            calibrated_confidence=float(d["calibrated_confidence"]),
            elapsed_ms=int(d.get("elapsed_ms", 0)),
        )


# No verdict on record: neither support nor contradiction evidence.
ABSENT = Verdict(False, False, 1.0, 1.0, 0.0, 0)


class VerifierTier(Protocol):
    tier: str

    def evaluate(self, fragment: Fragment, claim: str, timeout_ms: int) -> Verdict: ...


class TableVerifier:
    """Replays verdicts keyed by fragment id.

    A table value may be a single verdict or a list of verdicts returned on
    successive calls (the last one repeats), so a retry can behave
    differently from the first attempt. Latency is charged by sleeping on
    ``clock``.
    """

    def __init__(self, tier: str, table: Mapping[str, Verdict | Sequence[Verdict]], clock=None):
        if tier not in TIERS:
            raise ValueError(f"unknown tier {tier!r}")
        self.tier = tier
        self._table = {k: (list(v) if isinstance(v, (list, tuple)) else [v]) for k, v in table.items()}
        self._calls: dict[str, int] = {}
        self.clock = clock

    def evaluate(self, fragment: Fragment, claim: str, timeout_ms: int) -> Verdict:
        seq = self._table.get(fragment.fid, [ABSENT])
        i = self._calls.get(fragment.fid, 0)
        self._calls[fragment.fid] = i + 1
        verdict = seq[min(i, len(seq) - 1)]
        if self.clock is not None and verdict.elapsed_ms:
            self.clock.sleep(verdict.elapsed_ms)
        return verdict
