"""Stage execution with timeouts, retries and backoff, plus the latency budget check."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

from ..errors import ConfigError, StageTimeout
from ..policy import DEFAULT_LATENCY_BUDGET, DEFAULT_STAGE_POLICY

# What the cascade does when a stage gives up.
FAIL_MODES = {
    "retrieval": "abstain",
    "cheap": "skip_to_small",
    "small": "drop_fragment",
    "heavy": "abstain",
    "proof": "degrade_or_abstain",
    "signing": "abstain",
    "krn_fetch": "fail_closed",
}


@dataclass(frozen=True)
class StagePolicy:
    timeout_ms: int
    retries: int = 0
    backoff: str = "none"
    base_ms: int = 0

    def __post_init__(self):
        if self.backoff not in ("none", "fixed", "exponential"):
            raise ConfigError(f"unknown backoff {self.backoff!r}")
        if self.timeout_ms <= 0 or self.retries < 0:
            raise ConfigError("timeout must be positive and retries non-negative")

    @classmethod
    def for_stage(cls, stage: str, table: Mapping[str, Mapping] | None = None) -> "StagePolicy":
        table = table or DEFAULT_STAGE_POLICY
        try:
            return cls(**table[stage])
        except KeyError:
            raise ConfigError(f"no stage policy for {stage!r}") from None

    def delay_ms(self, attempt: int, jitter_ms: int = 0) -> int:
        """Wait before retry number ``attempt`` (1-based)."""
        if self.backoff == "fixed":
            return self.base_ms
        if self.backoff == "exponential":
            return self.base_ms * 2 ** (attempt - 1) + jitter_ms
        return 0


@dataclass(frozen=True)
class Attempt:
    n: int
    started_ms: int
    elapsed_ms: int
    outcome: str  # ok | timeout | error

    def to_dict(self) -> dict:
        return {"elapsed_ms": self.elapsed_ms, "n": self.n, "outcome": self.outcome, "started_ms": self.started_ms}


@dataclass
class StageResult:
    stage: str
    value: Any
    attempts: list[Attempt] = field(default_factory=list)

    @property
    def elapsed_ms(self) -> int:
        if not self.attempts:
            return 0
        last = self.attempts[-1]
        return last.started_ms + last.elapsed_ms - self.attempts[0].started_ms


def run_stage(
    stage: str,
    executor: Callable[[int], Any],
    policy: StagePolicy,
    clock,
    jitter: Callable[[int], int] | None = None,
) -> StageResult:
    """Run ``executor(timeout_ms)`` under the stage's timeout and retry policy.

    An attempt times out when the clock shows more than ``timeout_ms``
    elapsed, or when the executor raises :class:`StageTimeout` itself; its
    value is discarded. After the last retry :class:`StageTimeout` is raised
    with the attempts attached as ``.attempts``.
    """
    attempts: list[Attempt] = []
    for n in range(1, policy.retries + 2):
        if n > 1:
            clock.sleep(policy.delay_ms(n - 1, jitter(n - 1) if jitter else 0))
        start = clock.now_ms()
        try:
            value = executor(policy.timeout_ms)
            outcome = "ok"
        except StageTimeout:
            value, outcome = None, "timeout"
        elapsed = clock.now_ms() - start
        if outcome == "ok" and elapsed > policy.timeout_ms:
            outcome = "timeout"
        attempts.append(Attempt(n, start, elapsed, outcome))
        if outcome == "ok":
            return StageResult(stage, value, attempts)
    err = StageTimeout(stage, attempts[-1].started_ms + attempts[-1].elapsed_ms - attempts[0].started_ms)
    err.attempts = attempts
    raise err


def fits_latency_budget(
    consumed_ms: int,
    budget: Mapping[str, int] | None = None,
    heavy_cost_ms: int | None = None,
    remaining: tuple[str, ...] = ("proofs", "signing"),
) -> bool:
    """consumed + projected heavy + remaining mandatory segments <= end-to-end budget."""
    budget = budget or DEFAULT_LATENCY_BUDGET
    heavy = budget["heavy"] if heavy_cost_ms is None else heavy_cost_ms
    return consumed_ms + heavy + sum(budget[s] for s in remaining) <= budget["e2e"]
