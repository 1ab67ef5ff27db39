"""Decision cascade, stage runner and per-route budget state."""

from .budget import (
    Incident,
    RateLimiter,
    Reservation,
    RouteState,
    TokenBucket,
    incident_mode,
    rate_limit,
    reserve_heavy_slot,
)
from .core import (
    ABSTAIN,
    ABSTAIN_REASONS,
    LITE_REASONS,
    PROMOTE_FULL,
    PROMOTE_LITE,
    RETURN_STATES,
    Decision,
    DecisionTrace,
    Deps,
    Evidence,
    Request,
    decide,
    heavy_triggered,
    sampling_draw,
)
from .stages import StagePolicy, fits_latency_budget, run_stage
from .verifiers import TableVerifier, Verdict

__all__ = [
    "ABSTAIN",
    "ABSTAIN_REASONS",
    "LITE_REASONS",
    "PROMOTE_FULL",
    "PROMOTE_LITE",
    "RETURN_STATES",
    "Decision",
    "DecisionTrace",
    "Deps",
    "Evidence",
    "Incident",
    "RateLimiter",
    "Request",
    "Reservation",
    "RouteState",
    "StagePolicy",
    "TableVerifier",
    "TokenBucket",
    "Verdict",
    "decide",
    "fits_latency_budget",
    "heavy_triggered",
    "incident_mode",
    "rate_limit",
    "reserve_heavy_slot",
    "run_stage",
    "sampling_draw",
]
