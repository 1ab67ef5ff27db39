"""Per-route heavy-verifier budget, incident mode and rate limiting.

The heavy cap is a share of requests over a true 7-day sliding window by
timestamp. A grant is allowed iff the post-grant share

    (heavy + in_flight + 1) / (total + in_flight + 1)

is at most ``heavy_cap``, evaluated with exact rationals. Heavy calls made
under an incident are tagged and excluded from the capped numerator.
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction

from ..canonical import parse_frac
from ..errors import NoActiveIncident, OverlappingIncident

WINDOW_MS = 7 * 24 * 3600 * 1000


@dataclass(frozen=True)
class WindowEvent:
    ts: int
    heavy: bool
    incident: bool = False
    request_id: str = ""


@dataclass(frozen=True)
class Reservation:
    reservation_id: str
    granted_at: int
    incident_ticket: str | None = None


@dataclass(frozen=True)
class Incident:
    ticket_id: str
    started_at: int
    expires_at: int
    scope: str = "route"


@dataclass(frozen=True)
class IncidentLogEntry:
    ts: int
    action: str  # open | close | expire
    ticket_id: str
    route_id: str
    duration_ms: int | None = None

    def to_dict(self) -> dict:
        return {
            "action": self.action,
            "duration_ms": self.duration_ms,
            "route_id": self.route_id,
            "ticket_id": self.ticket_id,
            "ts": self.ts,
        }


@dataclass
class TokenBucket:
    capacity: int
    rate_per_s: Fraction
    tokens: Fraction = None
    last_ms: int | None = None

    def __post_init__(self):
        self.rate_per_s = Fraction(self.rate_per_s)
        if self.tokens is None:
            self.tokens = Fraction(self.capacity)

    def _refill(self, now_ms: int) -> None:
        if self.last_ms is not None and now_ms > self.last_ms:
            self.tokens = min(Fraction(self.capacity), self.tokens + self.rate_per_s * Fraction(now_ms - self.last_ms, 1000))
        if self.last_ms is None or now_ms > self.last_ms:
            self.last_ms = now_ms

    def available(self, now_ms: int) -> bool:
        self._refill(now_ms)
        return self.tokens >= 1

    def take(self, now_ms: int) -> None:
        self._refill(now_ms)
        self.tokens -= 1


@dataclass
class RateLimiter:
    """Route burst bucket and org sustained bucket; both must admit."""

    route_capacity: int = 50
    route_rate: int = 50
    org_capacity: int = 50
    org_rate: int = 10
    routes: dict[str, TokenBucket] = field(default_factory=dict)
    orgs: dict[str, TokenBucket] = field(default_factory=dict)
    denials: list[tuple[int, str, str]] = field(default_factory=list)

    @classmethod
    def from_policy(cls, policy) -> "RateLimiter":
        return cls(policy.route_burst_qps, policy.route_burst_qps, policy.org_burst, policy.org_sustained_qps)

    def admit(self, org_id: str, route_id: str, now_ms: int) -> bool:
        rb = self.routes.setdefault(route_id, TokenBucket(self.route_capacity, self.route_rate))
        ob = self.orgs.setdefault(org_id, TokenBucket(self.org_capacity, self.org_rate))
        if rb.available(now_ms) and ob.available(now_ms):
            rb.take(now_ms)
            ob.take(now_ms)
            return True
        self.denials.append((now_ms, org_id, route_id))
        return False


def rate_limit(org_id: str, route_id: str, now_ms: int, buckets: RateLimiter) -> bool:
    return buckets.admit(org_id, route_id, now_ms)


class RouteState:
    """Mutable per-route state. All mutation goes through one lock."""

    def __init__(self, route_id: str, heavy_cap=0.15, window_ms: int = WINDOW_MS):
        self.route_id = route_id
        self.heavy_cap = parse_frac(heavy_cap)
        self.window_ms = window_ms
        self.window: deque[WindowEvent] = deque()
        self.heavy = 0  # non-incident heavy events in window
        self.heavy_incident = 0
        self.total = 0
        self.in_flight: dict[str, Reservation] = {}
        self.heavy_calls: dict[str, int] = {}
        self.incident: Incident | None = None
        self.incident_log: list[IncidentLogEntry] = []
        self.cp_low = False
        self._seq = 0
        self._lock = threading.RLock()

    # -- window ---------------------------------------------------------
    def _expire(self, now: int) -> None:
        cutoff = now - self.window_ms
        while self.window and self.window[0].ts <= cutoff:
            ev = self.window.popleft()
            self.total -= 1
            if ev.heavy:
                if ev.incident:
                    self.heavy_incident -= 1
                else:
                    self.heavy -= 1

    def record(self, ts: int, heavy: bool, incident: bool = False, request_id: str = "") -> None:
        with self._lock:
            if self.window and ts < self.window[-1].ts:
                raise ValueError("window events must arrive in timestamp order")
            self._expire(ts)
            self.window.append(WindowEvent(ts, heavy, incident and heavy, request_id))
            self.total += 1
            if heavy:
                if incident:
                    self.heavy_incident += 1
                else:
                    self.heavy += 1

    def heavy_share(self, now: int, include_incident: bool = False) -> Fraction:
        with self._lock:
            self._expire(now)
            if not self.total:
                return Fraction(0)
            h = self.heavy + (self.heavy_incident if include_incident else 0)
            return Fraction(h, self.total)

    # -- incidents ------------------------------------------------------
    def active_incident(self, now: int) -> Incident | None:
        with self._lock:
            inc = self.incident
            if inc is not None and now >= inc.expires_at:
                self.incident_log.append(
                    IncidentLogEntry(inc.expires_at, "expire", inc.ticket_id, self.route_id, inc.expires_at - inc.started_at)
                )
                self.incident = None
            return self.incident

    def open_incident(self, ticket_id: str, now: int, duration_ms: int, scope: str = "route") -> Incident:
        if not ticket_id or duration_ms <= 0:
            raise ValueError("incident needs a ticket id and a positive duration")
        with self._lock:
            if self.active_incident(now) is not None:
                raise OverlappingIncident(f"incident {self.incident.ticket_id} already active")
            self.incident = Incident(ticket_id, now, now + duration_ms, scope)
            self.incident_log.append(IncidentLogEntry(now, "open", ticket_id, self.route_id, duration_ms))
            return self.incident

    def close_incident(self, now: int) -> IncidentLogEntry:
        with self._lock:
            inc = self.active_incident(now)
            if inc is None:
                raise NoActiveIncident(f"no active incident on {self.route_id}")
            entry = IncidentLogEntry(now, "close", inc.ticket_id, self.route_id, now - inc.started_at)
            self.incident_log.append(entry)
            self.incident = None
            return entry

    # -- reservations ---------------------------------------------------
    def reserve(self, now: int, request_id: str = "") -> Reservation | None:
        """Atomic check-and-increment; None when the cap would be exceeded."""
        with self._lock:
            self._expire(now)
            inc = self.active_incident(now)
            r = len([x for x in self.in_flight.values() if x.incident_ticket is None])
            if inc is None:
                share = Fraction(self.heavy + r + 1, self.total + len(self.in_flight) + 1)
                if share > self.heavy_cap:
                    return None
            self._seq += 1
            res = Reservation(f"{self.route_id}/{self._seq}", now, inc.ticket_id if inc else None)
            self.in_flight[res.reservation_id] = res
            return res

    def commit(self, res: Reservation, ts: int, request_id: str = "") -> None:
        """The heavy call happened: the reservation becomes a heavy window event."""
        with self._lock:
            self.in_flight.pop(res.reservation_id)
            self.record(ts, True, res.incident_ticket is not None, request_id)

    def release(self, res: Reservation) -> None:
        with self._lock:
            self.in_flight.pop(res.reservation_id, None)

    def note_heavy_call(self, request_id: str) -> int:
        with self._lock:
            n = self.heavy_calls.get(request_id, 0) + 1
            if n > 1:
                raise RuntimeError(f"second heavy call for {request_id}")
            self.heavy_calls[request_id] = n
            return n


def reserve_heavy_slot(route_state: RouteState, now: int, request_id: str = "") -> Reservation | None:
    return route_state.reserve(now, request_id)


def incident_mode(route_state: RouteState, action: str, clock, ticket_id: str | None = None, duration_ms: int | None = None):
    """Open or close the route's incident; returns the log entry written."""
    now = clock.now_ms()
    if action == "open":
        route_state.open_incident(ticket_id, now, duration_ms)
        return route_state.incident_log[-1]
    if action == "close":
        return route_state.close_incident(now)
    raise ValueError(f"unknown incident action {action!r}")
