from fractions import Fraction

import pytest

from conftest import T0, budget_trace, window_share_oracle

from evgate.clock import SimClock
from evgate.engine import RateLimiter, RouteState, StagePolicy, TokenBucket, fits_latency_budget, incident_mode, run_stage
from evgate.errors import NoActiveIncident, OverlappingIncident, StageTimeout

DAY = 86_400_000


def test_trace_respects_cap_outside_incidents():
    log, calls, intervals = budget_trace(n_events=8000, seed=2)
    inside = lambda t: any(a <= t < b for a, b in intervals)
    shares = [s for t, s in window_share_oracle(log) if not inside(t)]
    assert max(shares) <= Fraction(3, 20)
    assert max(calls.values()) == 1
    assert any(e[2] for e in log)


def test_window_expiry_is_by_timestamp():
    st = RouteState("r", window_ms=1000)
    st.record(T0, True)
    st.record(T0 + 500, False)
    assert st.heavy_share(T0 + 999) == Fraction(1, 2)
    assert st.heavy_share(T0 + 1000) == 0
    with pytest.raises(ValueError):
        st.record(T0, False)


def test_post_grant_share_counts_in_flight():
    st = RouteState("r", heavy_cap=Fraction(1, 10))
    for i in range(9):
        st.record(T0 + i, False)
    a = st.reserve(T0 + 10)
    assert a is not None  # 1/10
    assert st.reserve(T0 + 10) is None  # in-flight counts: 2/11 > 1/10
    st.release(a)
    assert st.reserve(T0 + 10) is not None


def test_incident_lifecycle():
    st = RouteState("r")
    clock = SimClock(T0)
    incident_mode(st, "open", clock, "INC-1", 1000)
    with pytest.raises(OverlappingIncident):
        incident_mode(st, "open", clock, "INC-2", 1000)
    clock.advance(400)
    entry = incident_mode(st, "close", clock)
    assert (entry.action, entry.duration_ms) == ("close", 400)
    with pytest.raises(NoActiveIncident):
        incident_mode(st, "close", clock)
    st.open_incident("INC-3", T0 + 500, 100)
    assert st.active_incident(T0 + 600) is None
    assert st.incident_log[-1].action == "expire"
    with pytest.raises(ValueError):
        st.open_incident("", T0, 10)


def test_token_buckets():
    rl = RateLimiter(route_capacity=3, route_rate=1, org_capacity=100, org_rate=100)
    assert [rl.admit("o", "r", T0) for _ in range(4)] == [True, True, True, False]
    assert rl.admit("o", "r", T0 + 1000)
    assert not rl.admit("o", "r", T0 + 1000)
    org = RateLimiter(route_capacity=100, route_rate=100, org_capacity=2, org_rate=1)
    assert [org.admit("o", f"r{i}", T0) for i in range(3)] == [True, True, False]
    assert org.denials == [(T0, "o", "r2")]
    b = TokenBucket(2, Fraction(1, 2))
    b.take(T0)
    b.take(T0)
    assert not b.available(T0 + 1999) and b.available(T0 + 2000)


def test_stage_retries_and_backoff():
    clock = SimClock(0)
    calls = []

    def flaky(t):
        calls.append(clock.now_ms())
        clock.sleep(200 if len(calls) == 1 else 10)
        return "ok"

    pol = StagePolicy(100, retries=2, backoff="exponential", base_ms=25)
    res = run_stage("small", flaky, pol, clock)
    assert res.value == "ok" and [a.outcome for a in res.attempts] == ["timeout", "ok"]
    assert calls == [0, 225]
    assert [pol.delay_ms(i) for i in (1, 2, 3)] == [25, 50, 100]
    with pytest.raises(StageTimeout) as exc:
        run_stage("heavy", lambda t: clock.sleep(500), StagePolicy(100), clock)
    assert len(exc.value.attempts) == 1


def test_latency_budget():
    assert fits_latency_budget(0)
    assert fits_latency_budget(900 - 220 - 80 - 50)
    assert not fits_latency_budget(900 - 220 - 80 - 50 + 1)
