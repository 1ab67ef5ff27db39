"""Multiplicity control, dependence estimation and power calculations.

The step procedures have vectorized cores that operate on a matrix of
p-value rows; the scalar entry points call the same cores with one row, so
the simulator and the gates share one implementation.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .errors import InvalidEnrollment, InvalidRates, OutOfRange

log = logging.getLogger(__name__)

SUPPORTS = "supports"
CONTRADICTIONS = "contradictions"


@dataclass(frozen=True)
class PValueFamily:
    family: str
    values: tuple[float, ...]
    ids: tuple[str, ...] = ()

    def __post_init__(self):
        if self.family not in (SUPPORTS, CONTRADICTIONS):
            raise ValueError(f"unknown family {self.family!r}")
        if not self.ids:
            object.__setattr__(self, "ids", tuple(str(i) for i in range(len(self.values))))
        if len(self.ids) != len(self.values):
            raise ValueError("ids and values differ in length")
        if any(not 0 <= p <= 1 for p in self.values):
            raise ValueError("p-values must lie in [0, 1]")


@dataclass(frozen=True)
class MultiplicityResult:
    method: str
    level: float
    ids: tuple[str, ...]
    adjusted: tuple[float, ...]
    rejected: frozenset[str]
    exploratory: bool = False
    pi0: float | None = None

    def to_dict(self) -> dict:
        return {
            "adjusted": dict(zip(self.ids, self.adjusted)),
            "exploratory": self.exploratory,
            "level": self.level,
            "method": self.method,
            "rejected": sorted(self.rejected),
        }


def _as_family(family, default_kind: str) -> PValueFamily:
    if isinstance(family, PValueFamily):
        return family
    return PValueFamily(default_kind, tuple(float(p) for p in family))


# --------------------------------------------------------------------------
# vectorized cores: P has shape (rows, m); results are boolean masks


def _sorted(P: np.ndarray):
    order = np.argsort(P, axis=1, kind="stable")
    ranks = np.argsort(order, axis=1, kind="stable")
    return np.take_along_axis(P, order, axis=1), ranks


def holm_reject(P: np.ndarray, alpha: float) -> np.ndarray:
    P = np.atleast_2d(np.asarray(P, dtype=float))
    m = P.shape[1]
    if m == 0:
        return np.zeros(P.shape, dtype=bool)
    s, ranks = _sorted(P)
    thr = alpha / (m - np.arange(m))
    k = np.cumprod(s <= thr, axis=1).sum(axis=1)
    return ranks < k[:, None]


def _step_up(P: np.ndarray, level: float, c: float) -> np.ndarray:
    P = np.atleast_2d(np.asarray(P, dtype=float))
    m = P.shape[1]
    if m == 0:
        return np.zeros(P.shape, dtype=bool)
    s, ranks = _sorted(P)
    thr = np.arange(1, m + 1) * level / (m * c)
    ok = s <= thr
    # largest passing rank, 0 when none pass
    k = np.where(ok.any(axis=1), m - np.argmax(ok[:, ::-1], axis=1), 0)
    return ranks < k[:, None]


def harmonic(m: int) -> float:
    return sum(1.0 / i for i in range(1, m + 1))


def by_reject(P: np.ndarray, q: float) -> np.ndarray:
    P = np.atleast_2d(np.asarray(P, dtype=float))
    return _step_up(P, q, harmonic(P.shape[1]))


def bh_reject(P: np.ndarray, q: float) -> np.ndarray:
    return _step_up(P, q, 1.0)


def bonferroni_reject(P: np.ndarray, alpha: float) -> np.ndarray:
    P = np.atleast_2d(np.asarray(P, dtype=float))
    return P <= alpha / max(P.shape[1], 1)


# --------------------------------------------------------------------------
# scalar entry points


def _result(method, level, fam, adjusted, mask, exploratory=False, pi0=None):
    rejected = frozenset(i for i, r in zip(fam.ids, mask) if r)
    adj = tuple(float(min(1.0, max(0.0, a))) for a in adjusted)
    return MultiplicityResult(method, level, fam.ids, adj, rejected, exploratory, pi0)


def _step_down_adjusted(p: np.ndarray) -> np.ndarray:
    m = len(p)
    order = np.argsort(p, kind="stable")
    raw = np.minimum(1.0, (m - np.arange(m)) * p[order])
    adj = np.empty(m)
    adj[order] = np.maximum.accumulate(raw)
    return adj


def _step_up_adjusted(p: np.ndarray, scale: float) -> np.ndarray:
    m = len(p)
    order = np.argsort(p, kind="stable")
    raw = np.minimum(1.0, scale * m * p[order] / np.arange(1, m + 1))
    adj = np.empty(m)
    adj[order] = np.minimum.accumulate(raw[::-1])[::-1]
    return adj


def holm_fwer(family, alpha: float) -> MultiplicityResult:
    """Holm step-down at level ``alpha`` (used for contradictions)."""
    fam = _as_family(family, CONTRADICTIONS)
    p = np.asarray(fam.values, dtype=float)
    if not len(p):
        return _result("holm", alpha, fam, (), ())
    return _result("holm", alpha, fam, _step_down_adjusted(p), holm_reject(p, alpha)[0])


def by_fdr(family, q: float) -> MultiplicityResult:
    """Benjamini-Yekutieli step-up at level ``q`` (used for supports)."""
    fam = _as_family(family, SUPPORTS)
    p = np.asarray(fam.values, dtype=float)
    if not len(p):
        return _result("by", q, fam, (), ())
    return _result("by", q, fam, _step_up_adjusted(p, harmonic(len(p))), by_reject(p, q)[0])


def bh_fdr(family, q: float) -> MultiplicityResult:
    fam = _as_family(family, SUPPORTS)
    p = np.asarray(fam.values, dtype=float)
    if not len(p):
        return _result("bh", q, fam, (), ())
    return _result("bh", q, fam, _step_up_adjusted(p, 1.0), bh_reject(p, q)[0])


def storey_q(family, lam: float = 0.5, level: float = 0.05) -> MultiplicityResult:
    """Storey q-values. Always exploratory; gates never consume these."""
    if not 0 < lam < 1:
        raise ValueError("lambda must lie in (0, 1)")
    fam = _as_family(family, SUPPORTS)
    p = np.asarray(fam.values, dtype=float)
    if not len(p):
        return _result("storey", level, fam, (), (), exploratory=True, pi0=1.0)
    pi0 = min(1.0, float(np.sum(p > lam)) / ((1 - lam) * len(p)))
    qv = _step_up_adjusted(p, pi0)
    return _result("storey", level, fam, qv, qv <= level, exploratory=True, pi0=pi0)


# --------------------------------------------------------------------------
# effective number of tests


@dataclass(frozen=True)
class DependenceReport:
    m: int
    rho_bar: float
    m_eff: float
    ci: tuple[float, float]
    n_boot: int
    dropped: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {
            "ci": list(self.ci),
            "dropped": list(self.dropped),
            "m": self.m,
            "m_eff": self.m_eff,
            "n_boot": self.n_boot,
            "rho_bar": self.rho_bar,
        }


_RHO_MAX = 1 - 1e-12


def kish_m_eff(m: int, rho_bar: float) -> float:
    rho = min(max(rho_bar, 0.0), _RHO_MAX)
    return m / (1 + (m - 1) * rho)


def _mean_offdiag(C: np.ndarray) -> float:
    m = C.shape[0]
    if m < 2:
        return 0.0
    off = C[~np.eye(m, dtype=bool)]
    off = off[np.isfinite(off)]
    return float(off.mean()) if off.size else 0.0


def m_eff_estimate(
    outcomes=None,
    corr=None,
    n_boot: int = 1000,
    seed: int = 0,
) -> DependenceReport:
    """Kish effective test count from a draws x tests matrix or a correlation matrix.

    Zero-variance columns are dropped with a warning. With a correlation
    matrix there is nothing to resample, so the interval is degenerate.
    """
    if (outcomes is None) == (corr is None):
        raise ValueError("pass exactly one of outcomes or corr")
    if corr is not None:
        C = np.asarray(corr, dtype=float)
        m = C.shape[0]
        if m < 1 or C.shape != (m, m):
            raise ValueError("corr must be a non-empty square matrix")
        rho = min(max(_mean_offdiag(C), 0.0), _RHO_MAX)
        me = kish_m_eff(m, rho)
        return DependenceReport(m, rho, me, (me, me), 0)

    X = np.asarray(outcomes, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2 or X.shape[1] < 1:
        raise ValueError("outcomes must be a draws x tests matrix with >= 2 draws")
    var = X.var(axis=0)
    dropped = tuple(int(j) for j in np.flatnonzero(var == 0))
    if dropped:
        log.warning("dropping zero-variance columns %s", list(dropped))
        X = np.delete(X, dropped, axis=1)
    m = X.shape[1]
    if m == 0:
        raise ValueError("every column has zero variance")
    if m == 1:
        return DependenceReport(1, 0.0, 1.0, (1.0, 1.0), n_boot, dropped)
    rho = min(max(_mean_offdiag(np.corrcoef(X, rowvar=False)), 0.0), _RHO_MAX)
    me = kish_m_eff(m, rho)
    rng = np.random.default_rng(seed)
    n = X.shape[0]
    boots = np.empty(n_boot)
    with np.errstate(invalid="ignore", divide="ignore"):
        for b in range(n_boot):
            Xb = X[rng.integers(0, n, n)]
            boots[b] = kish_m_eff(m, _mean_offdiag(np.corrcoef(Xb, rowvar=False)))
    if n_boot:
        lo, hi = np.percentile(boots, [2.5, 97.5])
        ci = (float(min(lo, me)), float(max(hi, me)))
    else:
        ci = (me, me)
    return DependenceReport(m, rho, me, ci, n_boot, dropped)


# --------------------------------------------------------------------------
# power and sample size


@dataclass(frozen=True)
class PowerPlan:
    p0: float
    rel_drop: float
    p1: float
    alpha: float
    power: float
    n_per_arm: int
    n_with_margin: int
    margin: float = 0.10

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "margin": self.margin,
            "n_per_arm": self.n_per_arm,
            "n_with_margin": self.n_with_margin,
            "p0": self.p0,
            "p1": self.p1,
            "power": self.power,
            "rel_drop": self.rel_drop,
        }


def _check_rates(p0: float, rel_drop: float) -> float:
    if not (0 < p0 < 1 and 0 < rel_drop < 1):
        raise InvalidRates(f"need 0 < p0 < 1 and 0 < rel_drop < 1, got {p0}, {rel_drop}")
    return p0 * (1 - rel_drop)


def sample_size_two_proportions(
    p0: float, rel_drop: float, alpha: float = 0.05, power: float = 0.85, margin: float = 0.10
) -> PowerPlan:
    """Two-sided two-proportion sample size with the Fleiss continuity correction."""
    p1 = _check_rates(p0, rel_drop)
    if not 0.5 < power < 1 or not 0 < alpha < 1:
        raise InvalidRates("need 0.5 < power < 1 and 0 < alpha < 1")
    d = p0 - p1
    pbar = (p0 + p1) / 2
    za = norm.ppf(1 - alpha / 2)
    zb = norm.ppf(power)
    n_wald = (za * math.sqrt(2 * pbar * (1 - pbar)) + zb * math.sqrt(p0 * (1 - p0) + p1 * (1 - p1))) ** 2 / d**2
    n_cc = n_wald / 4 * (1 + math.sqrt(1 + 4 / (n_wald * d))) ** 2
    n = math.ceil(n_cc - 1e-9)
    # exact decimal product so that e.g. 1.10 * 1543 is not pushed over by rounding
    with_margin = math.ceil(round(n * (1 + margin), 9))
    return PowerPlan(p0, rel_drop, p1, alpha, power, n, with_margin, margin)


@dataclass(frozen=True)
class ConditionalPowerEstimate:
    n_enrolled: int
    n_target: int
    effect_hat: float
    cp: float
    low: bool
    threshold: float = 0.70

    def to_dict(self) -> dict:
        return {
            "cp": self.cp,
            "effect_hat": self.effect_hat,
            "low": self.low,
            "n_enrolled": self.n_enrolled,
            "n_target": self.n_target,
        }


def conditional_power(
    n_enrolled: int,
    n_target: int,
    effect_hat: float,
    alpha: float = 0.05,
    target_rel_drop: float = 0.20,
    p0: float = 0.15,
    threshold: float = 0.70,
) -> ConditionalPowerEstimate:
    """Current-trend conditional power for a two-arm proportion comparison.

    ``effect_hat`` is the observed relative drop. The drift at full
    enrollment is estimated from the observed effect (the planned effect
    when nothing has been observed yet) and projected over the remaining
    information fraction.
    """
    if n_target <= 0 or not 0 <= n_enrolled <= n_target:
        raise InvalidEnrollment(f"need 0 <= n_enrolled <= n_target, got {n_enrolled}/{n_target}")
    rel = target_rel_drop if n_enrolled == 0 else effect_hat
    p1 = p0 * (1 - rel)
    var1 = p0 * (1 - p0) + p1 * (1 - p1)
    theta = (p0 - p1) / math.sqrt(max(var1, 1e-300) / n_target)
    z = norm.ppf(1 - alpha / 2)
    t = n_enrolled / n_target
    if t >= 1:
        cp = 1.0 if theta >= z else 0.0
    else:
        # B(t) = t*theta under the current trend; remaining increment ~ N(theta(1-t), 1-t)
        cp = float(norm.sf((z - theta) / math.sqrt(1 - t)))
    return ConditionalPowerEstimate(n_enrolled, n_target, effect_hat, cp, cp < threshold, threshold)


def jitter_tau(tau: float, session_seed: str | bytes | int, halfwidth: float = 0.02) -> float:
    """Deterministic per-session threshold drawn uniformly from tau +/- halfwidth."""
    if not (0 < tau - halfwidth and tau + halfwidth < 1):
        raise OutOfRange(f"tau {tau} +/- {halfwidth} leaves (0, 1)")
    if isinstance(session_seed, int):
        session_seed = str(session_seed)
    if isinstance(session_seed, str):
        session_seed = session_seed.encode()
    digest = hashlib.sha256(b"evgate-jitter|" + session_seed).digest()
    u = int.from_bytes(digest[:8], "big") / 2**64
    return tau - halfwidth + 2 * halfwidth * u

