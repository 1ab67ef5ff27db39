"""Monte Carlo propagation of dependent verifier errors: pair -> claim -> answer.

Each simulated claim has ``n_f`` pair checks, ``n_alt`` of which are true
supports and the rest nulls. A dependence model draws one uniform per check
with exact Uniform(0, 1) marginals:

* ``independent``: iid uniforms.
* ``gaussian``: exchangeable Gaussian copula with correlation ``rho``.
* ``t``: exchangeable t copula with correlation ``rho`` and ``nu`` dof.
* ``beta_binomial``: a per-claim error rate drawn from a beta with mean
  ``pair_fp`` (or ``pair_fn``) and intra-claim correlation ``phi``; checks
  are conditionally independent given that rate.

A null check is a false positive when its uniform falls below ``pair_fp``;
a true support is a false negative when its uniform exceeds ``1 - pair_fn``.
The same uniforms serve as null p-values, so Holm/BY act on the exact
dependence structure. Answers are ``n_c`` independent claims.
"""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats as sps

from .canonical import canonical_bytes
from .errors import InvalidConfig
from .stats import by_reject, holm_reject, m_eff_estimate, sample_size_two_proportions

MODELS = ("independent", "gaussian", "t", "beta_binomial")
CASCADE_RULES = ("any_fp", "any_error", "post_holm", "post_by")
T_DOF = (4, 6, 10)
BATCH_ROWS = 50_000


@dataclass(frozen=True)
class SimConfig:
    pair_fp: float = 0.05
    pair_fn: float = 0.10
    n_f: int = 5
    n_c: int = 1
    n_alt: int = 0
    cascade_rule: str = "any_fp"
    model: str = "independent"
    rho: float = 0.0
    nu: int = 6
    phi: float = 0.0
    alt_shift: float = 3.0
    n_draws: int = 10_000
    seed: int = 0
    alpha: float = 0.05
    q: float = 0.05

    def __post_init__(self):
        if not (0 <= self.pair_fp <= 1 and 0 <= self.pair_fn <= 1):
            raise InvalidConfig("error rates must lie in [0, 1]")
        if self.model not in MODELS:
            raise InvalidConfig(f"model must be one of {MODELS}")
        if self.cascade_rule not in CASCADE_RULES:
            raise InvalidConfig(f"cascade_rule must be one of {CASCADE_RULES}")
        # rho = 1 is accepted as the degenerate all-identical limit
        if not 0 <= self.rho <= 1:
            raise InvalidConfig("rho must lie in [0, 1]")
        if self.model == "t" and self.nu not in T_DOF:
            raise InvalidConfig(f"nu must be one of {T_DOF}")
        if not 0 <= self.phi < 1:
            raise InvalidConfig("phi must lie in [0, 1)")
        if self.n_f < 1 or self.n_c < 1 or self.n_draws < 1:
            raise InvalidConfig("n_f, n_c and n_draws must be at least 1")
        if not 0 <= self.n_alt <= self.n_f:
            raise InvalidConfig("n_alt must lie in [0, n_f]")
        if not (0 < self.alpha < 1 and 0 < self.q < 1):
            raise InvalidConfig("alpha and q must lie in (0, 1)")

    @property
    def n_null(self) -> int:
        return self.n_f - self.n_alt

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(canonical_bytes(self.to_dict())).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise InvalidConfig(f"unknown config keys {sorted(extra)}")
        return cls(**d)


@dataclass(frozen=True)
class Estimate:
    value: float
    se: float

    def within(self, target: float, k: float = 3.0) -> bool:
        return abs(self.value - target) <= k * self.se + 1e-12

    def to_dict(self) -> dict:
        return {"se": self.se, "value": self.value}


def _prop(x: np.ndarray) -> Estimate:
    n = x.size
    p = float(x.mean())
    return Estimate(p, math.sqrt(max(p * (1 - p), 0.0) / n))


def _mean(x: np.ndarray) -> Estimate:
    return Estimate(float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0)


@dataclass
class SimResult:
    config: dict
    config_hash: str
    claim_error: Estimate
    answer_error: Estimate
    fwer_post_holm: Estimate
    fdr_post_by: Estimate
    fp_rate: Estimate | None
    fn_rate: Estimate | None
    m_eff: dict | None = None
    pattern_counts: dict[str, int] = field(default_factory=dict)
    n_per_arm: list[dict] | None = None
    stress_cost: dict | None = None

    def to_dict(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            out[k] = v.to_dict() if isinstance(v, Estimate) else v
        return out


# --------------------------------------------------------------------------
# draws


def _latent(cfg: SimConfig, rng: np.random.Generator, rows: int) -> tuple[np.ndarray, callable]:
    """Latent matrix and its marginal CDF."""
    n = cfg.n_f
    if cfg.model == "independent":
        return rng.standard_normal((rows, n)), sps.norm.cdf
    w = rng.standard_normal((rows, 1))
    e = rng.standard_normal((rows, n))
    z = math.sqrt(cfg.rho) * w + math.sqrt(1 - cfg.rho) * e
    if cfg.model == "gaussian":
        return z, sps.norm.cdf
    s = rng.chisquare(cfg.nu, (rows, 1))
    t = z / np.sqrt(s / cfg.nu)
    return t, lambda x: sps.t.cdf(x, cfg.nu)


def _beta_rates(rng, mean: float, phi: float, rows: int) -> np.ndarray:
    if phi == 0 or mean in (0.0, 1.0):
        return np.full((rows, 1), mean)
    a = mean * (1 - phi) / phi
    b = (1 - mean) * (1 - phi) / phi
    return rng.beta(a, b, (rows, 1))


def _draw_batch(cfg: SimConfig, rng: np.random.Generator, rows: int):
    """Uniforms and p-values, shape (rows, n_f); columns [0, n_null) are nulls."""
    nn, na = cfg.n_null, cfg.n_alt
    if cfg.model == "beta_binomial":
        u = np.empty((rows, cfg.n_f))
        v = rng.random((rows, cfg.n_f))
        if nn:
            fp = cfg.pair_fp
            hit = rng.random((rows, nn)) < _beta_rates(rng, fp, cfg.phi, rows)
            vn = v[:, :nn]
            u[:, :nn] = np.where(hit, fp * vn, fp + (1 - fp) * vn)
        if na:
            fn = cfg.pair_fn
            hit = rng.random((rows, na)) < _beta_rates(rng, fn, cfg.phi, rows)
            va = v[:, nn:]
            u[:, nn:] = np.where(hit, 1 - fn * va, (1 - fn) * (1 - va))
        p = u.copy()
        if na:
            z = sps.norm.ppf(np.clip(u[:, nn:], 1e-300, 1 - 1e-16))
            p[:, nn:] = sps.norm.cdf(z - cfg.alt_shift)
        return u, p
    lat, cdf = _latent(cfg, rng, rows)
    u = cdf(lat)
    p = u.copy()
    if na:
        p[:, nn:] = cdf(lat[:, nn:] - cfg.alt_shift)
    return u, p


def simulate(cfg: SimConfig, *, m_eff_rows: int = 5_000, m_eff_boot: int = 200) -> SimResult:
    """Run ``cfg.n_draws`` simulated answers and aggregate error estimates.

    Batches use child seeds spawned from ``cfg.seed``, so the result is a
    pure function of the config.
    """
    rows_total = cfg.n_draws * cfg.n_c
    n_batches = -(-rows_total // BATCH_ROWS)
    children = np.random.SeedSequence(cfg.seed).spawn(n_batches)
    nn = cfg.n_null
    claim_err, fwer, fdp, fps, fns, keep = [], [], [], [], [], []
    pattern = np.zeros(2**cfg.n_f, dtype=np.int64) if cfg.n_f <= 10 else None
    for b, ss in enumerate(children):
        rows = min(BATCH_ROWS, rows_total - b * BATCH_ROWS)
        rng = np.random.default_rng(ss)
        u, p = _draw_batch(cfg, rng, rows)
        fp = u[:, :nn] < cfg.pair_fp
        fn = u[:, nn:] > 1 - cfg.pair_fn
        holm = holm_reject(p, cfg.alpha)
        by = by_reject(p, cfg.q)
        if cfg.cascade_rule == "any_fp":
            err = fp.any(axis=1)
        elif cfg.cascade_rule == "any_error":
            err = fp.any(axis=1) | fn.any(axis=1)
        elif cfg.cascade_rule == "post_holm":
            err = holm[:, :nn].any(axis=1)
        else:
            err = by[:, :nn].any(axis=1)
        claim_err.append(err)
        fwer.append(holm[:, :nn].any(axis=1))
        r = by.sum(axis=1)
        fdp.append(by[:, :nn].sum(axis=1) / np.maximum(r, 1))
        fps.append(fp.ravel())
        fns.append(fn.ravel())
        if pattern is not None:
            errs = np.concatenate([fp, fn], axis=1).astype(np.int64)
            codes = errs @ (1 << np.arange(cfg.n_f, dtype=np.int64))
            pattern += np.bincount(codes, minlength=2**cfg.n_f)
        if sum(len(k) for k in keep) < m_eff_rows:
            keep.append(u[: m_eff_rows - sum(len(k) for k in keep)])
    claim_err = np.concatenate(claim_err)
    answer_err = claim_err.reshape(cfg.n_draws, cfg.n_c).any(axis=1)
    fps = np.concatenate(fps)
    fns = np.concatenate(fns)
    m_eff = None
    if cfg.n_f >= 2:
        m_eff = m_eff_estimate(outcomes=np.concatenate(keep), n_boot=m_eff_boot, seed=cfg.seed).to_dict()
    counts = {}
    if pattern is not None:
        counts = {format(i, f"0{cfg.n_f}b")[::-1]: int(c) for i, c in enumerate(pattern) if c}
    return SimResult(
        config=cfg.to_dict(),
        config_hash=cfg.config_hash,
        claim_error=_prop(claim_err),
        answer_error=_prop(answer_err),
        fwer_post_holm=_prop(np.concatenate(fwer)),
        fdr_post_by=_mean(np.concatenate(fdp)),
        fp_rate=_prop(fps) if fps.size else None,
        fn_rate=_prop(fns) if fns.size else None,
        m_eff=m_eff,
        pattern_counts=counts,
    )


# --------------------------------------------------------------------------
# baselines


def analytic_claim_error(cfg: SimConfig) -> float:
    """Closed form under independence for the any-FP and any-error rules."""
    miss = (1 - cfg.pair_fp) ** cfg.n_null
    if cfg.cascade_rule == "any_error":
        miss *= (1 - cfg.pair_fn) ** cfg.n_alt
    elif cfg.cascade_rule != "any_fp":
        raise InvalidConfig("closed form only exists for any_fp / any_error")
    return 1 - miss


def exact_pattern_probs(cfg: SimConfig) -> dict[str, float]:
    """Independent-model probability of every error pattern (bit i = check i errs)."""
    rates = [cfg.pair_fp] * cfg.n_null + [cfg.pair_fn] * cfg.n_alt
    out = {}
    for bits in itertools.product((0, 1), repeat=cfg.n_f):
        pr = 1.0
        for b, r in zip(bits, rates):
            pr *= r if b else 1 - r
        out["".join(map(str, bits))] = pr
    return out


def pattern_check(res: SimResult, cfg: SimConfig, k: float = 3.0) -> list[dict]:
    n = cfg.n_draws * cfg.n_c
    rows = []
    for pat, pr in exact_pattern_probs(cfg).items():
        obs = res.pattern_counts.get(pat, 0) / n
        se = math.sqrt(pr * (1 - pr) / n)
        rows.append({"exact": pr, "observed": obs, "pattern": pat, "within": abs(obs - pr) <= k * se + 1e-12})
    return rows


def validate_baselines(
    base: SimConfig,
    rhos=(0.5, 0.2, 0.05, 0.0),
    model: str = "gaussian",
) -> dict:
    """Dependent-model estimates against independent analytics.

    Failures are report entries, never exceptions.
    """
    cfg0 = replace(base, model=model, cascade_rule="any_fp")
    target = analytic_claim_error(cfg0)
    entries = []
    sweep = []
    for rho in rhos:
        r = simulate(replace(cfg0, rho=rho), m_eff_boot=50)
        sweep.append({"claim_error": r.claim_error.to_dict(), "rho": rho})
        if rho == 0:
            entries.append(
                {"check": "rho0_matches_analytic", "detail": {"analytic": target, **r.claim_error.to_dict()}, "passed": r.claim_error.within(target)}
            )
        bound = cfg0.n_c * r.claim_error.value
        entries.append(
            {
                "check": f"union_bound_rho={rho}",
                "detail": {"answer_error": r.answer_error.value, "bound": bound},
                "passed": r.answer_error.value <= bound + 3 * r.answer_error.se,
            }
        )
    gaps = [abs(s["claim_error"]["value"] - target) for s in sweep]
    entries.append(
        {"check": "monotone_convergence", "detail": {"gaps": gaps}, "observed_only": True, "passed": all(a >= b for a, b in zip(gaps, gaps[1:]))}
    )
    if cfg0.n_f >= 2:
        deg = simulate(replace(cfg0, rho=1.0, n_draws=min(cfg0.n_draws, 5000)), m_eff_boot=50)
        m = deg.m_eff["m_eff"]
        entries.append({"check": "rho1_m_eff_is_1", "detail": {"m_eff": m}, "passed": abs(m - 1) <= 0.02})
    if cfg0.n_f <= 3:
        ind = replace(cfg0, model="independent", rho=0.0)
        rows = pattern_check(simulate(ind, m_eff_boot=10), ind)
        entries.append({"check": "exact_enumeration", "detail": rows, "passed": all(r["within"] for r in rows)})
    return {"analytic": target, "entries": entries, "passed": all(e["passed"] for e in entries if not e.get("observed_only")), "sweep": sweep}


# --------------------------------------------------------------------------
# power overlay


def _rejects(x0: np.ndarray, x1: np.ndarray, n: int, z: float) -> np.ndarray:
    """Two-sided two-proportion z test with the Yates/Fleiss 1/n correction."""
    p0, p1 = x0 / n, x1 / n
    pbar = (x0 + x1) / (2 * n)
    se = np.sqrt(np.maximum(pbar * (1 - pbar) * 2 / n, 1e-300))
    return (np.abs(p1 - p0) - 1 / n) / se > z


def simulated_power(
    n: int, p0: float, p1: float, alpha: float, reps: int, seed: int, rho: float = 0.0, cluster: int = 1
) -> float:
    """Share of simulated trials that reject; clustered outcomes when ``rho`` > 0."""
    rng = np.random.default_rng([seed, n])
    z = sps.norm.ppf(1 - alpha / 2)
    if rho == 0 or cluster <= 1:
        x0 = rng.binomial(n, p0, reps)
        x1 = rng.binomial(n, p1, reps)
    else:
        k = -(-n // cluster)
        n = k * cluster

        def arm(p):
            a, b = p * (1 - rho) / rho, (1 - p) * (1 - rho) / rho
            return rng.binomial(cluster, rng.beta(a, b, (reps, k))).sum(axis=1)

        x0, x1 = arm(p0), arm(p1)
    return float(_rejects(x0, x1, n, z).mean())


def power_overlay(
    p0_grid,
    rel_drop: float = 0.20,
    alpha: float = 0.05,
    power: float = 0.85,
    *,
    reps: int = 20_000,
    seed: int = 0,
    rho: float = 0.0,
    cluster: int = 1,
) -> list[dict]:
    """Minimal n per arm reaching ``power`` by simulation, next to the closed form.

    n is bisected on the simulated power curve; each candidate n reuses a
    seed derived from (seed, n), so the search is reproducible.
    """
    rows = []
    for p0 in p0_grid:
        if not 0 < p0 < 1:
            raise InvalidConfig("p0 must lie in (0, 1)")
        plan = sample_size_two_proportions(p0, rel_drop, alpha, power)
        p1 = p0 * (1 - rel_drop)

        def pw(n):
            return simulated_power(n, p0, p1, alpha, reps, seed, rho, cluster)

        lo, hi = 2, max(4, plan.n_per_arm)
        while pw(hi) < power:
            lo, hi = hi, hi * 2
        while hi - lo > max(1, hi // 500):
            mid = (lo + hi) // 2
            if pw(mid) >= power:
                hi = mid
            else:
                lo = mid
        rows.append(
            {
                "cluster": cluster,
                "n_closed_form": plan.n_per_arm,
                "n_simulated": hi,
                "p0": p0,
                "rel_diff": (hi - plan.n_per_arm) / plan.n_per_arm,
                "rho": rho,
            }
        )
    return rows


# --------------------------------------------------------------------------
# stress cost

STAGES = ("retrieval", "cheap", "small", "heavy", "proofs", "signing")


def _costs(cost_model, scenario, n, rng, cv, cache_miss_multiplier):
    parts = {}
    for s in STAGES:
        unit = float(cost_model.get(s, 0.0))
        if s == "retrieval" and scenario.get("cache", "on") == "off":
            unit *= cache_miss_multiplier
        c = np.full(n, unit)
        if s == "heavy":
            c = c * (rng.random(n) < scenario.get("heavy_share", 0.0))
        if cv > 0:
            sigma = math.sqrt(math.log1p(cv * cv))
            c = c * rng.lognormal(-sigma * sigma / 2, sigma, n)
        parts[s] = c
    return parts


def stress_cost(
    cost_model: dict,
    scenario: dict | None = None,
    baseline: dict | None = None,
    *,
    n_requests: int = 100_000,
    seed: int = 0,
    cv: float = 0.0,
    cache_miss_multiplier: float = 2.0,
) -> dict:
    """P50/P90 per-request cost of ``scenario`` over ``baseline``.

    Unit costs are caller inputs. The default stress scenario runs the
    heavy tier on 40% of requests with the retrieval cache off.
    """
    scenario = scenario or {"cache": "off", "heavy_share": 0.40}
    baseline = baseline or {"cache": "on", "heavy_share": 0.0}
    rng = np.random.default_rng(seed)
    base = _costs(cost_model, baseline, n_requests, rng, cv, cache_miss_multiplier)
    stress = _costs(cost_model, scenario, n_requests, rng, cv, cache_miss_multiplier)
    tb = sum(base.values())
    ts = sum(stress.values())
    out = {"baseline": baseline, "scenario": scenario, "components": {}}
    for q in (50, 90):
        b, s = float(np.percentile(tb, q)), float(np.percentile(ts, q))
        out[f"p{q}_baseline"] = b
        out[f"p{q}_stress"] = s
        out[f"p{q}_multiplier"] = s / b if b else float("nan")
    mean_b = float(tb.mean())
    for st in STAGES:
        out["components"][st] = {
            "baseline_mean": float(base[st].mean()),
            "contribution": float((stress[st].mean() - base[st].mean()) / mean_b) if mean_b else 0.0,
            "stress_mean": float(stress[st].mean()),
        }
    return out
