"""Hypothesis tests that check sampled processes against their known laws."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .core import (
    BoundedBox,
    RngStream,
    extend_conditional,
    restrict,
    sample_mondrian,
    sample_trees,
)
from .kernel_approx import leaf_columns

DEFAULT_ALPHA = 0.01


class InsufficientSamplesError(ValueError):
    pass


@dataclass
class TestReport:
    name: str
    statistic: float
    p_value: float
    alpha: float
    passed: bool
    n_samples: int

    __test__ = False  # keep pytest from collecting this class

    @classmethod
    def make(cls, name, statistic, p_value, alpha, n) -> "TestReport":
        p = float(min(max(p_value, 0.0), 1.0))
        return cls(name, float(statistic), p, float(alpha), bool(p >= alpha), int(n))

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def combine(name: str, reports: Sequence[TestReport]) -> TestReport:
    """One report that passes only if every part passes (Bonferroni-free: each at its own alpha)."""
    worst = min(reports, key=lambda r: r.p_value / r.alpha)
    return TestReport(
        name,
        worst.statistic,
        worst.p_value,
        worst.alpha,
        all(r.passed for r in reports),
        max(r.n_samples for r in reports),
    )


def _pooled_poisson_bins(rate: float, n: int) -> list[tuple[int, int]]:
    # contiguous [lo, hi] count ranges with expected frequency >= 5 each, tails included
    pmf_cut = int(stats.poisson.ppf(1 - 1e-12, rate)) + 1
    bins, lo, acc = [], 0, 0.0
    for k in range(pmf_cut + 1):
        acc += stats.poisson.pmf(k, rate) * n
        if acc >= 5:
            bins.append((lo, k))
            lo, acc = k + 1, 0.0
    if not bins:
        return [(0, math.inf)]
    last_lo, _ = bins[-1]
    bins[-1] = (last_lo, math.inf)
    return bins


def poisson_gof(counts, rate: float, alpha: float = DEFAULT_ALPHA, name: str = "poisson_gof") -> TestReport:
    """Chi-square goodness of fit of ``counts`` to Poisson(rate), pooling sparse buckets."""
    counts = np.asarray(counts)
    if counts.size < 500:
        raise InsufficientSamplesError("need at least 500 counts")
    if not rate > 0:
        raise ValueError("rate must be positive")
    n = counts.size
    bins = _pooled_poisson_bins(rate, n)
    obs, exp = [], []
    for lo, hi in bins:
        obs.append(np.sum((counts >= lo) & (counts <= hi)))
        p = stats.poisson.cdf(hi, rate) if hi != math.inf else 1.0
        p -= stats.poisson.cdf(lo - 1, rate) if lo > 0 else 0.0
        exp.append(p * n)
    obs = np.array(obs, dtype=float)
    exp = np.array(exp)
    if len(bins) < 2:
        # all mass in one bucket: only a count outside the support could disagree
        ok = np.all(counts >= 0)
        return TestReport.make(name, 0.0, 1.0 if ok else 0.0, alpha, n)
    chi2 = float(np.sum((obs - exp) ** 2 / exp))
    p_value = float(stats.chi2.sf(chi2, len(bins) - 1))
    return TestReport.make(name, chi2, p_value, alpha, n)


def ks_test(samples, cdf: Callable, alpha: float = DEFAULT_ALPHA, name: str = "ks") -> TestReport:
    samples = np.asarray(samples, dtype=float)
    res = stats.kstest(samples, cdf)
    return TestReport.make(name, res.statistic, res.pvalue, alpha, samples.size)


def ks_two_sample(a, b, alpha: float = DEFAULT_ALPHA, name: str = "ks_2samp") -> TestReport:
    res = stats.ks_2samp(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    return TestReport.make(name, res.statistic, res.pvalue, alpha, len(a) + len(b))


def uniformity(samples, a: float, b: float, alpha: float = DEFAULT_ALPHA, name="uniformity") -> TestReport:
    return ks_test(samples, stats.uniform(loc=a, scale=b - a).cdf, alpha, name)


def clock_race(rates, trials: int, alpha: float = DEFAULT_ALPHA, rng: Optional[RngStream] = None) -> TestReport:
    """Race independent exponential clocks.

    Checks the winner frequencies against ``rate_n / sum(rates)`` (chi-square)
    and the winning time against Exp(sum(rates)) (KS).  Both must pass.
    """
    rates = np.asarray(rates, dtype=float)
    if rates.size < 2 or np.any(~(rates > 0)) or not np.all(np.isfinite(rates)):
        raise ValueError("need at least two positive finite rates")
    if trials < 10_000:
        raise InsufficientSamplesError("need at least 10^4 trials")
    rng = rng or RngStream(0, 0)
    winners, minima = race(rates, trials, rng)
    freq = np.bincount(winners, minlength=rates.size)
    expected = rates / rates.sum() * trials
    chi = stats.chisquare(freq, expected)
    total = rates.sum()
    r1 = TestReport.make("clock_race.winner", chi.statistic, chi.pvalue, alpha, trials)
    r2 = ks_test(minima, stats.expon(scale=1 / total).cdf, alpha, "clock_race.minimum")
    return combine("clock_race", [r1, r2])


def race(rates, trials: int, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Winner index and winning time of ``trials`` races between Exp(rate) clocks."""
    rates = np.asarray(rates, dtype=float)
    u = 1.0 - rng.generator.random((trials, rates.size))
    times = -np.log(u) / rates
    return np.argmin(times, axis=1), np.min(times, axis=1)


def residual_memoryless(
    rate: float,
    threshold: float,
    trials: int,
    alpha: float = DEFAULT_ALPHA,
    rng: Optional[RngStream] = None,
    samples=None,
) -> TestReport:
    """KS test of ``Z - t`` given ``Z > t`` against Exp(rate).

    ``samples`` replaces the internally drawn Exp(rate) values (negative controls).
    """
    if not rate > 0:
        raise ValueError("rate must be positive")
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    rng = rng or RngStream(0, 0)
    if samples is None:
        samples = -np.log(1.0 - rng.generator.random(trials)) / rate
    samples = np.asarray(samples, dtype=float)
    resid = samples[samples > threshold] - threshold
    if resid.size < 1000:
        raise InsufficientSamplesError(f"only {resid.size} survivors; need 1000")
    return ks_test(resid, stats.expon(scale=1 / rate).cdf, alpha, "residual_memoryless")


def kernel_mc_report(pairs, M: int, lifetimes, rng: Optional[RngStream] = None, seed: Optional[int] = None) -> float:
    """Largest deviation, in binomial standard errors, of the Mondrian kernel estimate.

    ``M`` trees are sampled on the bounding box of all pair points; for each
    pair the fraction of trees putting both points in one cell is compared with
    ``exp(-lifetime * |x - x'|_1)``.
    """
    if M < 30:
        raise ValueError("need M >= 30")
    pairs = [(np.asarray(a, dtype=float), np.asarray(b, dtype=float)) for a, b in pairs]
    lam = float(np.asarray(lifetimes, dtype=float).reshape(-1)[0])
    if np.ptp(np.asarray(lifetimes, dtype=float)) != 0:
        raise ValueError("Mondrian trees approximate the symmetric kernel; use one lifetime")
    pts = np.array([p for pair in pairs for p in pair])
    if seed is None:
        seed = int((rng or RngStream(0, 0)).generator.integers(2**63))
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    hi = np.where(hi > lo, hi, lo + 1.0)
    trees = sample_trees(BoundedBox(lo, hi), M, lam, seed)
    Z, _ = leaf_columns(trees, pts)
    worst = 0.0
    for k, (a, b) in enumerate(pairs):
        est = float(Z[2 * k] @ Z[2 * k + 1])
        exact = math.exp(-lam * float(np.abs(a - b).sum()))
        se = math.sqrt(exact * (1 - exact) / M)
        dev = abs(est - exact) / se if se > 0 else (0.0 if abs(est - exact) < 1e-12 else math.inf)
        worst = max(worst, dev)
    return worst


# -- suites used by the CLI ----------------------------------------------------


def suite_mondrian_1d(seed: int, alpha: float, n: int = 10_000, lifetime: float = 2.0):
    counts, locs = [], []
    box = BoundedBox([0.0], [1.0])
    for i in range(n):
        t = sample_mondrian(box, lifetime, RngStream(seed, i))
        counts.append(t.num_cuts)
        locs += t.cut_locations()
    return [
        poisson_gof(counts, lifetime, alpha, name="mondrian_1d.counts"),
        uniformity(locs, 0.0, 1.0, alpha, name="mondrian_1d.locations"),
    ]


def suite_clocks(seed: int, alpha: float):
    return [clock_race((1.0, 3.0), 100_000, alpha, RngStream(seed, 1))]


def suite_memoryless(seed: int, alpha: float):
    return [residual_memoryless(2.0, 0.5, 20_000, alpha, RngStream(seed, 2))]


def slice_crossings(seed: int, n: int = 10_000) -> list[int]:
    """Cuts of MP(1, [0,2]^2) crossing the segment x2 = 1, x1 in [0.5, 1.5]."""
    big = BoundedBox([0.0, 0.0], [2.0, 2.0])
    seg = BoundedBox([0.5, 1.0], [1.5, 1.0])
    return [restrict(sample_mondrian(big, 1.0, RngStream(seed, i)), seg).num_cuts for i in range(n)]


def suite_slices(seed: int, alpha: float, n: int = 10_000):
    return [poisson_gof(slice_crossings(seed, n), 1.0, alpha, name="slices.counts")]


def extension_first_cuts(seed: int, n: int = 10_000):
    """First-cut times (censored at the lifetime) of extended and of direct samples."""
    phi = BoundedBox([0.25, 0.25], [0.75, 0.75])
    theta = BoundedBox([0.0, 0.0], [1.0, 1.0])
    ext, direct = [], []
    for i in range(n):
        small = sample_mondrian(phi, 1.0, RngStream(seed, 2 * i))
        t = extend_conditional(small, theta, RngStream(seed, 2 * i + 1))
        ext.append(t.first_cut_time() if t.first_cut_time() is not None else 1.0)
        d = sample_mondrian(theta, 1.0, RngStream(seed + 1, i))
        direct.append(d.first_cut_time() if d.first_cut_time() is not None else 1.0)
    return np.array(ext), np.array(direct)


def suite_extension(seed: int, alpha: float, n: int = 10_000):
    ext, direct = extension_first_cuts(seed, n)
    return [ks_two_sample(ext, direct, alpha, name="extension.first_cut")]


def suite_kernel(seed: int, alpha: float):
    rng = RngStream(seed, 3)
    pairs = [(rng.generator.random(2), rng.generator.random(2)) for _ in range(20)]
    dev = kernel_mc_report(pairs, 1000, 1.0, seed=seed)
    # a max over 20 pairs of |N(0,1)| exceeds 4 with probability ~1.3e-3
    return [TestReport("kernel_mc.max_se", dev, 1.0 if dev <= 4 else 0.0, alpha, dev <= 4, 20 * 1000)]


SUITES = {
    "mondrian-1d": suite_mondrian_1d,
    "clocks": suite_clocks,
    "memoryless": suite_memoryless,
    "slices": suite_slices,
    "extension": suite_extension,
    "kernel": suite_kernel,
}


def run_suite(name: str, seed: int = 0, alpha: float = DEFAULT_ALPHA) -> list[TestReport]:
    if name == "all":
        return [r for key in SUITES for r in SUITES[key](seed, alpha)]
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {sorted(SUITES)} or 'all'")
    return SUITES[name](seed, alpha)
