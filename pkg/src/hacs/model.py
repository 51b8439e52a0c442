"""Poisson update model and mean-update-frequency estimators.

Times are in days (fractional days allowed) and rates in updates per day.
"""
from __future__ import annotations

import math
import sys
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from .errors import BracketError, ConvergenceError, DomainError, EstimationError

EPS = sys.float_info.epsilon

MLE = "mle"
CHO_RATIO = "cho-ratio"
ZERO_UPDATES = "zero-updates"
EXACT_TIMES = "exact-times"

# Bracket for the likelihood root, in updates/day.
BRACKET_LO = 1e-8
BRACKET_HI = 1.0
BRACKET_MAX = 1e4
MLE_TOL = 1e-12
MAX_ITER = 200


@dataclass(frozen=True)
class IntervalSet:
    """Access intervals split by whether the closing access saw an update."""

    update_intervals: tuple[float, ...]
    nonupdate_intervals: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "update_intervals", tuple(float(x) for x in self.update_intervals))
        object.__setattr__(self, "nonupdate_intervals", tuple(float(x) for x in self.nonupdate_intervals))
        if not self.update_intervals and not self.nonupdate_intervals:
            raise DomainError("an interval set needs at least one interval")
        for x in self.update_intervals + self.nonupdate_intervals:
            if not (x > 0 and math.isfinite(x)):
                raise DomainError(f"interval durations must be positive and finite, got {x!r}")

    @property
    def m(self) -> int:
        return len(self.update_intervals)

    @property
    def n(self) -> int:
        return len(self.update_intervals) + len(self.nonupdate_intervals)

    @property
    def span(self) -> float:
        return math.fsum(self.update_intervals) + math.fsum(self.nonupdate_intervals)


@dataclass(frozen=True)
class RateEstimate:
    lam: float
    method: str
    n: int
    m: int
    tau: Optional[float] = None

    @property
    def mean_interval(self) -> float:
        """1/lambda in days (infinite for a page never seen to update)."""
        return math.inf if self.lam == 0 else 1.0 / self.lam


@dataclass(frozen=True)
class AccessSummary:
    """Counts from ``n`` accesses made over ``T`` days, ``X`` of which saw an update."""

    X: int
    n: int
    T: float

    def __post_init__(self):
        if not 0 <= self.X <= self.n:
            raise DomainError(f"need 0 <= X <= n, got X={self.X}, n={self.n}")
        if self.n < 1:
            raise DomainError("need at least one access")
        if not self.T > 0:
            raise DomainError(f"elapsed time must be positive, got {self.T!r}")

    @property
    def f(self) -> float:
        """Access frequency, accesses per day."""
        return self.n / self.T


def density(lam: float, t: float) -> float:
    """Density of the waiting time until the next update."""
    if not lam > 0 or not t > 0:
        raise DomainError(f"density needs lam > 0 and t > 0, got lam={lam!r}, t={t!r}")
    return lam * math.exp(-lam * t)


def change_probability(lam: float, dt: float) -> float:
    """Probability of at least one update within ``dt`` days."""
    if lam < 0 or dt < 0:
        raise DomainError(f"change_probability needs lam >= 0 and dt >= 0, got {lam!r}, {dt!r}")
    return -math.expm1(-lam * dt)


def estimate_naive(summary: AccessSummary) -> float:
    """Updates detected divided by elapsed time. Biased low when updates outpace accesses."""
    return summary.X / summary.T


def cho_ratio(updates: int, accesses: int) -> float:
    """Estimate of r = lambda/f from ``updates`` changed accesses out of ``accesses``."""
    if not 0 <= updates <= accesses:
        raise DomainError(f"need 0 <= updates <= accesses, got {updates}, {accesses}")
    unchanged = accesses - updates
    return -math.log((unchanged + 0.5) / (accesses + 0.5))


def estimate_cho_ratio(summary: AccessSummary) -> float:
    """Ratio estimator scaled back to updates/day; assumes regular access."""
    return cho_ratio(summary.X, summary.n) * summary.f


def brent_root(
    fn: Callable[[float], float],
    lo: float,
    hi: float,
    tol: float = 1e-9,
    max_iter: int = MAX_ITER,
    ftol: float = 0.0,
) -> float:
    """Find a root of ``fn`` in ``[lo, hi]`` with Brent's method.

    Combines bisection, secant and inverse quadratic interpolation.  Stops
    when the bracket half-width drops below ``2*eps*|x| + tol/2`` or when
    ``|fn(x)| <= ftol``.  The endpoints may be given in either order.
    """
    if not tol > 0:
        raise DomainError(f"tol must be positive, got {tol!r}")
    a, b = (lo, hi) if lo <= hi else (hi, lo)
    fa, fb = fn(a), fn(b)
    if fa == 0:
        return a
    if fb == 0:
        return b
    if (fa > 0) == (fb > 0):
        raise BracketError(a, b, fa, fb)

    c, fc = a, fa
    d = e = b - a
    for _ in range(max_iter):
        if (fb > 0) == (fc > 0):
            c, fc = a, fa
            d = e = b - a
        if abs(fc) < abs(fb):
            a, b, c = b, c, b
            fa, fb, fc = fb, fc, fb
        tol1 = 2.0 * EPS * abs(b) + 0.5 * tol
        half = 0.5 * (c - b)
        if abs(half) <= tol1 or fb == 0 or abs(fb) <= ftol:
            return b
        if abs(e) >= tol1 and abs(fa) > abs(fb):
            s = fb / fa
            if a == c:
                p = 2.0 * half * s
                q = 1.0 - s
            else:
                q = fa / fc
                r = fb / fc
                p = s * (2.0 * half * q * (q - r) - (b - a) * (r - 1.0))
                q = (q - 1.0) * (r - 1.0) * (s - 1.0)
            if p > 0:
                q = -q
            else:
                p = -p
            if 2.0 * p < min(3.0 * half * q - abs(tol1 * q), abs(e * q)):
                e, d = d, p / q
            else:
                d = e = half
        else:
            d = e = half
        a, fa = b, fb
        b += d if abs(d) > tol1 else math.copysign(tol1, half)
        fb = fn(b)
    raise ConvergenceError(f"no convergence after {max_iter} iterations (last x={b!r})")


def _update_term(t: float, lam: float) -> float:
    # t / (exp(lam*t) - 1), written to avoid overflow for large lam*t
    x = lam * t
    return t * math.exp(-x) / -math.expm1(-x)


def likelihood_residual(intervals: IntervalSet, lam: float) -> float:
    """Score equation residual; zero at the maximum likelihood rate."""
    return math.fsum(_update_term(t, lam) for t in intervals.update_intervals) - math.fsum(
        intervals.nonupdate_intervals
    )


def estimate_mle(intervals: IntervalSet, tau: Optional[float] = None) -> RateEstimate:
    """Maximum likelihood rate for irregularly spaced accesses.

    Each update interval closes at an access that saw at least one change,
    each non-update interval at one that saw none.  When every access saw a
    change the likelihood has no finite maximum and the ratio estimator is
    used with f = n / span.  No observed update gives a rate of zero.
    """
    n, m = intervals.n, intervals.m
    if m == 0:
        return RateEstimate(0.0, ZERO_UPDATES, n, m, tau)
    span = intervals.span
    if m == n:
        return RateEstimate(cho_ratio(n, n) * n / span, CHO_RATIO, n, m, tau)

    # Solve in units of the mean interval so the tolerance is scale-free.
    scale = span / n
    tc = [t / scale for t in intervals.update_intervals]
    tu = math.fsum(intervals.nonupdate_intervals) / scale

    def residual(x: float) -> float:
        return math.fsum(_update_term(t, x) for t in tc) - tu

    lo, hi, limit = BRACKET_LO * scale, BRACKET_HI * scale, BRACKET_MAX * scale
    f_lo, f_hi = residual(lo), residual(hi)
    while f_lo > 0 and f_hi > 0 and hi < limit:
        hi = min(hi * 10.0, limit)
        f_hi = residual(hi)
    if (f_lo > 0) == (f_hi > 0) and f_lo != 0 and f_hi != 0:
        raise EstimationError(
            "likelihood root not bracketed", (lo / scale, hi / scale), (f_lo, f_hi)
        )
    x = brent_root(residual, lo, hi, tol=MLE_TOL, max_iter=MAX_ITER)
    return RateEstimate(x / scale, MLE, n, m, tau)


def estimate_interpolated(intervals: IntervalSet, tau: Optional[float] = None) -> RateEstimate:
    """Rate from intervals whose update instants are treated as known.

    Update intervals are complete exponential gaps and non-update
    intervals are right-censored, so the likelihood
    ``lam^m exp(-lam * total)`` peaks at ``m / total``.
    """
    if intervals.m == 0:
        return RateEstimate(0.0, ZERO_UPDATES, intervals.n, 0, tau)
    return RateEstimate(intervals.m / intervals.span, EXACT_TIMES, intervals.n, intervals.m, tau)


def summarize_accesses(flags: Sequence[bool], span: float) -> AccessSummary:
    """Access summary from per-access update flags over ``span`` days."""
    return AccessSummary(sum(bool(f) for f in flags), len(flags), span)
