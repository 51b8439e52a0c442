"""History-aware crawl scheduling (HACS) and baseline policies.

A URL's windowed capture history gives its update rate and last known
update time; from those, the probability that it changes by the next crawl
at ``t + e``.  HACS selects URLs whose probability reaches a threshold.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .detect import Access, timeline_from_accesses, window_accesses
from .errors import DomainError, InsufficientHistory
from .model import estimate_interpolated

HACS = "hacs"
RANDOM = "random"
BRUTE_FORCE = "brute-force"
LAST_OBS = "last-obs"
POLICIES = (HACS, RANDOM, BRUTE_FORCE, LAST_OBS)

DEFAULT_E = 7.0
THETA_GRID = tuple(round(0.05 * i, 2) for i in range(21))


@dataclass(frozen=True)
class PredictionInput:
    """Captures of one URL restricted to ``[t - w weeks, t]``."""

    site_key: str
    accesses: tuple[Access, ...]
    w: float
    t: float
    e: float = DEFAULT_E

    def __post_init__(self):
        lo = self.t - 7.0 * self.w
        for a in self.accesses:
            if not lo <= a.time <= self.t:
                raise DomainError(f"access at {a.time} outside window [{lo}, {self.t}]")

    @classmethod
    def from_history(cls, site_key: str, accesses: Sequence[Access], w: float, t: float,
                     e: float = DEFAULT_E, times: Optional[Sequence[float]] = None) -> "PredictionInput":
        return cls(site_key, tuple(window_accesses(accesses, t - 7.0 * w, t, times)), w, t, e)


@dataclass(frozen=True)
class Candidate:
    """A URL with enough windowed history to be scored."""

    site_key: str
    lam: float
    tau: float
    p: float


@dataclass(frozen=True)
class PlanEntry:
    site_key: str
    lam: float
    tau: float
    p: float
    selected: Optional[bool]
    rank: int


@dataclass
class CrawlPlan:
    policy: str
    t: float
    e: float
    theta: Optional[float]
    w: Optional[float] = None
    entries: list[PlanEntry] = field(default_factory=list)

    @property
    def selected(self) -> list[str]:
        return [x.site_key for x in self.entries if x.selected]

    @property
    def ranking(self) -> list[str]:
        return [x.site_key for x in sorted(self.entries, key=lambda x: x.rank)]

    def to_records(self) -> list[dict]:
        base = {"policy": self.policy, "t": self.t, "w": self.w, "theta": self.theta}
        return [{**asdict(x), **base} for x in sorted(self.entries, key=lambda x: x.rank)]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.to_records())

    def url_list(self) -> str:
        """Plain list for an external crawler: selected URLs in rank order, or the
        whole ranking when the policy does not select."""
        ranked = sorted(self.entries, key=lambda x: x.rank)
        if all(x.selected is None for x in ranked):
            return "".join(x.site_key + "\n" for x in ranked)
        return "".join(x.site_key + "\n" for x in ranked if x.selected)


def f_estimate(inp: PredictionInput) -> tuple[float, float]:
    """(rate, last known update time) from the windowed interpolated updates."""
    timeline = timeline_from_accesses(inp.accesses)
    if not timeline.sufficient:
        raise InsufficientHistory(f"{inp.site_key}: {len(timeline.access_times)} usable accesses in window")
    est = estimate_interpolated(timeline.interpolated, tau=timeline.tau)
    return est.lam, timeline.tau


def g_probability(lam: float, tau: float, t: float, e: float = DEFAULT_E) -> float:
    """Probability of at least one update by ``t + e`` given none known since ``tau``."""
    if t < tau:
        raise DomainError(f"reference time {t} precedes last update {tau}")
    if e < 0 or lam < 0:
        raise DomainError("need e >= 0 and lam >= 0")
    return -math.expm1(-lam * ((t - tau) + e))


def score(inputs: Iterable[PredictionInput]) -> list[Candidate]:
    """Candidates for every input with sufficient history; the rest are left out."""
    out = []
    for inp in inputs:
        try:
            lam, tau = f_estimate(inp)
        except InsufficientHistory:
            continue
        out.append(Candidate(inp.site_key, lam, tau, g_probability(lam, tau, inp.t, inp.e)))
    return out


def _common(inputs: Sequence[PredictionInput]) -> tuple[float, float, float]:
    cells = {(i.t, i.e, i.w) for i in inputs}
    if len(cells) > 1:
        raise ValueError("inputs must share t, e and w")
    return cells.pop() if cells else (math.nan, DEFAULT_E, math.nan)


def hacs_order(cands: Iterable[Candidate]) -> list[Candidate]:
    # p descending, then stalest first, then site key
    return sorted(cands, key=lambda c: (-c.p, c.tau, c.site_key))


def hacs_selection_size(cands: Iterable[Candidate], theta: float) -> int:
    return sum(1 for c in cands if c.p >= theta)


def _plan(policy, ordered, selected, t, e, theta, w):
    entries = [
        PlanEntry(c.site_key, c.lam, c.tau, c.p, None if selected is None else c.site_key in selected, r)
        for r, c in enumerate(ordered, 1)
    ]
    return CrawlPlan(policy, t, e, theta, w, entries)


def hacs_plan(cands: Sequence[Candidate], theta: float, t, e=DEFAULT_E, w=None) -> CrawlPlan:
    ordered = hacs_order(cands)
    chosen = {c.site_key for c in ordered if c.p >= theta}
    return _plan(HACS, ordered, chosen, t, e, theta, w)


def random_plan(cands: Sequence[Candidate], theta: float, rng: np.random.Generator, t,
                e=DEFAULT_E, w=None) -> CrawlPlan:
    base = sorted(cands, key=lambda c: c.site_key)
    perm = rng.permutation(len(base))
    ordered = [base[i] for i in perm]
    k = hacs_selection_size(cands, theta)
    chosen = {c.site_key for c in ordered[:k]}
    return _plan(RANDOM, ordered, chosen, t, e, theta, w)


def brute_force_plan(cands: Sequence[Candidate], t, e=DEFAULT_E, w=None, theta=None) -> CrawlPlan:
    ordered = sorted(cands, key=lambda c: c.site_key)
    return _plan(BRUTE_FORCE, ordered, {c.site_key for c in ordered}, t, e, theta, w)


def last_obs_order(cands: Iterable[Candidate], t: float) -> list[Candidate]:
    return sorted(cands, key=lambda c: (-(t - c.tau), c.site_key))


def last_obs_plan(cands: Sequence[Candidate], t, e=DEFAULT_E, w=None) -> CrawlPlan:
    return _plan(LAST_OBS, last_obs_order(cands, t), None, t, e, None, w)


def schedule_hacs(inputs: Sequence[PredictionInput], theta: float) -> CrawlPlan:
    t, e, w = _common(inputs)
    return hacs_plan(score(inputs), theta, t, e, w)


def schedule_random(inputs: Sequence[PredictionInput], theta: float, seed) -> CrawlPlan:
    """Same cardinality as HACS at ``theta``, drawn uniformly from all candidates."""
    t, e, w = _common(inputs)
    return random_plan(score(inputs), theta, np.random.default_rng(seed), t, e, w)


def schedule_brute_force(inputs: Sequence[PredictionInput]) -> CrawlPlan:
    t, e, w = _common(inputs)
    return brute_force_plan(score(inputs), t, e, w)


def schedule_last_obs(inputs: Sequence[PredictionInput]) -> CrawlPlan:
    """Ranking only: longest time since the last known update first."""
    t, e, w = _common(inputs)
    return last_obs_plan(score(inputs), t, e, w)


def with_theta(plan: CrawlPlan, theta: float) -> CrawlPlan:
    return replace(plan, theta=theta)
