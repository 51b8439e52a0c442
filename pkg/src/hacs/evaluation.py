"""Offline evaluation of crawl policies against archived (or synthetic) histories.

Evaluation 1 sweeps a threshold and scores the selected sets with
precision, recall and F1.  Evaluation 2 scores rankings with a
log-weighted P@K.  Both walk the same grid of reference instants t, so each
(w, t) cell is scored once and reused.
"""
from __future__ import annotations

import bisect
import csv
import io
import logging
import math
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .detect import HOMEPAGE, Access, LinkCache, site_accesses, timeline_from_accesses, window_accesses
from .errors import ConfigError, InsufficientHistory
from .ingest import BodyStore, SiteRecord, iter_site_records
from .model import estimate_interpolated
from .scheduler import (
    BRUTE_FORCE,
    DEFAULT_E,
    HACS,
    LAST_OBS,
    RANDOM,
    THETA_GRID,
    Candidate,
    PredictionInput,
    f_estimate,
    g_probability,
    hacs_order,
    last_obs_order,
)

log = logging.getLogger(__name__)

ORACLE = "oracle"
SELECTION_POLICIES = (HACS, RANDOM, BRUTE_FORCE)
RANKING_POLICIES = (HACS, LAST_OBS, RANDOM)
MICRO = "micro"
MACRO = "macro"


@dataclass
class SiteHistory:
    """Full access sequence of one URL plus its interpolated update instants."""

    site_key: str
    accesses: list[Access]
    times: list[float]
    update_times: list[float]

    @classmethod
    def from_accesses(cls, site_key: str, accesses: Sequence[Access]) -> "SiteHistory":
        timeline = timeline_from_accesses(accesses)
        accesses = list(accesses)
        return cls(site_key, accesses, [a.time for a in accesses], list(timeline.interpolated_update_times))

    def first_update(self, start: float, end: float) -> Optional[float]:
        """Earliest interpolated update in ``[start, end]``, if any."""
        i = bisect.bisect_left(self.update_times, start)
        if i < len(self.update_times) and self.update_times[i] <= end:
            return self.update_times[i]
        return None


def load_histories(records: Iterable[SiteRecord], store, level: str = HOMEPAGE) -> list[SiteHistory]:
    links = LinkCache(store)
    out = []
    for rec in records:
        if rec.dropped:
            continue
        accesses = site_accesses(rec, links, level)
        if accesses:
            out.append(SiteHistory.from_accesses(rec.site_key, accesses))
    return sorted(out, key=lambda h: h.site_key)


def load_histories_from_dir(data_dir: Path, level: str = HOMEPAGE) -> list[SiteHistory]:
    data_dir = Path(data_dir)
    return load_histories(iter_site_records(data_dir), BodyStore(data_dir / "bodies"), level)


def coverage(histories: Sequence[SiteHistory]) -> tuple[float, float]:
    if not histories:
        raise ConfigError("no site histories to evaluate")
    return min(h.times[0] for h in histories), max(h.times[-1] for h in histories)


def make_t_grid(start: float, end: float, w_max: float, e: float = DEFAULT_E, step: float = 7.0) -> list[float]:
    """Weekly reference instants with a full history window before and ``e`` after."""
    first = start + 7.0 * w_max
    last = end - e
    if last < first:
        raise ConfigError(f"coverage [{start}, {end}] too short for w={w_max} weeks and e={e} days")
    n = int(math.floor((last - first) / step + 1e-9)) + 1
    return [first + i * step for i in range(n)]


def check_t_grid(t_grid: Sequence[float], histories: Sequence[SiteHistory], w_max: float, e: float) -> None:
    lo, hi = coverage(histories)
    if min(t_grid) - 7.0 * w_max < lo - 1e-9:
        raise ConfigError(f"t_grid start {min(t_grid)} needs history from {min(t_grid) - 7.0 * w_max}, data starts {lo}")
    if max(t_grid) + e > hi + 1e-9:
        raise ConfigError(f"t_grid end {max(t_grid)} needs data to {max(t_grid) + e}, data ends {hi}")


# ------------------------------------------------------------------ metrics


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def precision(self) -> float:
        sel = self.tp + self.fp
        return self.tp / sel if sel else 0.0

    @property
    def recall(self) -> float:
        pos = self.tp + self.fn
        return self.tp / pos if pos else 0.0

    @property
    def f1(self) -> float:
        return f1_score(self.precision, self.recall)

    @classmethod
    def of(cls, selected: set, truth: set, universe: int) -> "Confusion":
        tp = len(selected & truth)
        fp = len(selected) - tp
        fn = len(truth) - tp
        return cls(tp, fp, fn, universe - tp - fp - fn)


def f1_score(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def weighted_p_at_k(predicted: Sequence, expected: Sequence, n_relevant: int, normalize: bool = True) -> float:
    """Log-weighted mean of P@K over all cut-offs K.

    The first ``n_relevant`` items of ``expected`` are the relevant ones.
    Weights are 1/log2(K+1).  With ``normalize`` the result is divided by
    the same quantity for ``expected`` itself, so a perfect ranking scores
    1; otherwise it is divided by the weight sum.
    """
    if len(predicted) != len(expected) or set(predicted) != set(expected) or len(set(expected)) != len(expected):
        raise ValueError("predicted and expected must order the same set of distinct items")
    if not 0 <= n_relevant <= len(expected):
        raise ValueError("n_relevant out of range")
    if not expected:
        raise ValueError("empty ranking")
    relevant = set(expected[:n_relevant])
    hits = 0
    num = ideal = wsum = 0.0
    for k, item in enumerate(predicted, 1):
        hits += item in relevant
        w = 1.0 / math.log2(k + 1)
        num += w * hits / k
        ideal += w * min(k, n_relevant) / k
        wsum += w
    if normalize:
        return num / ideal if ideal > 0 else 1.0
    return num / wsum


# ------------------------------------------------------------------ cells


@dataclass
class Cell:
    """Scored candidates and ground truth at one (w, t)."""

    w: float
    t: float
    candidates: list[Candidate]
    first_update: dict[str, float]

    @property
    def truth(self) -> set[str]:
        return set(self.first_update)


def score_cell(histories: Sequence[SiteHistory], w: float, t: float, e: float = DEFAULT_E) -> Cell:
    cands, first = [], {}
    for h in histories:
        window = window_accesses(h.accesses, t - 7.0 * w, t, h.times)
        if len(window) < 2:
            continue
        try:
            lam, tau = f_estimate(PredictionInput(h.site_key, tuple(window), w, t, e))
        except InsufficientHistory:
            continue
        cands.append(Candidate(h.site_key, lam, tau, g_probability(lam, tau, t, e)))
        up = h.first_update(t, t + e)
        if up is not None:
            first[h.site_key] = up
    return Cell(w, t, cands, first)


def cell_rng(seed: int, w: float, t: float) -> np.random.Generator:
    """Independent stream per (w, t), so serial and parallel runs agree."""
    return np.random.default_rng([int(seed), int(round(w * 1000)), int(round(t * 1000))])


def random_order(cell: Cell, seed: int) -> list[str]:
    keys = sorted(c.site_key for c in cell.candidates)
    perm = cell_rng(seed, cell.w, cell.t).permutation(len(keys))
    return [keys[i] for i in perm]


def expected_order(cell: Cell) -> list[str]:
    """Updated URLs by first update after t, then the rest stalest first."""
    upd = sorted((c for c in cell.candidates if c.site_key in cell.first_update),
                 key=lambda c: (cell.first_update[c.site_key], c.site_key))
    rest = sorted((c for c in cell.candidates if c.site_key not in cell.first_update),
                  key=lambda c: (c.tau, c.site_key))
    return [c.site_key for c in upd + rest]


def cell_confusions(cell: Cell, thetas: Sequence[float], seed: int, policies: Sequence[str]) -> dict:
    """{(policy, theta): Confusion} for one cell."""
    n = len(cell.candidates)
    truth = cell.truth
    out = {}
    everything = {c.site_key for c in cell.candidates}
    rand = random_order(cell, seed) if RANDOM in policies else []
    for theta in thetas:
        hacs = {c.site_key for c in cell.candidates if c.p >= theta}
        for policy in policies:
            if policy == HACS:
                sel = hacs
            elif policy == RANDOM:
                sel = set(rand[: len(hacs)])
            elif policy == BRUTE_FORCE:
                sel = everything
            elif policy == ORACLE:
                sel = truth
            else:
                raise ValueError(f"{policy!r} has no selection")
            out[policy, theta] = Confusion.of(sel, truth, n)
    return out


def cell_rank_scores(cell: Cell, seed: int, policies: Sequence[str], normalize: bool = True) -> dict[str, float]:
    expected = expected_order(cell)
    k = len(cell.first_update)
    orders = {}
    for policy in policies:
        if policy == HACS:
            orders[policy] = [c.site_key for c in hacs_order(cell.candidates)]
        elif policy == LAST_OBS:
            orders[policy] = [c.site_key for c in last_obs_order(cell.candidates, cell.t)]
        elif policy == RANDOM:
            orders[policy] = random_order(cell, seed)
        elif policy == ORACLE:
            orders[policy] = expected
        else:
            raise ValueError(f"{policy!r} has no ranking")
    return {p: weighted_p_at_k(o, expected, k, normalize) for p, o in orders.items()}


# ------------------------------------------------------------------ report


@dataclass
class EvalReport:
    level: str
    e: float
    ws: tuple[float, ...]
    thetas: tuple[float, ...]
    selection_policies: tuple[str, ...]
    ranking_policies: tuple[str, ...]
    t_grid: tuple[float, ...]
    # (policy, w, theta) -> per-t confusion, in t order over non-empty cells
    confusions: dict = field(default_factory=dict)
    cell_times: dict = field(default_factory=dict)
    # (policy, w) -> per-t weighted P@K over cells with at least one update
    rank_scores: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)

    def scores(self, policy: str, w: float, theta: float, averaging: str = MICRO) -> tuple[float, float, float]:
        per_t = self.confusions[policy, w, theta]
        if averaging == MICRO:
            total = sum(per_t, Confusion())
            return total.precision, total.recall, total.f1
        if averaging != MACRO:
            raise ValueError(f"averaging must be micro or macro, got {averaging!r}")
        used = [c for c in per_t if c.tp + c.fn > 0]
        if not used:
            return 0.0, 0.0, 0.0
        return (
            math.fsum(c.precision for c in used) / len(used),
            math.fsum(c.recall for c in used) / len(used),
            math.fsum(c.f1 for c in used) / len(used),
        )

    def theta_hat(self, policy: str, w: float, averaging: str = MICRO) -> float:
        """Threshold with maximal F1; the smallest wins ties."""
        best, best_f1 = self.thetas[0], -1.0
        for theta in self.thetas:
            f1 = self.scores(policy, w, theta, averaging)[2]
            if f1 > best_f1:
                best, best_f1 = theta, f1
        return best

    def mean_rank_score(self, policy: str, w: float) -> float:
        vals = self.rank_scores.get((policy, w), [])
        return math.fsum(vals) / len(vals) if vals else float("nan")

    def sweep_rows(self) -> list[dict]:
        rows = []
        for policy in self.selection_policies:
            for averaging in (MICRO, MACRO):
                for w in self.ws:
                    for theta in self.thetas:
                        p, r, f1 = self.scores(policy, w, theta, averaging)
                        rows.append(dict(level=self.level, policy=policy, averaging=averaging, w=w,
                                         theta=theta, P=p, R=r, F1=f1))
        return rows

    def summary_rows(self) -> list[dict]:
        rows = []
        for averaging in (MICRO, MACRO):
            for w in self.ws:
                for policy in self.selection_policies:
                    th = self.theta_hat(policy, w, averaging)
                    p, r, f1 = self.scores(policy, w, th, averaging)
                    rows.append(dict(level=self.level, averaging=averaging, w=w, policy=policy,
                                     theta_hat=th, P=p, R=r, F1=f1))
        return rows

    def rank_rows(self) -> list[dict]:
        return [
            dict(policy=p, w=w, mean_weighted_p_at_k=self.mean_rank_score(p, w), cells=len(self.rank_scores.get((p, w), [])))
            for p in self.ranking_policies
            for w in self.ws
        ]


def _evaluate_w(args):
    histories, w, e, thetas, t_grid, seed, sel, rank, normalize = args
    conf = defaultdict(list)
    times, rank_scores = [], defaultdict(list)
    skipped = 0
    for t in t_grid:
        cell = score_cell(histories, w, t, e)
        if not cell.candidates:
            log.info("w=%s t=%s: no URL with windowed history, skipped", w, t)
            skipped += 1
            continue
        times.append(t)
        for (policy, theta), c in cell_confusions(cell, thetas, seed, sel).items():
            conf[policy, theta].append(c)
        if rank and cell.first_update:
            for policy, s in cell_rank_scores(cell, seed, rank, normalize).items():
                rank_scores[policy].append(s)
    return w, dict(conf), times, dict(rank_scores), skipped


def simulate_crawl_task(
    histories: Sequence[SiteHistory],
    ws: Sequence[float] = (1,),
    e: float = DEFAULT_E,
    theta_grid: Sequence[float] = THETA_GRID,
    t_grid: Optional[Sequence[float]] = None,
    selection_policies: Sequence[str] = SELECTION_POLICIES,
    ranking_policies: Sequence[str] = RANKING_POLICIES,
    seed: int = 0,
    level: str = HOMEPAGE,
    normalize_rank: bool = True,
    workers: int = 1,
) -> EvalReport:
    """Both evaluations over a grid of reference instants.

    Cells without any scorable URL are skipped; rank scores use only cells
    where at least one URL updates in ``[t, t+e]``.
    """
    ws = tuple(ws)
    if not ws:
        raise ConfigError("need at least one history size w")
    if t_grid is None:
        t_grid = make_t_grid(*coverage(histories), max(ws), e)
    else:
        t_grid = list(t_grid)
        check_t_grid(t_grid, histories, max(ws), e)
    jobs = [(histories, w, e, tuple(theta_grid), t_grid, seed, tuple(selection_policies),
             tuple(ranking_policies), normalize_rank) for w in ws]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_evaluate_w, jobs))
    else:
        results = [_evaluate_w(j) for j in jobs]

    report = EvalReport(level, e, ws, tuple(theta_grid), tuple(selection_policies),
                        tuple(ranking_policies), tuple(t_grid))
    for w, conf, times, ranks, skipped in results:
        for (policy, theta), per_t in conf.items():
            report.confusions[policy, w, theta] = per_t
        for policy in selection_policies:
            for theta in theta_grid:
                report.confusions.setdefault((policy, w, theta), [])
        report.cell_times[w] = times
        for policy, vals in ranks.items():
            report.rank_scores[policy, w] = vals
        report.skipped[w] = skipped
    return report


def rank_eval(histories, w, e=DEFAULT_E, t_grid=None, seed=0, policies=RANKING_POLICIES, normalize=True) -> dict[str, float]:
    """Mean weighted P@K per policy at one history size."""
    report = simulate_crawl_task(histories, (w,), e, (0.0,), t_grid, (), policies, seed, normalize_rank=normalize)
    return {p: report.mean_rank_score(p, w) for p in policies}


# ------------------------------------------------------------------ distributions


@dataclass
class DistributionBin:
    lo: int
    sites: int
    intervals: int
    counts: dict[int, int]
    mean_rate: float

    def points(self) -> list[tuple[int, float]]:
        return [(d, c / self.intervals) for d, c in sorted(self.counts.items())]

    def slope(self, min_count: int = 1) -> float:
        """Weighted least-squares slope of log probability against d."""
        pts = [(d, c) for d, c in sorted(self.counts.items()) if c >= min_count]
        if len(pts) < 2:
            return float("nan")
        d = np.array([p[0] for p in pts], dtype=float)
        c = np.array([p[1] for p in pts], dtype=float)
        return float(np.polyfit(d, np.log(c / self.intervals), 1, w=np.sqrt(c))[0])


def site_rate_and_intervals(history: SiteHistory) -> Optional[tuple[float, tuple[float, ...]]]:
    timeline = timeline_from_accesses(history.accesses)
    if not timeline.sufficient:
        return None
    est = estimate_interpolated(timeline.interpolated)
    return est.lam, timeline.interpolated.update_intervals


def interval_distribution(histories: Sequence[SiteHistory], bin_width: float = 1.0) -> list[DistributionBin]:
    """Group sites by estimated mean interval and histogram their update intervals.

    Sites go to bin ``floor(1/λ̃ / bin_width)``; intervals are counted in
    whole days.  Sites with no detected update carry no interval and are
    left out, as are empty bins.
    """
    groups: dict[int, list[tuple[float, tuple[float, ...]]]] = defaultdict(list)
    for h in histories:
        got = site_rate_and_intervals(h)
        if got is None or got[0] <= 0 or not got[1]:
            continue
        groups[int(math.floor(1.0 / got[0] / bin_width))].append(got)
    out = []
    for lo in sorted(groups):
        counts: dict[int, int] = defaultdict(int)
        for _, ivs in groups[lo]:
            for d in ivs:
                counts[int(math.floor(d))] += 1
        total = sum(counts.values())
        rate = math.fsum(lam for lam, _ in groups[lo]) / len(groups[lo])
        out.append(DistributionBin(int(lo * bin_width), len(groups[lo]), total, dict(counts), rate))
    return out


# ------------------------------------------------------------------ CSV

SWEEP_FIELDS = ("level", "policy", "averaging", "w", "theta", "P", "R", "F1")
SUMMARY_FIELDS = ("level", "averaging", "w", "policy", "theta_hat", "P", "R", "F1")
RANK_FIELDS = ("policy", "w", "mean_weighted_p_at_k", "cells")
DIST_FIELDS = ("bin_1_over_lambda", "d", "probability")


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return v


def to_csv(rows: Sequence[dict], fields: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row[k]) for k in fields})
    return buf.getvalue()


def distribution_rows(bins: Sequence[DistributionBin]) -> list[dict]:
    return [dict(bin_1_over_lambda=b.lo, d=d, probability=p) for b in bins for d, p in b.points()]
