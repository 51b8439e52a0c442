"""Update detection by new-link diffing, and the interval sets built from it."""
from __future__ import annotations

import bisect
import logging
import re
from dataclasses import dataclass
from datetime import timezone
from html.parser import HTMLParser
from typing import Iterable, Optional, Sequence
from urllib.parse import urljoin, urlsplit, urlunsplit

from .ingest import SiteRecord
from .model import IntervalSet
from .timeutil import to_days

log = logging.getLogger(__name__)

HOMEPAGE = "homepage"
WEBSITE = "website"
LEVELS = (HOMEPAGE, WEBSITE)

_REPLAY_PATH = re.compile(r"^/web/\d{1,14}[a-z_]*/(.+)$")
_SCHEME_SLASHES = re.compile(r"^(https?):/+", re.I)
_DEFAULT_PORTS = {"http": ":80", "https": ":443"}


def strip_replay_prefix(url: str) -> str:
    """Map an archive replay URL (``/web/<timestamp>[mod_]/<url>``) to its live URL."""
    parts = urlsplit(url)
    rest = parts.path + ("?" + parts.query if parts.query else "")
    match = _REPLAY_PATH.match(rest)
    if not match:
        return url
    inner = match.group(1)
    if _SCHEME_SLASHES.match(inner):
        return _SCHEME_SLASHES.sub(lambda m: m.group(1).lower() + "://", inner, count=1)
    return "http://" + inner


def normalize_url(url: str) -> Optional[str]:
    """Lowercase scheme and host, drop fragment and default port, keep path case.

    Returns None for non-http(s) targets.
    """
    try:
        parts = urlsplit(strip_replay_prefix(url.strip()))
    except ValueError:
        return None
    scheme = parts.scheme.lower()
    if scheme not in _DEFAULT_PORTS or not parts.netloc:
        return None
    netloc = parts.netloc.lower()
    if netloc.endswith(_DEFAULT_PORTS[scheme]):
        netloc = netloc[: -len(_DEFAULT_PORTS[scheme])]
    return urlunsplit((scheme, netloc, parts.path or "/", parts.query, ""))


class _AnchorParser(HTMLParser):
    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.hrefs: list[str] = []
        self.base: Optional[str] = None

    def handle_starttag(self, tag, attrs):
        if tag == "a":
            for name, value in attrs:
                if name == "href" and value:
                    self.hrefs.append(value)
        elif tag == "base" and self.base is None:
            for name, value in attrs:
                if name == "href" and value:
                    self.base = value

    handle_startendtag = handle_starttag


def _decode(html: bytes) -> str:
    try:
        return html.decode("utf-8")
    except UnicodeDecodeError:
        return html.decode("cp1252", errors="replace")


def extract_links(html: bytes, base_url: str) -> frozenset[str]:
    """Normalized absolute targets of every anchor in ``html``."""
    parser = _AnchorParser()
    try:
        parser.feed(_decode(html))
        parser.close()
    except Exception as exc:  # html.parser is lenient; keep what was collected
        log.debug("markup error under %s: %s", base_url, exc)
    base = base_url
    if parser.base:
        base = urljoin(base_url, strip_replay_prefix(parser.base))
    links = set()
    for href in parser.hrefs:
        try:
            target = urljoin(base, href.strip())
        except ValueError:
            continue
        norm = normalize_url(target)
        if norm is not None:
            links.add(norm)
    return frozenset(links)


def new_link_counts(link_sets: Sequence[Optional[Iterable[str]]]) -> list[Optional[int]]:
    """|links never seen in any earlier capture| per capture, in order.

    The first capture and captures without a body (None) get None.
    """
    seen: set[str] = set()
    counts: list[Optional[int]] = []
    first = True
    for links in link_sets:
        if links is None:
            counts.append(None)
            continue
        links = set(links)
        counts.append(None if first else len(links - seen))
        first = False
        seen |= links
    return counts


@dataclass(frozen=True)
class Access:
    """One point at which a page (or site) was observed, with its links."""

    time: float
    links: frozenset[str]


@dataclass(frozen=True)
class UpdateTimeline:
    access_times: tuple[float, ...]
    update_flags: tuple[bool, ...]
    new_links: tuple[Optional[int], ...]
    observed: Optional[IntervalSet]
    interpolated_update_times: tuple[float, ...]
    interpolated: Optional[IntervalSet]
    tau: Optional[float]

    @property
    def sufficient(self) -> bool:
        return len(self.access_times) >= 2

    @property
    def span(self) -> float:
        return self.access_times[-1] - self.access_times[0] if self.access_times else 0.0


def merge_simultaneous(accesses: Iterable[Access]) -> list[Access]:
    """Sort by time and union the link sets of accesses sharing an instant."""
    out: list[Access] = []
    for acc in sorted(accesses, key=lambda a: a.time):
        if out and out[-1].time == acc.time:
            out[-1] = Access(acc.time, out[-1].links | acc.links)
        else:
            out.append(acc)
    return out


def timeline_from_accesses(accesses: Sequence[Access]) -> UpdateTimeline:
    """Flag updates and build the observed and interpolated interval sets.

    An access is flagged when it shows a link absent from every earlier
    access.  Interpolated update times are midpoints of the gaps closing at
    flagged accesses.  The interpolated update intervals run from the first
    access to the first interpolated update and then between consecutive
    interpolated updates; the stretch after the last one (or the whole span
    when nothing was flagged) is the single non-update interval.
    """
    accesses = merge_simultaneous(accesses)
    times = tuple(a.time for a in accesses)
    if len(times) < 2:
        return UpdateTimeline(times, (False,) * len(times), (None,) * len(times), None, (), None,
                              times[0] if times else None)

    counts = new_link_counts([a.links for a in accesses])
    flags = (False,) + tuple(bool(c) for c in counts[1:])
    tc, tu, ups = [], [], []
    for i in range(1, len(times)):
        gap = times[i] - times[i - 1]
        if flags[i]:
            tc.append(gap)
            ups.append((times[i - 1] + times[i]) / 2.0)
        else:
            tu.append(gap)
    observed = IntervalSet(tc, tu)

    if ups:
        itc = [ups[0] - times[0]] + [b - a for a, b in zip(ups, ups[1:])]
        interpolated = IntervalSet(itc, [times[-1] - ups[-1]])
        tau = ups[-1]
    else:
        interpolated = IntervalSet([], [times[-1] - times[0]])
        tau = times[0]
    return UpdateTimeline(times, flags, tuple(counts), observed, tuple(ups), interpolated, tau)


class LinkCache:
    """Memoizes link extraction per (body reference, base URL)."""

    def __init__(self, store):
        self.store = store
        self._cache: dict[tuple[str, str], Optional[frozenset[str]]] = {}

    def links(self, html_ref: Optional[str], base_url: str) -> Optional[frozenset[str]]:
        if not html_ref:
            return None
        key = (html_ref, base_url)
        if key not in self._cache:
            body = self.store.get(html_ref)
            self._cache[key] = None if body is None else extract_links(body, base_url)
        return self._cache[key]


def site_accesses(record: SiteRecord, links: LinkCache, level: str = HOMEPAGE) -> list[Access]:
    """Access sequence for a cleaned site record.

    ``homepage`` uses the depth-0 captures.  ``website`` buckets every
    capture of the site by UTC calendar day; a day's link set is the union
    over its captures and its time is the earliest capture that day.
    Captures whose body is unavailable are left out.
    """
    if level not in LEVELS:
        raise ValueError(f"level must be one of {LEVELS}, got {level!r}")
    usable = []
    for c in record.captures:
        if c.body_missing or (level == HOMEPAGE and c.depth != 0):
            continue
        when = c.instant
        found = links.links(c.html_ref, c.url)
        if when is None or found is None:
            continue
        usable.append((when, found))

    if level == HOMEPAGE:
        return merge_simultaneous(Access(to_days(when), found) for when, found in usable)

    days: dict = {}
    for when, found in usable:
        day = when.astimezone(timezone.utc).date()
        first, acc = days.get(day, (when, frozenset()))
        days[day] = (min(first, when), acc | found)
    return [Access(to_days(first), found) for _, (first, found) in sorted(days.items())]


def build_timeline(record: SiteRecord, store, level: str = HOMEPAGE) -> UpdateTimeline:
    return timeline_from_accesses(site_accesses(record, LinkCache(store), level))


def window_accesses(
    accesses: Sequence[Access], start: float, end: float, times: Optional[Sequence[float]] = None
) -> list[Access]:
    """Accesses with ``start <= time <= end``; input must be time-ordered."""
    if times is None:
        times = [a.time for a in accesses]
    return list(accesses[bisect.bisect_left(times, start): bisect.bisect_right(times, end)])


def timeline_summary(site_key: str, level: str, timeline: UpdateTimeline) -> dict:
    """Plain record of a timeline's estimator inputs."""
    out = {
        "site_key": site_key,
        "level": level,
        "accesses": len(timeline.access_times),
        "sufficient": timeline.sufficient,
        "tau": timeline.tau,
    }
    if timeline.sufficient:
        out.update(
            n=timeline.observed.n,
            m=timeline.observed.m,
            t_c=list(timeline.observed.update_intervals),
            t_u=list(timeline.observed.nonupdate_intervals),
            interp_update_times=list(timeline.interpolated_update_times),
            interp_t_c=list(timeline.interpolated.update_intervals),
            interp_t_u=list(timeline.interpolated.nonupdate_intervals),
        )
    return out

