"""Fetch, clean and store archived capture histories for tilde homepages."""
from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Iterable, Iterator, Optional
from urllib.parse import quote, unquote, urlsplit

import requests

from .errors import HacsError
from .timeutil import EVALUATION_WINDOW, Window, format_cdx_timestamp, parse_cdx_timestamp

log = logging.getLogger(__name__)

HTML_MIMES = frozenset({"text/html", "application/xhtml+xml"})
DEFAULT_MAX_DEPTH = 2
DEFAULT_ENDPOINT = "https://web.archive.org/cdx/search/cdx"
DEFAULT_REPLAY = "https://web.archive.org/web"


class FetchError(HacsError):
    """An archive request failed after all retries.

    ``kind`` is ``"unreachable"`` for connection-level failures and
    ``"http-<status>"`` otherwise.
    """

    def __init__(self, kind: str, detail: str):
        super().__init__(f"{kind}: {detail}")
        self.kind = kind
        self.detail = detail


class StoreCollision(HacsError):
    """Two different byte sequences were written under one digest."""


def sha1_base32(data: bytes) -> str:
    """Content digest in the archive's format (base32 SHA-1)."""
    return base64.b32encode(hashlib.sha1(data).digest()).decode("ascii")


# ---------------------------------------------------------------- seed URLs


@dataclass(frozen=True)
class SeedUrl:
    url: str
    site_key: str
    is_tilde_homepage: bool


def _tilde_index(segments: list[str]) -> Optional[int]:
    for i, seg in enumerate(segments):
        if seg.startswith("~"):
            return i
    return None


def parse_seed(url: str) -> SeedUrl:
    """Build a SeedUrl; ``site_key`` runs up to and including the tilde segment."""
    parts = urlsplit(url.strip())
    if parts.scheme.lower() not in ("http", "https") or not parts.hostname:
        raise ValueError(f"not an absolute http(s) URL: {url!r}")
    host = parts.netloc.lower()
    segments = [s for s in unquote(parts.path).split("/") if s]
    idx = _tilde_index(segments)
    if idx is None:
        key = host + ("/" + "/".join(segments) if segments else "")
        return SeedUrl(url.strip(), key, False)
    return SeedUrl(url.strip(), host + "/" + "/".join(segments[: idx + 1]), True)


def filter_tilde_homepages(urls: Iterable[str]) -> list[SeedUrl]:
    """Keep homepages hosted in a user directory (a path segment starting with "~")."""
    kept = []
    for url in urls:
        if not url or not url.strip():
            continue
        try:
            seed = parse_seed(url)
        except ValueError as exc:
            log.warning("skipping malformed seed %r: %s", url, exc)
            continue
        if seed.is_tilde_homepage:
            kept.append(seed)
    return kept


def _split_key(site_key: str) -> tuple[str, list[str]]:
    host, _, path = site_key.partition("/")
    return host.lower(), [s for s in path.split("/") if s]


def _bare_host(host: str) -> str:
    return host[4:] if host.startswith("www.") else host


def canonical_url(url: str) -> str:
    """Scheme-less form with lowercase host and no trailing slash; query kept."""
    parts = urlsplit(url)
    path = unquote(parts.path).rstrip("/")
    out = parts.netloc.lower() + path
    if parts.query:
        out += "?" + parts.query
    return out


def url_depth(site_key: str, url: str) -> Optional[int]:
    """Path segments of ``url`` beyond the site's path, or None if outside the site.

    Trailing slashes and query strings are ignored.
    """
    try:
        parts = urlsplit(url)
    except ValueError:
        return None
    host, base = _split_key(site_key)
    if _bare_host(parts.netloc.lower()) != _bare_host(host):
        return None
    segments = [s for s in unquote(parts.path).split("/") if s]
    if segments[: len(base)] != base:
        return None
    return len(segments) - len(base)


# ---------------------------------------------------------------- records


@dataclass(frozen=True)
class Capture:
    url: str
    timestamp: str
    digest: str
    status: int
    mime: str
    depth: Optional[int]
    html_ref: Optional[str] = None
    body_missing: bool = False

    @property
    def instant(self) -> Optional[datetime]:
        return parse_cdx_timestamp(self.timestamp)

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.url, self.timestamp, self.digest)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "Capture":
        return cls(
            url=obj["url"],
            timestamp=obj["timestamp"],
            digest=obj["digest"],
            status=int(obj["status"]),
            mime=obj["mime"],
            depth=obj.get("depth"),
            html_ref=obj.get("html_ref"),
            body_missing=bool(obj.get("body_missing", False)),
        )


def _capture_order(c: Capture):
    return (c.timestamp, c.url, c.digest)


@dataclass
class SiteRecord:
    site_key: str
    captures: list[Capture] = field(default_factory=list)
    fetch_log: list[dict] = field(default_factory=list)
    homepage: Optional[str] = None

    def by_url(self) -> dict[str, list[Capture]]:
        out: dict[str, list[Capture]] = {}
        for c in sorted(self.captures, key=_capture_order):
            out.setdefault(c.url, []).append(c)
        return out

    @property
    def dropped(self) -> bool:
        return any(entry.get("outcome") == "dropped" for entry in self.fetch_log)


def site_filename(site_key: str) -> str:
    return quote(site_key, safe="~") + ".jsonl"


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_site_record(record: SiteRecord) -> bytes:
    """Serialize as JSON lines: a site header followed by one line per capture."""
    header = {
        "record": "site",
        "site_key": record.site_key,
        "homepage": record.homepage,
        "fetch_log": record.fetch_log,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for c in sorted(record.captures, key=_capture_order):
        lines.append(json.dumps({"record": "capture", **c.to_json()}, sort_keys=True))
    return ("\n".join(lines) + "\n").encode("utf-8")


def save_site_record(record: SiteRecord, data_dir: Path) -> Path:
    path = Path(data_dir) / "sites" / site_filename(record.site_key)
    _atomic_write(path, dump_site_record(record))
    return path


def load_site_record(path: Path) -> SiteRecord:
    record = None
    captures = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            if obj.get("record") == "site":
                record = SiteRecord(obj["site_key"], [], obj.get("fetch_log", []), obj.get("homepage"))
            else:
                try:
                    captures.append(Capture.from_json(obj))
                except (KeyError, TypeError, ValueError) as exc:
                    raise ValueError(f"{path}: malformed capture line: {exc}") from exc
    if record is None:
        raise ValueError(f"{path}: missing site header line")
    record.captures = captures
    return record


def iter_site_records(data_dir: Path) -> Iterator[SiteRecord]:
    for path in sorted((Path(data_dir) / "sites").glob("*.jsonl")):
        yield load_site_record(path)


# ---------------------------------------------------------------- body store


class BodyStore:
    """Content-addressed body files under ``root/<digest[:2]>/<digest>``."""

    def __init__(self, root: Path):
        self.root = Path(root)

    def path(self, digest: str) -> Path:
        return self.root / digest[:2] / digest

    def has(self, digest: str) -> bool:
        return self.path(digest).exists()

    def get(self, digest: str) -> Optional[bytes]:
        try:
            return self.path(digest).read_bytes()
        except FileNotFoundError:
            return None

    def put(self, digest: str, data: bytes) -> None:
        existing = self.get(digest)
        if existing is not None:
            if existing != data:
                raise StoreCollision(f"different bodies under digest {digest}")
            return
        _atomic_write(self.path(digest), data)


class MemoryStore:
    """In-memory body store with the same interface as BodyStore."""

    def __init__(self):
        self._bodies: dict[str, bytes] = {}

    def has(self, digest: str) -> bool:
        return digest in self._bodies

    def get(self, digest: str) -> Optional[bytes]:
        return self._bodies.get(digest)

    def put(self, digest: str, data: bytes) -> None:
        existing = self._bodies.get(digest)
        if existing is not None and existing != data:
            raise StoreCollision(f"different bodies under digest {digest}")
        self._bodies[digest] = data

    def items(self):
        return sorted(self._bodies.items())

    def __len__(self):
        return len(self._bodies)


# ---------------------------------------------------------------- archive client


class ArchiveClient:
    """HTTP access to a CDX index and its replay service.

    Requests to one host are serialized and spaced at least ``delay``
    seconds apart.  Connection errors, 429 and 5xx responses are retried
    with capped exponential backoff.
    """

    _host_locks: dict[str, threading.Lock] = {}
    _host_last: dict[str, float] = {}
    _registry_lock = threading.Lock()

    def __init__(
        self,
        endpoint: str = DEFAULT_ENDPOINT,
        replay_base: str = DEFAULT_REPLAY,
        delay: float = 1.0,
        retries: int = 3,
        backoff: float = 1.0,
        backoff_cap: float = 30.0,
        timeout: float = 30.0,
        session: Optional[requests.Session] = None,
    ):
        if delay < 0:
            raise ValueError("delay must be non-negative")
        self.endpoint = endpoint
        self.replay_base = replay_base.rstrip("/")
        self.delay = delay
        self.retries = retries
        self.backoff = backoff
        self.backoff_cap = backoff_cap
        self.timeout = timeout
        self.session = session or requests.Session()
        self.requests_made = 0

    def _lock_for(self, host: str) -> threading.Lock:
        with self._registry_lock:
            return self._host_locks.setdefault(host, threading.Lock())

    def _get(self, url: str, params: Optional[dict] = None) -> requests.Response:
        host = urlsplit(url).netloc
        lock = self._lock_for(host)
        attempt = 0
        while True:
            with lock:
                wait = self._host_last.get(host, 0.0) + self.delay - time.monotonic()
                if wait > 0:
                    time.sleep(wait)
                try:
                    self.requests_made += 1
                    resp = self.session.get(url, params=params, timeout=self.timeout)
                    error = None
                except (requests.ConnectionError, requests.Timeout) as exc:
                    resp, error = None, exc
                finally:
                    self._host_last[host] = time.monotonic()
            if resp is not None and resp.status_code < 500 and resp.status_code != 429:
                return resp
            if attempt >= self.retries:
                if resp is None:
                    raise FetchError("unreachable", str(error))
                return resp
            time.sleep(min(self.backoff_cap, self.backoff * 2**attempt))
            attempt += 1

    def query_index(self, site_key: str, window: Window) -> str:
        params = {
            "url": site_key,
            "matchType": "prefix",
            "from": format_cdx_timestamp(window.start),
            "to": format_cdx_timestamp(window.end),
        }
        resp = self._get(self.endpoint, params)
        if resp.status_code != 200:
            raise FetchError(f"http-{resp.status_code}", f"index query for {site_key}")
        return resp.text

    def replay_url(self, capture: Capture) -> str:
        return f"{self.replay_base}/{capture.timestamp}id_/{capture.url}"

    def fetch_body(self, capture: Capture) -> bytes:
        resp = self._get(self.replay_url(capture))
        if resp.status_code != 200:
            raise FetchError(f"http-{resp.status_code}", self.replay_url(capture))
        return resp.content


def parse_cdx_line(line: str, site_key: str) -> Optional[Capture]:
    """One index row -> Capture, or None for malformed rows.

    Field order: urlkey timestamp original mimetype statuscode digest length.
    Extra trailing fields are ignored.
    """
    fields = line.split()
    if len(fields) < 6:
        return None
    _, stamp, original, mime, status, digest = fields[:6]
    try:
        code = int(status)
    except ValueError:
        code = 0
    return Capture(
        url=original,
        timestamp=stamp,
        digest=digest,
        status=code,
        mime=mime.split(";")[0].strip().lower(),
        depth=url_depth(site_key, original),
    )


def _is_html_ok(c: Capture) -> bool:
    return c.status == 200 and c.mime in HTML_MIMES


def fetch_timemap(seed: SeedUrl, window: Window, client: ArchiveClient) -> SiteRecord:
    """Prefix query for the site and parse retained captures.

    Keeps status-200 HTML rows and removes exact duplicates.  Dates and
    window bounds are left to ``clean_and_slice``; the window is only sent
    to the server as a query bound.
    """
    record = SiteRecord(seed.site_key, homepage=seed.url)
    try:
        text = client.query_index(seed.site_key, window)
    except FetchError as exc:
        record.fetch_log.append({"step": "index", "outcome": "error", "kind": exc.kind, "detail": exc.detail})
        return record
    rows = [line for line in text.splitlines() if line.strip()]
    seen = set()
    for line in rows:
        cap = parse_cdx_line(line, seed.site_key)
        if cap is None or not _is_html_ok(cap) or cap.key in seen:
            continue
        seen.add(cap.key)
        record.captures.append(cap)
    record.captures.sort(key=_capture_order)
    outcome = "ok" if rows else "not archived"
    record.fetch_log.append({"step": "index", "outcome": outcome, "rows": len(rows), "kept": len(record.captures)})
    return record


def clean_and_slice(
    record: SiteRecord,
    max_depth: int = DEFAULT_MAX_DEPTH,
    window: Window = EVALUATION_WINDOW,
    store=None,
) -> SiteRecord:
    """Drop inconsistent captures; returns a new record.

    Removes unparseable dates, non-200/non-HTML rows, captures outside the
    site or deeper than ``max_depth``, captures outside ``window``,
    duplicates, and captures whose stored body does not hash to their
    digest.  If several distinct URLs sit at depth 0, those other than the
    site key are dropped; the whole site is dropped if that does not
    resolve the ambiguity.
    """
    dropped: Counter = Counter()
    kept: list[Capture] = []
    seen_keys = set()
    seen_stamp = set()
    for c in sorted(record.captures, key=_capture_order):
        when = c.instant
        if when is None:
            dropped["invalid-date"] += 1
        elif not _is_html_ok(c):
            dropped["status-or-mime"] += 1
        elif c.depth is None or c.depth > max_depth:
            dropped["depth"] += 1
        elif when not in window:
            dropped["out-of-window"] += 1
        elif c.key in seen_keys or (c.url, c.timestamp) in seen_stamp:
            dropped["duplicate"] += 1
        elif c.html_ref and not _checksum_ok(c, store):
            dropped["checksum"] += 1
        else:
            seen_keys.add(c.key)
            seen_stamp.add((c.url, c.timestamp))
            kept.append(c)

    log_entry: dict = {"step": "clean", "outcome": "ok"}
    roots = {canonical_url(c.url) for c in kept if c.depth == 0}
    if len(roots) > 1:
        if record.site_key in roots:
            before = len(kept)
            kept = [c for c in kept if c.depth != 0 or canonical_url(c.url) == record.site_key]
            dropped["extra-depth-0"] += before - len(kept)
        else:
            dropped["site"] += len(kept)
            kept = []
            log_entry["outcome"] = "dropped"
            log_entry["reason"] = "multiple depth 0 URLs"
    log_entry["dropped"] = dict(sorted(dropped.items()))
    log_entry["kept"] = len(kept)
    return SiteRecord(record.site_key, kept, record.fetch_log + [log_entry], record.homepage)


def _checksum_ok(c: Capture, store) -> bool:
    if store is None:
        return c.html_ref == c.digest
    body = store.get(c.html_ref)
    if body is None:
        return True
    return sha1_base32(body) == c.digest


def dereference_captures(
    record: SiteRecord, store, client: ArchiveClient, previous: Optional[SiteRecord] = None
) -> SiteRecord:
    """Download each distinct body once and point ``html_ref`` at it.

    Bodies are stored under their own SHA-1 so a mismatching download is
    kept for inspection and later rejected by ``clean_and_slice``.  Bodies
    already present, by digest or through ``previous`` (an earlier run's
    record for the site), are never fetched again.
    """
    known: dict[tuple, str] = {}
    if previous is not None:
        for c in previous.captures:
            if c.html_ref:
                known[c.key] = c.html_ref
        for entry in previous.fetch_log:
            for url, stamp, digest, ref in entry.get("mismatched", []):
                known[(url, stamp, digest)] = ref
    out = []
    failures = 0
    mismatched = []
    for c in sorted(record.captures, key=_capture_order):
        ref = c.html_ref or known.get(c.key)
        if ref is None and store.has(c.digest):
            ref = c.digest
        if ref is not None and store.has(ref):
            out.append(replace(c, html_ref=ref, body_missing=False))
        else:
            try:
                body = client.fetch_body(c)
            except FetchError as exc:
                log.info("body missing for %s @ %s: %s", c.url, c.timestamp, exc)
                failures += 1
                out.append(replace(c, html_ref=None, body_missing=True))
                continue
            ref = sha1_base32(body)
            store.put(ref, body)
            out.append(replace(c, html_ref=ref, body_missing=False))
        if ref != c.digest:
            mismatched.append([c.url, c.timestamp, c.digest, ref])
    entry = {"step": "dereference", "outcome": "ok", "stored": len(out) - failures, "missing": failures}
    if mismatched:
        entry["mismatched"] = mismatched
    return SiteRecord(record.site_key, out, record.fetch_log + [entry], record.homepage)


def ingest_site(
    seed: SeedUrl,
    window: Window,
    client: ArchiveClient,
    store,
    max_depth: int = DEFAULT_MAX_DEPTH,
    previous: Optional[SiteRecord] = None,
) -> SiteRecord:
    """Fetch, clean, dereference, then re-clean so bad checksums are dropped."""
    record = fetch_timemap(seed, window, client)
    if not record.captures:
        return record
    record = clean_and_slice(record, max_depth, window)
    if record.dropped or not record.captures:
        return record
    record = dereference_captures(record, store, client, previous)
    return clean_and_slice(record, max_depth, window, store)
