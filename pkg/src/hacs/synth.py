"""Synthetic Poisson corpora in the same record format as ingested data."""
from __future__ import annotations

import json
from statistics import NormalDist
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError
from .ingest import BodyStore, Capture, MemoryStore, SiteRecord, save_site_record, sha1_base32
from .timeutil import format_cdx_timestamp, from_days, to_days

TRUTH_FILE = "synth_truth.jsonl"


@dataclass(frozen=True)
class SynthConfig:
    """Population and observation parameters.

    Mean update intervals 1/λ are log-normal with the given median and
    log-scale ``sigma``.  Accesses are spaced by independent uniform gaps in
    ``[gap_min, gap_max]`` days.  ``rates`` overrides the population with
    explicit per-site λ values (per day); zero means the page never changes.
    With ``stratified`` the population draw takes one value per quantile
    stratum, so small populations still track the configured median.
    """

    n_sites: int = 200
    median_interval: float = 74.0
    sigma: float = 1.5
    start: str = "2015-06-01"
    span_days: float = 1096.0
    gap_min: float = 0.5
    gap_max: float = 1.5
    links_shown: int = 20
    host: str = "synth.example.edu"
    rates: Optional[tuple[float, ...]] = None
    stratified: bool = True

    def __post_init__(self):
        if self.rates is not None:
            object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
            object.__setattr__(self, "n_sites", len(self.rates))
            if any(not np.isfinite(r) or r < 0 for r in self.rates):
                raise ConfigError("rates must be finite and non-negative")
        if self.n_sites <= 0:
            raise ConfigError("need at least one site")
        if not self.span_days > 0:
            raise ConfigError("span_days must be positive")
        if not self.median_interval > 0 or self.sigma < 0:
            raise ConfigError("need median_interval > 0 and sigma >= 0")
        if not 0 < self.gap_min <= self.gap_max:
            raise ConfigError("need 0 < gap_min <= gap_max")
        if self.links_shown < 1:
            raise ConfigError("links_shown must be at least 1")
        try:
            datetime.fromisoformat(self.start)
        except ValueError as exc:
            raise ConfigError(f"bad start date {self.start!r}") from exc

    @property
    def start_days(self) -> float:
        return to_days(datetime.fromisoformat(self.start).replace(tzinfo=timezone.utc))

    @classmethod
    def from_dict(cls, obj: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown synth settings: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class SyntheticSite:
    site_key: str
    lam: float
    update_times: np.ndarray
    access_times: np.ndarray

    @property
    def url(self) -> str:
        return f"http://{self.site_key}/"


@dataclass
class SyntheticCorpus:
    config: SynthConfig
    seed: int
    sites: list[SyntheticSite]
    records: list[SiteRecord] = field(default_factory=list)
    store: MemoryStore = field(default_factory=MemoryStore)

    @property
    def rates(self) -> np.ndarray:
        return np.array([s.lam for s in self.sites])


def poisson_times(rng: np.random.Generator, lam: float, start: float, span: float) -> np.ndarray:
    """Event times of a homogeneous Poisson process on ``[start, start + span)``."""
    if lam <= 0:
        return np.empty(0)
    count = rng.poisson(lam * span)
    return start + np.sort(rng.uniform(0.0, span, size=count))


def access_times(rng: np.random.Generator, cfg: SynthConfig, start: float) -> np.ndarray:
    """Irregular access instants rounded to whole seconds, as the archive records them.

    The first access falls at ``start`` so the corpus covers its whole span.
    """
    mean_gap = (cfg.gap_min + cfg.gap_max) / 2
    n = int(cfg.span_days / mean_gap * 1.2) + 16
    offsets = np.concatenate(([0.0], np.cumsum(rng.uniform(cfg.gap_min, cfg.gap_max, size=n))))
    while offsets[-1] < cfg.span_days:
        more = offsets[-1] + np.cumsum(rng.uniform(cfg.gap_min, cfg.gap_max, size=n))
        offsets = np.concatenate((offsets, more))
    offsets = offsets[offsets <= cfg.span_days]
    seconds = np.unique(np.round((start + offsets) * 86400.0))
    return seconds / 86400.0


def sample_rates(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    if cfg.rates is not None:
        return np.array(cfg.rates)
    if cfg.stratified:
        n = cfg.n_sites
        u = (np.arange(n) + rng.uniform(size=n)) / n
        z = np.array([NormalDist().inv_cdf(min(max(x, 1e-12), 1 - 1e-12)) for x in rng.permutation(u)])
    else:
        z = rng.standard_normal(cfg.n_sites)
    return 1.0 / (cfg.median_interval * np.exp(cfg.sigma * z))


def _page(shown: int, newest: int) -> bytes:
    links = ['<a href="index.html">home</a>', '<a href="cv.html">cv</a>']
    for k in range(newest, max(0, newest - shown), -1):
        links.append(f'<a href="news/item{k}.html">item {k}</a>')
    return ("<html><body>" + "\n".join(links) + "</body></html>\n").encode()


def _record(site: SyntheticSite, cfg: SynthConfig, store: MemoryStore) -> SiteRecord:
    # number of true updates at or before each access; a new one shows a new link
    seen = np.searchsorted(site.update_times, site.access_times, side="right")
    captures = []
    bodies: dict[int, str] = {}
    for when, k in zip(site.access_times, seen):
        k = int(k)
        if k not in bodies:
            body = _page(cfg.links_shown, k)
            bodies[k] = sha1_base32(body)
            store.put(bodies[k], body)
        stamp = format_cdx_timestamp(from_days(float(when)))
        captures.append(Capture(site.url, stamp, bodies[k], 200, "text/html", 0, bodies[k]))
    log = [{"step": "synth", "outcome": "ok", "captures": len(captures), "updates": int(len(site.update_times))}]
    return SiteRecord(site.site_key, captures, log, site.url)


def generate_synthetic_corpus(config: SynthConfig, seed: int) -> SyntheticCorpus:
    """Draw a population, its update processes and access schedules.

    Every site gets its own RNG stream derived from ``seed`` so a site's
    realization does not depend on how many sites are generated after it.
    """
    if not isinstance(config, SynthConfig):
        raise ConfigError("config must be a SynthConfig")
    root = np.random.SeedSequence(seed)
    pop_seq, *site_seqs = root.spawn(config.n_sites + 1)
    rates = sample_rates(np.random.default_rng(pop_seq), config)
    start = config.start_days
    width = max(4, len(str(config.n_sites - 1)))
    corpus = SyntheticCorpus(config, seed, [])
    for i, (lam, seq) in enumerate(zip(rates, site_seqs)):
        rng = np.random.default_rng(seq)
        site = SyntheticSite(
            f"{config.host}/~site{i:0{width}d}",
            float(lam),
            poisson_times(rng, float(lam), start, config.span_days),
            access_times(rng, config, start),
        )
        corpus.sites.append(site)
        corpus.records.append(_record(site, config, corpus.store))
    return corpus


def truth_lines(corpus: SyntheticCorpus) -> bytes:
    rows = [json.dumps({"record": "config", "seed": corpus.seed, **asdict(corpus.config)}, sort_keys=True)]
    for s in corpus.sites:
        rows.append(json.dumps({
            "record": "site",
            "site_key": s.site_key,
            "lam": s.lam,
            "update_times": [round(float(x), 9) for x in s.update_times],
        }, sort_keys=True))
    return ("\n".join(rows) + "\n").encode()


def write_corpus(corpus: SyntheticCorpus, data_dir: Path) -> list[Path]:
    """Persist records and bodies in the ingest layout plus a ground-truth file."""
    data_dir = Path(data_dir)
    bodies = BodyStore(data_dir / "bodies")
    for digest, body in corpus.store.items():
        bodies.put(digest, body)
    paths = [save_site_record(r, data_dir) for r in corpus.records]
    truth = data_dir / TRUTH_FILE
    truth.write_bytes(truth_lines(corpus))
    return paths + [truth]


def load_truth(data_dir: Path) -> dict[str, float]:
    """True rate per site key from a written synthetic corpus."""
    out = {}
    with open(Path(data_dir) / TRUTH_FILE, encoding="utf-8") as fh:
        for line in fh:
            obj = json.loads(line)
            if obj.get("record") == "site":
                out[obj["site_key"]] = obj["lam"]
    return out

