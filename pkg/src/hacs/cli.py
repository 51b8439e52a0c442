"""Command-line entry point: ``hacs {ingest,detect,schedule,evaluate,synth}``.

Settings resolve in order: built-in defaults, a JSON ``--config`` file,
``HACS_*`` environment variables, then command-line flags.  Every run
writes a manifest holding the resolved settings and digests of its inputs
and outputs.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .detect import LEVELS, LinkCache, site_accesses, timeline_from_accesses, timeline_summary
from .errors import ConfigError, EstimationError, HacsError
from .evaluation import (
    DIST_FIELDS,
    ORACLE,
    RANK_FIELDS,
    SUMMARY_FIELDS,
    SWEEP_FIELDS,
    coverage,
    distribution_rows,
    interval_distribution,
    load_histories_from_dir,
    make_t_grid,
    simulate_crawl_task,
    to_csv,
)
from .ingest import (
    DEFAULT_ENDPOINT,
    DEFAULT_MAX_DEPTH,
    DEFAULT_REPLAY,
    ArchiveClient,
    BodyStore,
    filter_tilde_homepages,
    ingest_site,
    iter_site_records,
    load_site_record,
    save_site_record,
    site_filename,
)
from .model import estimate_interpolated, estimate_mle
from .scheduler import (
    BRUTE_FORCE,
    HACS,
    LAST_OBS,
    POLICIES,
    RANDOM,
    THETA_GRID,
    PredictionInput,
    brute_force_plan,
    hacs_plan,
    last_obs_plan,
    random_plan,
    score,
)
from .synth import SynthConfig, generate_synthetic_corpus, write_corpus
from .timeutil import EVALUATION_WINDOW, Window, parse_date, to_days

log = logging.getLogger("hacs")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

ENV = {
    "data_dir": "HACS_DATA_DIR",
    "endpoint": "HACS_ENDPOINT",
    "replay": "HACS_REPLAY",
    "seed": "HACS_SEED",
    "workers": "HACS_WORKERS",
}


@dataclass
class RunConfig:
    command: str = ""
    data_dir: str = "data"
    out_dir: Optional[str] = None
    endpoint: str = DEFAULT_ENDPOINT
    replay: str = DEFAULT_REPLAY
    window_start: str = EVALUATION_WINDOW.start.date().isoformat()
    window_end: str = EVALUATION_WINDOW.end.date().isoformat()
    level: str = "homepage"
    w: float = 1.0
    ws: list = field(default_factory=lambda: [1.0])
    e: float = 7.0
    theta: float = 0.5
    theta_grid: list = field(default_factory=lambda: list(THETA_GRID))
    policy: str = HACS
    policies: list = field(default_factory=lambda: [HACS, RANDOM, BRUTE_FORCE])
    ranking_policies: list = field(default_factory=lambda: [HACS, LAST_OBS, RANDOM])
    oracle: bool = False
    evaluations: list = field(default_factory=lambda: ["1", "2"])
    distribution: bool = False
    t: Optional[str] = None
    seed: int = 0
    workers: int = 1
    seeds_file: Optional[str] = None
    max_depth: int = DEFAULT_MAX_DEPTH
    delay: float = 1.0
    retries: int = 3
    synth: dict = field(default_factory=dict)

    @property
    def window(self) -> Window:
        try:
            return Window.parse(self.window_start, self.window_end)
        except ValueError as exc:
            raise ConfigError(f"bad window: {exc}") from exc

    @property
    def output_dir(self) -> Path:
        return Path(self.out_dir) if self.out_dir else Path(self.data_dir)

    def validate(self) -> None:
        if self.level not in LEVELS:
            raise ConfigError(f"level must be one of {LEVELS}")
        if self.e < 0:
            raise ConfigError("e must be non-negative")
        if self.w <= 0 or any(x <= 0 for x in self.ws):
            raise ConfigError("history sizes must be positive")
        if not 0.0 <= self.theta <= 1.0 or any(not 0.0 <= x <= 1.0 for x in self.theta_grid):
            raise ConfigError("thresholds must lie in [0, 1]")
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}")
        bad = set(self.policies) - {HACS, RANDOM, BRUTE_FORCE}
        if bad:
            raise ConfigError(f"no threshold sweep for {sorted(bad)}")
        bad = set(self.ranking_policies) - {HACS, LAST_OBS, RANDOM}
        if bad:
            raise ConfigError(f"no ranking for {sorted(bad)}")
        if set(self.evaluations) - {"1", "2"}:
            raise ConfigError("evaluations are '1' and/or '2'")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        self.window  # noqa: B018 - parse for errors


def _parse_list(text: str, cast=str) -> list:
    items = [x.strip() for x in str(text).split(",") if x.strip()]
    try:
        return [cast(x) for x in items]
    except ValueError as exc:
        raise ConfigError(f"bad list {text!r}: {exc}") from exc


def parse_theta_grid(text: str) -> list[float]:
    """``start:stop:step`` (inclusive) or a comma list."""
    if ":" in text:
        try:
            start, stop, step = (float(x) for x in text.split(":"))
        except ValueError as exc:
            raise ConfigError(f"bad theta grid {text!r}") from exc
        if step <= 0 or stop < start:
            raise ConfigError(f"bad theta grid {text!r}")
        n = int(round((stop - start) / step))
        return [round(start + i * step, 10) for i in range(n + 1)]
    return _parse_list(text, float)


_CASTS = {"seed": int, "workers": int}


def resolve(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig(command=args.command)
    names = {f.name for f in fields(RunConfig)}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key, value in data.items():
            setattr(cfg, key, value)
    for key, var in ENV.items():
        if var in os.environ:
            value = os.environ[var]
            try:
                setattr(cfg, key, _CASTS.get(key, str)(value))
            except ValueError as exc:
                raise ConfigError(f"{var}={value!r}: {exc}") from exc
    for key, value in vars(args).items():
        if key in names and key != "command" and value is not None:
            setattr(cfg, key, value)
    cfg.validate()
    return cfg


# ------------------------------------------------------------------ manifest


def _digest_files(paths: Sequence[Path], root: Path) -> dict[str, str]:
    out = {}
    for p in sorted(paths):
        out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def _site_files(data_dir: Path) -> list[Path]:
    return sorted((data_dir / "sites").glob("*.jsonl"))


def _corpus_digest(data_dir: Path) -> str:
    h = hashlib.sha256()
    for p in _site_files(data_dir):
        h.update(p.name.encode() + b"\0" + hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


def write_manifest(cfg: RunConfig, inputs: dict, outputs: Sequence[Path], root: Path, extra: Optional[dict] = None) -> Path:
    manifest = {
        "tool": "hacs",
        "version": __version__,
        "config": asdict(cfg),
        "inputs": inputs,
        "outputs": _digest_files(outputs, root),
    }
    if extra:
        manifest["result"] = extra
    path = root / f"manifest-{cfg.command}.json"
    root.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _seed_file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ------------------------------------------------------------------ commands


def cmd_ingest(cfg: RunConfig) -> int:
    if not cfg.seeds_file:
        raise ConfigError("ingest needs --seeds FILE")
    seeds_path = Path(cfg.seeds_file)
    try:
        lines = seeds_path.read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read seeds: {exc}") from exc
    urls = [x.strip() for x in lines if x.strip() and not x.lstrip().startswith("#")]
    seeds = filter_tilde_homepages(urls)
    # the same site can be listed more than once
    unique = list({s.site_key: s for s in seeds}.values())
    data_dir = Path(cfg.data_dir)
    store = BodyStore(data_dir / "bodies")
    client = ArchiveClient(cfg.endpoint, cfg.replay, delay=cfg.delay, retries=cfg.retries)
    window = cfg.window

    def run(seed):
        path = data_dir / "sites" / site_filename(seed.site_key)
        previous = None
        if path.exists():
            try:
                previous = load_site_record(path)
            except ValueError as exc:
                log.warning("ignoring unreadable earlier record: %s", exc)
        rec = ingest_site(seed, window, client, store, cfg.max_depth, previous)
        save_site_record(rec, data_dir)
        return rec

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        records = list(pool.map(run, unique))

    archived = unreachable = kept = 0
    for rec in records:
        index = next((x for x in rec.fetch_log if x.get("step") == "index"), {})
        if index.get("outcome") == "ok":
            archived += 1
        elif index.get("outcome") == "error":
            unreachable += 1
            log.error("%s: %s", rec.site_key, index.get("detail"))
        if rec.captures and not rec.dropped:
            kept += 1
    rate = 100.0 * archived / len(unique) if unique else 0.0
    summary = dict(seeds=len(urls), tilde_homepages=len(unique), archived=archived,
                   archival_rate_percent=round(rate, 2), kept=kept, unreachable=unreachable)
    print(f"seeds {len(urls)}, tilde homepages {len(unique)}, archived {archived} ({rate:.2f}%), "
          f"kept {kept}, unreachable {unreachable}")
    write_manifest(cfg, {"seeds_file": _seed_file_digest(seeds_path)},
                   [data_dir / "sites" / p.name for p in _site_files(data_dir)], data_dir, summary)
    return EXIT_RUNTIME if unreachable else EXIT_OK


def cmd_detect(cfg: RunConfig) -> int:
    data_dir = Path(cfg.data_dir)
    links = LinkCache(BodyStore(data_dir / "bodies"))
    out_dir = cfg.output_dir
    rows = []
    for rec in iter_site_records(data_dir):
        if rec.dropped:
            continue
        tl = timeline_from_accesses(site_accesses(rec, links, cfg.level))
        row = timeline_summary(rec.site_key, cfg.level, tl)
        if tl.sufficient:
            try:
                row["lam_observed"] = estimate_mle(tl.observed).lam
            except EstimationError as exc:
                log.warning("%s: %s", rec.site_key, exc)
                row["lam_observed"] = None
            row["lam_interpolated"] = estimate_interpolated(tl.interpolated).lam
        rows.append(row)
    if not rows:
        log.warning("no site records under %s", data_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"timelines-{cfg.level}.jsonl"
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    print(f"{len(rows)} timelines ({sum(r['sufficient'] for r in rows)} with at least 2 accesses) -> {path}")
    write_manifest(cfg, {"corpus": _corpus_digest(data_dir)}, [path], out_dir)
    return EXIT_OK


def _reference_time(cfg: RunConfig, lo: float, hi: float) -> float:
    if cfg.t is None:
        return hi
    try:
        return float(cfg.t)
    except ValueError:
        pass
    try:
        return to_days(parse_date(cfg.t))
    except ValueError as exc:
        raise ConfigError(f"bad reference time {cfg.t!r}") from exc


def cmd_schedule(cfg: RunConfig) -> int:
    data_dir = Path(cfg.data_dir)
    histories = load_histories_from_dir(data_dir, cfg.level)
    out_dir = cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    if histories:
        t = _reference_time(cfg, *coverage(histories))
    else:
        t = _reference_time(cfg, 0.0, 0.0)
    inputs = [PredictionInput.from_history(h.site_key, h.accesses, cfg.w, t, cfg.e, h.times) for h in histories]
    cands = score(inputs)
    if cfg.policy == HACS:
        plan = hacs_plan(cands, cfg.theta, t, cfg.e, cfg.w)
    elif cfg.policy == RANDOM:
        plan = random_plan(cands, cfg.theta, np.random.default_rng(cfg.seed), t, cfg.e, cfg.w)
    elif cfg.policy == BRUTE_FORCE:
        plan = brute_force_plan(cands, t, cfg.e, cfg.w, cfg.theta)
    else:
        plan = last_obs_plan(cands, t, cfg.e, cfg.w)
    if not cands:
        log.warning("no site has at least 2 accesses in [t - %s weeks, t]; plan is empty", cfg.w)
    plan_path = out_dir / f"plan-{cfg.policy}.jsonl"
    urls_path = out_dir / f"urls-{cfg.policy}.txt"
    plan_path.write_text(plan.to_jsonl())
    urls_path.write_text(plan.url_list())
    if cfg.policy == LAST_OBS:
        print(f"{cfg.policy}: ranked {len(plan.entries)} URLs at t={t:.6f}")
    else:
        print(f"{cfg.policy}: selected {len(plan.selected)} of {len(plan.entries)} URLs at theta={cfg.theta}, t={t:.6f}")
    write_manifest(cfg, {"corpus": _corpus_digest(data_dir)}, [plan_path, urls_path], out_dir,
                   {"t": t, "candidates": len(plan.entries), "selected": len(plan.selected)})
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    data_dir = Path(cfg.data_dir)
    histories = load_histories_from_dir(data_dir, cfg.level)
    if not histories:
        raise ConfigError(f"no usable site records under {data_dir}")
    window = cfg.window
    lo, hi = coverage(histories)
    w_max = max(cfg.ws)
    start, end = window.start_days, window.end_days
    t_grid = make_t_grid(start, end, w_max, cfg.e)
    if t_grid[0] - 7.0 * w_max < lo - 1e-9:
        raise ConfigError(f"window_start {cfg.window_start} precedes the earliest capture (day {lo:.3f})")
    if t_grid[-1] + cfg.e > hi + 1e-9:
        raise ConfigError(f"window_end {cfg.window_end}: last reference instant needs data to day "
                          f"{t_grid[-1] + cfg.e:.3f}, latest capture is day {hi:.3f}")
    sel = list(cfg.policies) + ([ORACLE] if cfg.oracle else []) if "1" in cfg.evaluations else []
    rank = list(cfg.ranking_policies) + ([ORACLE] if cfg.oracle else []) if "2" in cfg.evaluations else []
    report = simulate_crawl_task(histories, tuple(float(w) for w in cfg.ws), cfg.e, tuple(cfg.theta_grid), t_grid,
                                 tuple(sel), tuple(rank), cfg.seed, cfg.level, workers=cfg.workers)
    out_dir = cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []

    def emit(name, text):
        path = out_dir / name
        path.write_text(text)
        outputs.append(path)

    if sel:
        emit(f"eval1-{cfg.level}.csv", to_csv(report.sweep_rows(), SWEEP_FIELDS))
        emit(f"theta-hat-{cfg.level}.csv", to_csv(report.summary_rows(), SUMMARY_FIELDS))
        for row in report.summary_rows():
            if row["averaging"] == "micro":
                print(f"w={row['w']:g} {row['policy']:<12} theta_hat={row['theta_hat']:.2f} "
                      f"P={row['P']:.3f} R={row['R']:.3f} F1={row['F1']:.3f}")
    if rank:
        emit(f"eval2-{cfg.level}.csv", to_csv(report.rank_rows(), RANK_FIELDS))
        for row in report.rank_rows():
            print(f"w={row['w']:g} {row['policy']:<12} mean weighted P@K={row['mean_weighted_p_at_k']:.3f}")
    if cfg.distribution:
        emit(f"distribution-{cfg.level}.csv", to_csv(distribution_rows(interval_distribution(histories)), DIST_FIELDS))
    write_manifest(cfg, {"corpus": _corpus_digest(data_dir)}, outputs, out_dir,
                   {"t_grid": [t_grid[0], t_grid[-1], len(t_grid)], "skipped_cells": report.skipped})
    return EXIT_OK


def cmd_synth(cfg: RunConfig) -> int:
    data_dir = Path(cfg.data_dir)
    synth = SynthConfig.from_dict(dict(cfg.synth))
    corpus = generate_synthetic_corpus(synth, cfg.seed)
    paths = write_corpus(corpus, data_dir)
    median = float(np.median(1.0 / corpus.rates[corpus.rates > 0])) if (corpus.rates > 0).any() else float("inf")
    print(f"{len(corpus.sites)} synthetic sites, median 1/lambda {median:.2f} days, "
          f"{sum(len(r.captures) for r in corpus.records)} captures -> {data_dir}")
    write_manifest(cfg, {}, paths, data_dir, {"median_interval": median})
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "detect": cmd_detect,
    "schedule": cmd_schedule,
    "evaluate": cmd_evaluate,
    "synth": cmd_synth,
}


# ------------------------------------------------------------------ parser


class _SynthAction(argparse.Action):
    """Collect ``--n-sites`` style options into the ``synth`` mapping."""

    def __call__(self, parser, namespace, values, option_string=None):
        current = dict(getattr(namespace, "synth_overrides", None) or {})
        current[self.dest] = values
        namespace.synth_overrides = current


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of settings")
    common.add_argument("--data-dir", dest="data_dir", help="corpus directory (env HACS_DATA_DIR)")
    common.add_argument("--out-dir", dest="out_dir", help="where reports go (default: data dir)")
    common.add_argument("--seed", type=int, help="root RNG seed (env HACS_SEED)")
    common.add_argument("--workers", type=int, help="parallel workers (env HACS_WORKERS)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    window = argparse.ArgumentParser(add_help=False)
    window.add_argument("--window-start", dest="window_start", help="ISO date, default 2015-06-01")
    window.add_argument("--window-end", dest="window_end", help="ISO date, default 2018-06-01")

    level = argparse.ArgumentParser(add_help=False)
    level.add_argument("--level", choices=LEVELS)
    level.add_argument("--e", type=float, help="evaluation interval in days (default 7)")

    parser = argparse.ArgumentParser(prog="hacs", description="History-aware crawl scheduling for tilde homepages.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common, window], help="fetch and clean archived captures")
    p.add_argument("--seeds", dest="seeds_file", help="file with one seed URL per line")
    p.add_argument("--endpoint", help="CDX index URL (env HACS_ENDPOINT)")
    p.add_argument("--replay", help="replay base URL (env HACS_REPLAY)")
    p.add_argument("--max-depth", dest="max_depth", type=int)
    p.add_argument("--delay", type=float, help="seconds between requests to one host")
    p.add_argument("--retries", type=int)

    p = sub.add_parser("detect", parents=[common, level], help="write per-site update timelines")

    p = sub.add_parser("schedule", parents=[common, level], help="build a crawl plan at one instant")
    p.add_argument("--t", help="reference instant: ISO date or days since epoch (default: latest capture)")
    p.add_argument("--w", type=float, help="history size in weeks")
    p.add_argument("--theta", type=float)
    p.add_argument("--policy", choices=POLICIES)

    p = sub.add_parser("evaluate", parents=[common, window, level], help="run the offline evaluations")
    p.add_argument("--ws", type=lambda s: _parse_list(s, float), help="history sizes, e.g. 1,2,3")
    p.add_argument("--theta-grid", dest="theta_grid", type=parse_theta_grid, help="start:stop:step or list")
    p.add_argument("--policies", type=_parse_list, help="threshold policies to sweep")
    p.add_argument("--ranking-policies", dest="ranking_policies", type=_parse_list)
    p.add_argument("--eval", dest="evaluations", type=_parse_list, help="1, 2 or 1,2")
    p.add_argument("--oracle", action="store_const", const=True, help="add the perfect-knowledge self-test policy")
    p.add_argument("--distribution", action="store_const", const=True, help="also write interval distributions")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--n-sites", dest="n_sites", type=int, action=_SynthAction)
    p.add_argument("--median-interval", dest="median_interval", type=float, action=_SynthAction)
    p.add_argument("--sigma", type=float, action=_SynthAction)
    p.add_argument("--start", action=_SynthAction)
    p.add_argument("--span-days", dest="span_days", type=float, action=_SynthAction)
    p.add_argument("--gap-min", dest="gap_min", type=float, action=_SynthAction)
    p.add_argument("--gap-max", dest="gap_max", type=float, action=_SynthAction)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        overrides = getattr(args, "synth_overrides", None)
        if overrides:
            cfg.synth = {**cfg.synth, **overrides}
        return COMMANDS[cfg.command](cfg)
    except ConfigError as exc:
        print(f"hacs: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (HacsError, OSError) as exc:
        print(f"hacs: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
