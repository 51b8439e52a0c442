import numpy as np
import pytest
from scipy import stats

from hacs.detect import LinkCache, site_accesses, timeline_from_accesses
from hacs.errors import ConfigError
from hacs.evaluation import load_histories, load_histories_from_dir
from hacs.ingest import iter_site_records
from hacs.synth import (
    TRUTH_FILE,
    SynthConfig,
    generate_synthetic_corpus,
    load_truth,
    poisson_times,
    write_corpus,
)

SPAN = 1096.0


class TestConfig:
    @pytest.mark.parametrize(
        "kw",
        [
            dict(n_sites=0),
            dict(span_days=0),
            dict(median_interval=0),
            dict(sigma=-1),
            dict(gap_min=0),
            dict(gap_min=2, gap_max=1),
            dict(rates=()),
            dict(rates=(0.1, -1)),
            dict(start="June"),
            dict(links_shown=0),
        ],
    )
    def test_degenerate(self, kw):
        with pytest.raises(ConfigError):
            SynthConfig(**kw)

    def test_from_dict(self):
        assert SynthConfig.from_dict({"n_sites": 3}).n_sites == 3
        with pytest.raises(ConfigError):
            SynthConfig.from_dict({"sites": 3})

    def test_rates_set_site_count(self):
        assert SynthConfig(rates=[0.1, 0.2]).n_sites == 2


class TestProcess:
    def test_poisson_count_interval(self):
        lam = 1 / 35
        mean = lam * SPAN
        assert mean == pytest.approx(31.314, abs=1e-3)
        lo, hi = stats.poisson.ppf(0.005, mean), stats.poisson.ppf(0.995, mean)
        counts = np.array([len(poisson_times(np.random.default_rng(s), lam, 0.0, SPAN)) for s in range(2000)])
        inside = np.mean((counts >= lo) & (counts <= hi))
        assert inside >= 0.98
        assert counts.mean() == pytest.approx(mean, abs=4 * np.sqrt(mean / len(counts)))

    def test_zero_rate(self):
        corpus = generate_synthetic_corpus(SynthConfig(rates=(0.0,)), seed=3)
        assert len(corpus.sites[0].update_times) == 0
        digests = {c.digest for c in corpus.records[0].captures}
        assert len(digests) == 1

    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_population_median(self, seed):
        corpus = generate_synthetic_corpus(SynthConfig(n_sites=200), seed)
        assert np.median(1 / corpus.rates) == pytest.approx(74.0, rel=0.05)

    def test_unstratified_population_is_lognormal(self):
        cfg = SynthConfig(n_sites=1, stratified=False)
        from hacs.synth import sample_rates

        draws = np.concatenate([sample_rates(np.random.default_rng(s), cfg) for s in range(3000)])
        logs = np.log(1 / draws)
        assert stats.kstest(logs, "norm", args=(np.log(74), 1.5)).pvalue > 0.01

    def test_exponential_gaps(self):
        corpus = generate_synthetic_corpus(SynthConfig(rates=(0.2, 0.5, 1 / 7)), seed=8)
        for site in corpus.sites:
            assert len(site.update_times) >= 100
            gaps = np.diff(site.update_times)
            assert stats.kstest(gaps, "expon", args=(0, 1 / site.lam)).pvalue > 0.01

    def test_access_gaps(self):
        cfg = SynthConfig(rates=(0.1,), gap_min=2, gap_max=5)
        site = generate_synthetic_corpus(cfg, seed=1).sites[0]
        gaps = np.diff(site.access_times)
        assert gaps.min() >= 2 - 1e-5 and gaps.max() <= 5 + 1e-5
        assert site.access_times[-1] - cfg.start_days <= SPAN + 1e-9

    def test_flag_iff_update_in_gap(self):
        corpus = generate_synthetic_corpus(SynthConfig(rates=(0.05, 0.8, 3.0)), seed=4)
        for site, rec in zip(corpus.sites, corpus.records):
            tl = timeline_from_accesses(site_accesses(rec, LinkCache(corpus.store)))
            times = np.array(tl.access_times)
            seen = np.searchsorted(site.update_times, times, side="right")
            expected = [False] + list(np.diff(seen) > 0)
            assert list(tl.update_flags) == expected


class TestOutput:
    def test_byte_identical(self, tmp_path):
        cfg = SynthConfig(n_sites=5)
        for run in ("a", "b"):
            write_corpus(generate_synthetic_corpus(cfg, seed=42), tmp_path / run)
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files == sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)

    def test_seed_changes_output(self):
        a = generate_synthetic_corpus(SynthConfig(n_sites=3), seed=1)
        b = generate_synthetic_corpus(SynthConfig(n_sites=3), seed=2)
        assert a.rates.tolist() != b.rates.tolist()

    def test_site_streams_independent_of_population_size(self):
        a = generate_synthetic_corpus(SynthConfig(rates=(0.1, 0.2)), seed=5)
        b = generate_synthetic_corpus(SynthConfig(rates=(0.1, 0.2, 0.3)), seed=5)
        assert np.array_equal(a.sites[0].update_times, b.sites[0].update_times)

    def test_format_blind(self, tmp_path):
        corpus = generate_synthetic_corpus(SynthConfig(n_sites=4), seed=9)
        write_corpus(corpus, tmp_path)
        assert [r.site_key for r in iter_site_records(tmp_path)] == [r.site_key for r in corpus.records]
        assert load_histories_from_dir(tmp_path) == load_histories(corpus.records, corpus.store)
        truth = load_truth(tmp_path)
        assert truth == {s.site_key: s.lam for s in corpus.sites}
        assert (tmp_path / TRUTH_FILE).exists()
