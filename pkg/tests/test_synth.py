import filecmp

import numpy as np
import pandas as pd
import pytest

from saecluster.cointegration import engle_granger
from saecluster.corpus import CorpusConfig, load_panel
from saecluster.metrics import correlation_matrix
from saecluster.sparsefeat import load_token_activations, sum_documents
from saecluster.synth import SynthConfig, adjusted_rand_index, generate_universe, write_universe

TINY = dict(n_companies=24, n_sectors=3, n_years=3, feature_dim=128, signature_size=8,
            k_per_token=4, n_tokens=16)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(n_companies=3, n_sectors=5)
    with pytest.raises(ValueError):
        SynthConfig(feature_dim=100, signature_size=24, n_sectors=8)
    with pytest.raises(ValueError):
        SynthConfig(signature_noise=1.5)


def test_single_sector_is_one_cluster():
    u = generate_universe(SynthConfig(**{**TINY, "n_sectors": 1}, with_prices=False))
    for y, labels in u.truth.labels.items():
        assert set(labels.values()) == {0} and len(labels) == 24


def test_zero_noise_is_degenerate_within_sector():
    cfg = SynthConfig(**TINY, signature_noise=0.0, idio_vol=0.0, pairs_per_sector=0, seed=3)
    u = generate_universe(cfg)
    panel = u.panels[0]
    for members in u.truth.sector_members(panel.year).values():
        ids = sorted(members)
        dense = np.vstack([panel.summed_features[c].dense() for c in ids])
        np.testing.assert_allclose(dense, np.broadcast_to(dense[0], dense.shape), atol=1e-12)
        rho = correlation_matrix(np.vstack([panel.returns[c] for c in ids]))
        np.testing.assert_allclose(rho, 1.0, atol=1e-9)


def test_signatures_dominate_features():
    u = generate_universe(SynthConfig(**TINY, with_prices=False, seed=4))
    panel = u.panels[0]
    for cid, s in u.truth.labels[panel.year].items():
        v = panel.summed_features[cid]
        on_sig = np.isin(v.indices, sorted(u.truth.signatures[s]))
        assert v.values[on_sig].sum() > v.values[~on_sig].sum()


def test_seeded_output_is_byte_identical(tmp_path):
    cfg = SynthConfig(**TINY, seed=7)
    a = write_universe(generate_universe(cfg, keep_tokens=True), tmp_path / "a", tokens=True)
    b = write_universe(generate_universe(cfg, keep_tokens=True), tmp_path / "b", tokens=True)
    for key in a:
        assert filecmp.cmp(a[key], b[key], shallow=False), key
    c = write_universe(generate_universe(SynthConfig(**{**TINY, "seed": 8})), tmp_path / "c")
    assert not filecmp.cmp(a["features"], c["features"], shallow=False)


def test_written_universe_loads_and_tokens_sum_to_features(tmp_path):
    u = generate_universe(SynthConfig(**TINY, seed=5), keep_tokens=True)
    paths = write_universe(u, tmp_path, tokens=True)
    panels, report = load_panel(paths["features"], paths["returns"], paths["metadata"],
                                CorpusConfig(dim=128))
    assert len(panels) == 3 and report["company_years_loaded"] == 72
    summed = {v.doc_id: v for v in sum_documents(load_token_activations(paths["tokens"], 128))}
    for p in panels:
        for cid, v in p.summed_features.items():
            np.testing.assert_allclose(summed[f"{cid}:{p.year}"].dense(), v.dense(), atol=1e-9)
    gt = pd.read_csv(paths["ground_truth"])
    assert list(gt.columns) == ["year", "company_id", "sector"] and len(gt) == 72
    prices = pd.read_csv(paths["prices"])
    assert list(prices.columns) == ["company_id", "date", "adj_close"]


def test_monthly_returns_aggregate_daily_prices():
    u = generate_universe(SynthConfig(**TINY, seed=6))
    p = u.prices
    month_end = np.log(p.groupby(p.index.to_period("M")).last())
    panel = u.panels[1]
    cid = sorted(panel.returns)[0]
    expect = month_end[cid].diff()[month_end.index.year == panel.year].to_numpy()
    np.testing.assert_allclose(panel.returns[cid], expect, atol=1e-12)


def test_planted_pairs_are_cointegrated_at_long_horizons():
    cfg = SynthConfig(n_companies=60, n_sectors=6, pairs_per_sector=3, start_year=2001,
                      n_years=12, feature_dim=256, signature_size=8, k_per_token=4, n_tokens=8,
                      seed=1)
    u = generate_universe(cfg)
    p = u.prices.iloc[:3000]
    passed = [engle_granger(p[a].to_numpy(), p[b].to_numpy()).is_cointegrated
              for a, b, _, _ in u.truth.pairs]
    assert len(passed) == 18 and np.mean(passed) >= 0.95
    for a, b, sector, beta in u.truth.pairs:
        assert a < b and 0.5 <= beta <= 1.5
        assert u.truth.labels[2001][a] == u.truth.labels[2001][b] == sector


def test_ari_examples():
    labels = {k: k % 3 for k in range(30)}
    assert adjusted_rand_index(labels, labels) == pytest.approx(1.0)
    relabeled = {k: (v + 1) % 3 for k, v in labels.items()}
    assert adjusted_rand_index(labels, relabeled) == pytest.approx(1.0)
    singles = {k: k for k in range(30)}
    one = {k: 0 for k in range(30)}
    assert adjusted_rand_index(singles, one) <= 0
    rng = np.random.default_rng(0)
    vals = [adjusted_rand_index(dict(enumerate(rng.integers(0, 5, 500))),
                                dict(enumerate(rng.integers(0, 5, 500)))) for _ in range(20)]
    assert abs(np.mean(vals)) < 0.05 and max(abs(v) for v in vals) < 0.05
    with pytest.raises(ValueError):
        adjusted_rand_index({1: 0}, {2: 0})


def test_ari_matches_sklearn_when_available():
    metrics = pytest.importorskip("sklearn.metrics")
    rng = np.random.default_rng(1)
    a, b = rng.integers(0, 4, 60), rng.integers(0, 6, 60)
    assert adjusted_rand_index(dict(enumerate(a)), dict(enumerate(b))) == pytest.approx(
        metrics.adjusted_rand_score(a, b), abs=1e-12)
