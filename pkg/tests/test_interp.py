import itertools
import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saecluster.graphcluster import cosine_distance
from saecluster.interp import (ImportanceReport, ZeroImpact, cluster_impacts, explain_cluster,
                               feature_cluster_frequency, feature_impact, important_set,
                               sparsity_distribution, top_percentile_features,
                               write_feature_frequency, write_importance, write_sparsity)
from saecluster.pca import fit_pca, transform
from saecluster.sparsefeat import SummedFeatureVector


def corpus(rng, n=30, dim=40, density=0.3):
    X = rng.exponential(1.0, (n, dim)) * (rng.random((n, dim)) < density)
    X[:, 0] += 0.1  # no empty documents
    return [SummedFeatureVector(f"c{i:02d}:2001", dim, np.flatnonzero(r), r[r != 0])
            for i, r in enumerate(X)]


def dense_impact(members, model, z, sigma):
    """Recompute every patched vector from scratch and sum |d - d^z| / sigma."""
    total = 0.0
    for u, v in itertools.combinations(members, 2):
        base = cosine_distance(transform(model, u).values, transform(model, v).values)
        patched = cosine_distance(transform(model, u.without(z)).values,
                                  transform(model, v.without(z)).values)
        total += abs(base - patched)
    return total / sigma


@pytest.fixture(scope="module")
def setup():
    rng = np.random.default_rng(0)
    vs = corpus(rng)
    return vs, fit_pca(vs, n_components=12)


def test_fast_impacts_match_dense_recomputation(setup):
    vs, model = setup
    rng = np.random.default_rng(1)
    for _ in range(10):
        members = [vs[k] for k in rng.choice(len(vs), size=int(rng.integers(2, 6)), replace=False)]
        sigma = float(rng.uniform(0.1, 2.0))
        impacts, skipped = cluster_impacts(members, model, sigma)
        assert skipped == 0
        for z in rng.choice(sorted(impacts), size=5):
            assert impacts[int(z)] == pytest.approx(dense_impact(members, model, int(z), sigma),
                                                    abs=1e-9)


def test_inactive_features_have_zero_impact(setup):
    vs, model = setup
    members = vs[:3]
    active = set(np.concatenate([v.indices for v in members]).tolist())
    inactive = sorted(set(range(model.dim)) - active)
    assert inactive
    impacts, _ = cluster_impacts(members, model, 1.0, features=inactive)
    assert all(v == 0 for v in impacts.values())
    full, _ = cluster_impacts(members, model, 1.0)
    assert set(full) == active
    assert feature_impact(members, model, inactive[0], 1.0) == 0


def test_two_company_single_shared_feature(setup):
    _, model = setup
    a = SummedFeatureVector("a:2001", model.dim, np.array([5]), np.array([2.0]))
    b = SummedFeatureVector("b:2001", model.dim, np.array([5]), np.array([3.0]))
    assert feature_impact([a, b], model, 5, 0.5) == pytest.approx(
        dense_impact([a, b], model, 5, 0.5), abs=1e-12)


def test_impact_input_checks(setup):
    vs, model = setup
    with pytest.raises(ValueError):
        cluster_impacts(vs[:1], model, 1.0)
    with pytest.raises(ValueError):
        cluster_impacts(vs[:2], model, 0.0)
    with pytest.raises(ValueError):
        cluster_impacts(vs[:2], model, 1.0, features=[model.dim])


@pytest.mark.parametrize("impacts,expected", [
    ({1: 5, 2: 3, 3: 1, 4: 1}, [1]),
    ({1: 3, 2: 3, 3: 2, 4: 2}, [1, 2]),
    ({9: 0.4, 2: 0.0}, [9]),
    ({7: 1.0, 3: 1.0}, [3]),
])
def test_greedy_examples(impacts, expected):
    assert important_set(impacts) == expected


def test_greedy_all_zero_is_an_error():
    with pytest.raises(ZeroImpact):
        important_set({1: 0.0, 2: 0.0})


def min_cardinality(impacts):
    pos = {f: v for f, v in impacts.items() if v > 0}
    total = math.fsum(pos.values())
    for k in range(1, len(pos) + 1):
        for subset in itertools.combinations(pos, k):
            inside = math.fsum(pos[f] for f in subset)
            if inside >= total - inside:
                return k
    raise AssertionError("unreachable")


@settings(max_examples=150, deadline=None)
@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=12))
def test_greedy_is_minimum_cardinality(values):
    impacts = dict(enumerate(values))
    if not any(v > 0 for v in values):
        return
    s = important_set(impacts)
    total = math.fsum(v for v in values if v > 0)
    inside = math.fsum(impacts[f] for f in s)
    assert inside >= total - inside
    shorter = math.fsum(impacts[f] for f in s[:-1])
    assert shorter < total - shorter
    assert len(s) == min_cardinality(impacts)


def report(year, cid, s_star, dim=100, impacts=None):
    impacts = impacts or {f: 1.0 for f in s_star}
    return ImportanceReport(year, cid, ("a", "b"), dim, impacts, list(s_star))


def test_sparsity_and_frequency():
    reps = [report(2001, k, [k]) for k in range(7)]
    summary = sparsity_distribution(reps)
    assert summary.median == pytest.approx(0.01)
    assert summary.histogram["count"].sum() == 7
    reps = [report(2001, k, [1, 2 + k]) for k in range(10)]
    freq = feature_cluster_frequency(reps)
    assert freq[1] == 10 and freq[99] == 0
    assert top_percentile_features(freq, 99)[0] == 1
    with pytest.raises(ValueError):
        sparsity_distribution([])


def test_explain_cluster_and_writers(tmp_path, setup):
    vs, model = setup
    rep = explain_cluster(2001, 0, vs[:4], model, 0.7)
    assert rep.members == tuple(v.doc_id for v in vs[:4])
    assert rep.sparsity_ratio == len(rep.important_set) / model.dim
    assert rep.impact(rep.important_set[0]) == max(rep.impacts.values())
    write_importance([rep], tmp_path / "imp.csv")
    write_sparsity([rep], tmp_path / "sp.csv")
    write_feature_frequency(feature_cluster_frequency([rep]), tmp_path / "ff.csv")
    imp = pd.read_csv(tmp_path / "imp.csv")
    assert list(imp.columns) == ["year", "cluster_id", "feature_id", "impact", "in_s_star"]
    assert imp.in_s_star.sum() == len(rep.important_set)
    sp = pd.read_csv(tmp_path / "sp.csv")
    assert list(sp.columns) == ["year", "cluster_id", "n_active", "s_star_size", "sparsity_ratio"]
    ff = pd.read_csv(tmp_path / "ff.csv")
    assert list(ff.columns) == ["feature_id", "clusters_important_count"]
