import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform

from saecluster.graphcluster import (DegenerateGraphError, YearClustering, build_distance_graph,
                                     build_mst, cosine_distance, cut_mst, mst_from_edges,
                                     mst_from_matrix, normalize_distances, partition_from_labels,
                                     read_clusters, standardize, ultrametric_distance,
                                     ultrametric_matrix, write_clusters, write_edges)


def random_weights(rng, n):
    w = rng.normal(size=(n, n))
    w = (w + w.T) / 2
    np.fill_diagonal(w, 0)
    return w


def ids_for(n):
    return [f"c{k:02d}" for k in range(n)]


def brute_force_mst_weight(w):
    n = w.shape[0]
    edges = list(itertools.combinations(range(n), 2))
    best = np.inf
    for subset in itertools.combinations(edges, n - 1):
        parent = list(range(n))

        def find(x):
            while parent[x] != x:
                x = parent[x]
            return x

        ok = True
        for a, b in subset:
            ra, rb = find(a), find(b)
            if ra == rb:
                ok = False
                break
            parent[ra] = rb
        if ok:
            best = min(best, sum(w[a, b] for a, b in subset))
    return best


def test_cosine_distance_examples():
    assert cosine_distance([1, 2], [1, 2]) == pytest.approx(0, abs=1e-15)
    assert cosine_distance([1, 0], [0, 3]) == pytest.approx(1.0)
    assert cosine_distance([1, 0], [1, 1]) == pytest.approx(1 - 1 / np.sqrt(2), abs=1e-12)
    assert cosine_distance([1, 0], [-1, 0]) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        cosine_distance([0, 0], [1, 1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3),
       st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.floats(0.01, 100))
def test_cosine_scale_invariance(a, b, alpha):
    a, b = np.array(a), np.array(b)
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    d = cosine_distance(a, b)
    assert 0 <= d <= 2
    assert cosine_distance(alpha * a, b) == pytest.approx(d, abs=1e-9)


def test_standardize_examples():
    z, mu, sigma = standardize([0.2, 0.4])
    np.testing.assert_allclose(z, [-1, 1])
    assert (mu, sigma) == pytest.approx((0.3, 0.1))
    with pytest.raises(DegenerateGraphError):
        standardize([0.5, 0.5, 0.5])
    rng = np.random.default_rng(0)
    z, _, _ = standardize(rng.random(100))
    assert abs(z.mean()) < 1e-12 and abs(z.std() - 1) < 1e-12


def test_normalized_graph():
    rng = np.random.default_rng(1)
    g = normalize_distances(build_distance_graph(2001, ids_for(6), rng.normal(size=(6, 4))))
    cd = g.edge_values("cd")
    assert abs(cd.mean()) < 1e-12 and abs(cd.std() - 1) < 1e-12
    np.testing.assert_array_equal(g.cd, g.cd.T)
    with pytest.raises(ValueError):
        build_distance_graph(2001, ["a", "a"], rng.normal(size=(2, 3)))


def test_mst_examples():
    assert mst_from_matrix(["A", "B"], np.array([[0, 0.3], [0.3, 0]])).edges == [(0.3, "A", "B")]
    w = np.array([[0, -2, 0.5], [-2, 0, 1], [0.5, 1, 0]])
    mst = mst_from_matrix(["A", "B", "C"], w)
    assert {(a, b) for _, a, b in mst.edges} == {("A", "B"), ("A", "C")}
    assert cut_mst(mst, 0).as_sets() == {frozenset("AB"), frozenset("C")}
    assert ultrametric_distance(mst, "A", "C") == 0.5
    assert ultrametric_distance(mst, "B", "C") == 0.5
    assert ultrametric_distance(mst, "A", "B") == -2
    with pytest.raises(KeyError):
        ultrametric_distance(mst, "A", "Z")


def test_mst_tie_break_is_lexicographic():
    w = np.ones((3, 3))
    np.fill_diagonal(w, 0)
    mst = mst_from_matrix(["b", "a", "c"], w)
    assert [(a, b) for _, a, b in mst.edges] == [("a", "b"), ("a", "c")]
    via_edges = mst_from_edges(["b", "a", "c"], [("c", "b", 1.0), ("b", "a", 1.0), ("a", "c", 1.0)])
    assert via_edges.edges == mst.edges


@pytest.mark.parametrize("seed", range(15))
def test_mst_matches_exhaustive_minimum(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 8))
    w = random_weights(rng, n)
    mst = mst_from_matrix(ids_for(n), w)
    assert len(mst.edges) == n - 1
    assert mst.total_weight == pytest.approx(brute_force_mst_weight(w), abs=1e-12)


def test_cut_extremes():
    rng = np.random.default_rng(2)
    w = random_weights(rng, 7)
    mst = mst_from_matrix(ids_for(7), w)
    weights = [e[0] for e in mst.edges]
    assert len(cut_mst(mst, max(weights))) == 1
    assert len(cut_mst(mst, min(weights) - 1e-9)) == 7


@pytest.mark.parametrize("seed", range(20))
def test_cut_equals_ultrametric_and_single_linkage(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 25))
    w = random_weights(rng, n)
    ids = ids_for(n)
    mst = mst_from_matrix(ids, w)
    u = ultrametric_matrix(mst)
    # single linkage on a shifted (non-negative) copy with the same merge order
    shift = w.min() - 1
    Z = linkage(squareform(w - shift, checks=False), method="single")
    for theta in np.quantile([e[0] for e in mst.edges], [0, 0.3, 0.6, 1.0]).tolist() + [-5.0]:
        cut = cut_mst(mst, theta).as_sets()
        by_ultra = partition_from_labels(
            {ids[i]: min(j for j in range(n) if i == j or u[i, j] <= theta) for i in range(n)})
        labels = fcluster(Z, theta - shift, criterion="distance")
        by_scipy = partition_from_labels(dict(zip(ids, labels)))
        assert cut == by_ultra == by_scipy


@pytest.mark.parametrize("seed", range(10))
def test_ultrametric_inequality_and_monotone_cuts(seed):
    rng = np.random.default_rng(100 + seed)
    n = 9
    mst = mst_from_matrix(ids_for(n), random_weights(rng, n))
    u = ultrametric_matrix(mst)
    for i, j, k in itertools.permutations(range(n), 3):
        assert u[i, j] <= max(u[i, k], u[k, j]) + 1e-15
    ids = ids_for(n)
    assert u[0, 3] == ultrametric_distance(mst, ids[0], ids[3])
    fine, coarse = cut_mst(mst, -0.3), cut_mst(mst, 0.4)
    for c in fine.clusters:
        assert sum(c <= d for d in coarse.clusters) == 1


def test_build_mst_requires_normalized_graph():
    rng = np.random.default_rng(3)
    g = build_distance_graph(2001, ids_for(4), rng.normal(size=(4, 3)))
    with pytest.raises(ValueError):
        build_mst(g)
    mst = build_mst(normalize_distances(g))
    assert mst.year == 2001 and len(mst.edges) == 3


def test_year_clustering_invariants():
    with pytest.raises(ValueError):
        YearClustering(2001, (frozenset("ab"), frozenset("bc")), "CD")
    with pytest.raises(ValueError):
        YearClustering(2001, (frozenset(),), "CD")
    yc = YearClustering(2001, (frozenset("cd"), frozenset("ab")), "CD", -1.0)
    assert yc.clusters[0] == frozenset("ab") and yc.labels()["d"] == 1


def test_cluster_and_edge_files(tmp_path):
    ycs = [YearClustering(2001, (frozenset(["a", "b"]), frozenset(["c"])), "CD", -1.0),
           YearClustering(2002, (frozenset(["a", "b", "c"]),), "CD", -1.0)]
    path = tmp_path / "c.csv"
    write_clusters(ycs, path)
    back = read_clusters(path, "CD")
    assert {y: c.as_sets() for y, c in back.items()} == {c.year: c.as_sets() for c in ycs}
    rng = np.random.default_rng(4)
    g = normalize_distances(build_distance_graph(2001, ["z", "y", "x"], rng.normal(size=(3, 3))))
    epath = tmp_path / "e.csv"
    write_edges(g, epath)
    write_edges(g, epath)
    import pandas as pd
    df = pd.read_csv(epath)
    assert list(df.columns) == ["year", "id_a", "id_b", "d_cos", "cd"] and len(df) == 6
    assert (df.id_a < df.id_b).all()
