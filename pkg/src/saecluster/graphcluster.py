"""Cosine-distance graphs, minimum spanning trees and threshold cuts.

Edge weights are per-year z-scores of the cosine distance between PCA vectors.
Cutting the MST at ``theta`` is the same partition as a single-linkage
dendrogram cut at height ``theta``; :func:`ultrametric_distance` exposes the
merge height for checks.
"""

from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd


class DegenerateGraphError(ValueError):
    pass


@dataclass(frozen=True)
class YearClustering:
    """A partition of (some of) one year's companies.

    ``theta`` is ``None`` for code-based or externally supplied partitions.
    """

    year: int
    clusters: tuple[frozenset, ...]
    method: str
    theta: float | None = None

    def __post_init__(self):
        cl = tuple(frozenset(c) for c in self.clusters)
        if any(len(c) == 0 for c in cl):
            raise ValueError("empty cluster")
        seen: set = set()
        for c in cl:
            if seen & c:
                raise ValueError(f"clusters overlap in year {self.year}")
            seen |= c
        # canonical order: by smallest member id
        cl = tuple(sorted(cl, key=lambda c: min(c)))
        object.__setattr__(self, "clusters", cl)

    @property
    def companies(self) -> frozenset:
        return frozenset().union(*self.clusters) if self.clusters else frozenset()

    def labels(self) -> dict:
        return {cid: k for k, c in enumerate(self.clusters) for cid in c}

    def as_sets(self) -> set[frozenset]:
        return set(self.clusters)

    def __len__(self):
        return len(self.clusters)


@dataclass
class DistanceGraph:
    """Complete same-year graph; distances stored as dense symmetric matrices."""

    year: int
    ids: list[str]
    d_cos: np.ndarray
    cd: np.ndarray | None = None
    mu: float | None = None
    sigma: float | None = None

    @property
    def n(self) -> int:
        return len(self.ids)

    def edge_values(self, which: str = "d_cos") -> np.ndarray:
        mat = self.d_cos if which == "d_cos" else self.cd
        iu = np.triu_indices(self.n, k=1)
        return mat[iu]


@dataclass
class MstForest:
    year: int
    ids: list[str]
    # (weight, id_a, id_b) with id_a < id_b, in the order Kruskal accepted them
    edges: list[tuple[float, str, str]] = field(default_factory=list)

    @property
    def total_weight(self) -> float:
        return float(sum(w for w, _, _ in self.edges))

    def adjacency(self) -> dict[str, list[tuple[str, float]]]:
        adj: dict[str, list[tuple[str, float]]] = {i: [] for i in self.ids}
        for w, a, b in self.edges:
            adj[a].append((b, w))
            adj[b].append((a, w))
        return adj


def cosine_distance(g_i, g_j) -> float:
    """``1 - cos(g_i, g_j)``, clipped into ``[0, 2]``."""
    a = np.asarray(g_i, dtype=float)
    b = np.asarray(g_j, dtype=float)
    if a.shape != b.shape:
        raise ValueError("vectors differ in length")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine distance undefined for a zero-norm vector")
    return float(np.clip(1.0 - a.dot(b) / (na * nb), 0.0, 2.0))


def cosine_distance_matrix(vectors: np.ndarray) -> np.ndarray:
    g = np.asarray(vectors, dtype=float)
    norms = np.linalg.norm(g, axis=1)
    if np.any(norms == 0):
        raise ValueError("cosine distance undefined for a zero-norm vector")
    gn = g / norms[:, None]
    d = np.clip(1.0 - gn @ gn.T, 0.0, 2.0)
    np.fill_diagonal(d, 0.0)
    return d


def standardize(values) -> tuple[np.ndarray, float, float]:
    """Population z-scores; returns ``(z, mean, std)``."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise DegenerateGraphError("need at least two edges to standardize")
    mu = float(v.mean())
    sigma = float(v.std())
    if not sigma > 0:
        raise DegenerateGraphError("edge distances have zero variance")
    return (v - mu) / sigma, mu, sigma


def build_distance_graph(year: int, ids: Sequence[str], vectors: np.ndarray) -> DistanceGraph:
    if len(ids) != len(vectors):
        raise ValueError("ids and vectors differ in length")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate ids in graph")
    return DistanceGraph(year, list(ids), cosine_distance_matrix(vectors))


def normalize_distances(graph: DistanceGraph) -> DistanceGraph:
    """Attach per-year standardized weights ``CD = (d_cos - mu) / sigma``."""
    _, mu, sigma = standardize(graph.edge_values("d_cos"))
    graph.cd = (graph.d_cos - mu) / sigma
    np.fill_diagonal(graph.cd, 0.0)
    graph.mu, graph.sigma = mu, sigma
    return graph


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        return True


def mst_from_matrix(ids: Sequence[str], weights: np.ndarray, year: int = 0) -> MstForest:
    """Kruskal over the complete graph; ties broken by (weight, min id, max id)."""
    ids = list(ids)
    n = len(ids)
    if n == 0:
        return MstForest(year, ids, [])
    iu, ju = np.triu_indices(n, k=1)
    w = np.asarray(weights, dtype=float)[iu, ju]
    if not np.all(np.isfinite(w)):
        raise ValueError("non-finite edge weight")
    lo = np.array([min(ids[a], ids[b]) for a, b in zip(iu, ju)], dtype=object)
    hi = np.array([max(ids[a], ids[b]) for a, b in zip(iu, ju)], dtype=object)
    order = sorted(range(w.size), key=lambda k: (w[k], lo[k], hi[k]))
    uf = _UnionFind(n)
    edges = []
    for k in order:
        if uf.union(int(iu[k]), int(ju[k])):
            edges.append((float(w[k]), lo[k], hi[k]))
            if len(edges) == n - 1:
                break
    return MstForest(year, ids, edges)


def mst_from_edges(ids: Sequence[str], edges: Iterable[tuple[str, str, float]],
                   year: int = 0) -> MstForest:
    """Kruskal on an explicit edge list (must connect all ``ids``)."""
    ids = list(ids)
    pos = {c: k for k, c in enumerate(ids)}
    canon = sorted((float(w), min(a, b), max(a, b)) for a, b, w in edges)
    uf = _UnionFind(len(ids))
    out = []
    for w, a, b in canon:
        if uf.union(pos[a], pos[b]):
            out.append((w, a, b))
    if len(ids) and len(out) != len(ids) - 1:
        raise DegenerateGraphError("edge list does not connect all nodes")
    return MstForest(year, ids, out)


def build_mst(graph: DistanceGraph) -> MstForest:
    if graph.cd is None:
        raise ValueError("graph must be normalized before building the MST")
    return mst_from_matrix(graph.ids, graph.cd, graph.year)


def cut_mst(mst: MstForest, theta: float, method: str = "CD") -> YearClustering:
    """Connected components after removing every MST edge heavier than ``theta``."""
    pos = {c: k for k, c in enumerate(mst.ids)}
    uf = _UnionFind(len(mst.ids))
    for w, a, b in mst.edges:
        if w <= theta:
            uf.union(pos[a], pos[b])
    groups: dict[int, set] = defaultdict(set)
    for c, k in pos.items():
        groups[uf.find(k)].add(c)
    return YearClustering(mst.year, tuple(frozenset(g) for g in groups.values()), method, theta)


def ultrametric_distance(mst: MstForest, i: str, j: str) -> float:
    """Largest edge weight on the unique tree path between ``i`` and ``j``."""
    adj = mst.adjacency()
    if i not in adj or j not in adj:
        raise KeyError(f"unknown node {i if i not in adj else j!r}")
    if i == j:
        raise ValueError("ultrametric distance needs two distinct nodes")
    best = {i: -np.inf}
    queue = deque([i])
    while queue:
        u = queue.popleft()
        if u == j:
            return float(best[u])
        for v, w in adj[u]:
            if v not in best:
                best[v] = max(best[u], w)
                queue.append(v)
    raise DegenerateGraphError(f"{i!r} and {j!r} are not connected")


def ultrametric_matrix(mst: MstForest) -> np.ndarray:
    """All-pairs merge heights (diagonal 0) in ``mst.ids`` order."""
    n = len(mst.ids)
    pos = {c: k for k, c in enumerate(mst.ids)}
    adj = mst.adjacency()
    out = np.zeros((n, n))
    for src in mst.ids:
        s = pos[src]
        best = {src: -np.inf}
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v, w in adj[u]:
                if v not in best:
                    best[v] = max(best[u], w)
                    out[s, pos[v]] = best[v]
                    queue.append(v)
    return out


def write_clusters(clusterings: Iterable[YearClustering], path: str | Path) -> None:
    """``year,cluster_id,company_id``; cluster ids follow the canonical order."""
    rows = []
    for yc in sorted(clusterings, key=lambda c: c.year):
        for k, members in enumerate(yc.clusters):
            rows.extend((yc.year, k, cid) for cid in sorted(members))
    pd.DataFrame(rows, columns=["year", "cluster_id", "company_id"]).to_csv(path, index=False)


def read_clusters(path: str | Path, method: str = "external") -> dict[int, YearClustering]:
    df = pd.read_csv(path, dtype={"company_id": str, "cluster_id": str})
    missing = {"year", "cluster_id", "company_id"} - set(df.columns)
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    out = {}
    for year, g in df.groupby("year", sort=True):
        if g["company_id"].duplicated().any():
            dup = g.loc[g["company_id"].duplicated(), "company_id"].iloc[0]
            raise ValueError(f"{path}: company {dup} assigned twice in {year}")
        clusters = tuple(frozenset(m["company_id"]) for _, m in g.groupby("cluster_id", sort=True))
        out[int(year)] = YearClustering(int(year), clusters, method)
    return out


def write_edges(graph: DistanceGraph, path: str | Path) -> None:
    """Audit dump ``year,id_a,id_b,d_cos,cd`` for one year's complete graph."""
    iu, ju = np.triu_indices(graph.n, k=1)
    ids = np.array(graph.ids, dtype=object)
    a, b = ids[iu], ids[ju]
    swap = a > b
    a, b = np.where(swap, b, a), np.where(swap, a, b)
    cd = graph.cd[iu, ju] if graph.cd is not None else np.full(iu.size, np.nan)
    df = pd.DataFrame({"year": graph.year, "id_a": a, "id_b": b,
                       "d_cos": graph.d_cos[iu, ju], "cd": cd})
    header = not Path(path).exists()
    df.to_csv(path, index=False, mode="a", header=header, float_format="%.17g")


def partition_from_labels(labels: Mapping) -> set[frozenset]:
    groups: dict = defaultdict(set)
    for k, v in labels.items():
        groups[v].add(k)
    return {frozenset(g) for g in groups.values()}
