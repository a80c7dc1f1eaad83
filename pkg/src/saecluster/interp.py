"""Activation-patching feature importance and the greedy important set per cluster.

Zeroing feature ``z`` in a raw vector moves its projection by
``-x_z * components[:, z]``. For a cluster with projections ``g`` (m x k) the
patched Gram matrix is therefore a rank-2 update of ``g @ g.T``, which lets
every active feature be scored in one vectorized pass.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .pca import PcaModel, transform_many
from .sparsefeat import SummedFeatureVector

log = logging.getLogger(__name__)


class ZeroImpact(ValueError):
    """Raised when no feature has a positive impact on the cluster."""


@dataclass
class ImportanceReport:
    year: int
    cluster_id: int
    members: tuple[str, ...]
    dim: int
    impacts: dict[int, float]
    important_set: list[int] = field(default_factory=list)
    skipped_pairs: int = 0

    @property
    def n_active(self) -> int:
        return len(self.impacts)

    @property
    def sparsity_ratio(self) -> float:
        return len(self.important_set) / self.dim

    def impact(self, feature_id: int) -> float:
        return self.impacts.get(feature_id, 0.0)


def _pair_distances(gram: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cosine distances of all upper-triangle pairs from a (..., m, m) Gram stack.

    Returns the distances and a mask of pairs with two nonzero norms.
    """
    m = gram.shape[-1]
    iu, ju = np.triu_indices(m, k=1)
    sq = np.diagonal(gram, axis1=-2, axis2=-1)
    # tiny negative squares come from rounding in the rank-2 update
    norms = np.sqrt(np.clip(sq, 0.0, None))
    denom = norms[..., iu] * norms[..., ju]
    scale = np.max(sq, axis=-1, keepdims=True)
    ok = (sq[..., iu] > 1e-24 * scale) & (sq[..., ju] > 1e-24 * scale)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(ok, gram[..., iu, ju] / np.where(ok, denom, 1.0), 0.0)
    return np.clip(1.0 - cos, 0.0, 2.0), ok


def _lookup(v: SummedFeatureVector, ids: np.ndarray) -> np.ndarray:
    pos = np.searchsorted(v.indices, ids)
    pos = np.minimum(pos, max(v.nnz - 1, 0))
    hit = v.indices[pos] == ids if v.nnz else np.zeros(ids.size, bool)
    return np.where(hit, v.values[pos] if v.nnz else 0.0, 0.0)


def cluster_impacts(members: Sequence[SummedFeatureVector], model: PcaModel,
                    sigma: float, features: Iterable[int] | None = None,
                    chunk: int = 256) -> tuple[dict[int, float], int]:
    """Impact of every feature active in the cluster.

    ``sigma`` is the year's distance standard deviation (the mean cancels in
    the difference of standardized distances). Returns ``(impacts, skipped)``
    where ``skipped`` counts pairs dropped because a patched vector had zero
    norm.
    """
    if len(members) < 2:
        raise ValueError("feature impact needs a cluster of at least 2 companies")
    if not sigma > 0:
        raise ValueError("distance standard deviation must be positive")
    g = transform_many(model, members)
    gram = g @ g.T
    base, base_ok = _pair_distances(gram)
    if not base_ok.all():
        raise ValueError("a cluster member has a zero projected vector")

    if features is None:
        feats = np.unique(np.concatenate([v.indices for v in members]))
    else:
        feats = np.asarray(sorted(set(int(f) for f in features)), dtype=np.int64)
    if feats.size and (feats[0] < 0 or feats[-1] >= model.dim):
        raise ValueError(f"feature ids must lie in [0, {model.dim})")

    impacts: dict[int, float] = {}
    skipped = 0
    for lo in range(0, feats.size, chunk):
        z = feats[lo:lo + chunk]
        a = np.stack([_lookup(v, z) for v in members])  # m x c
        cols = model.components[:, z]  # k x c
        u = g @ cols  # m x c
        cc = np.einsum("kc,kc->c", cols, cols)
        # G^z = G - a u^T - u a^T + |c|^2 a a^T, stacked over features
        at, ut = a.T[:, :, None], u.T[:, :, None]
        patched = (gram[None] - at * ut.transpose(0, 2, 1) - ut * at.transpose(0, 2, 1)
                   + cc[:, None, None] * at * at.transpose(0, 2, 1))
        dist, ok = _pair_distances(patched)
        skipped += int((~ok).sum())
        delta = np.where(ok, np.abs(base[None] - dist), 0.0)
        for f, d in zip(z, delta):
            impacts[int(f)] = math.fsum(d) / sigma
    if skipped:
        log.info("%d cluster pairs skipped: patched vector with zero norm", skipped)
    return impacts, skipped


def feature_impact(members: Sequence[SummedFeatureVector], model: PcaModel, z: int,
                   sigma: float) -> float:
    """Sum over unordered member pairs of ``|CD(g_i, g_j) - CD(g_i^z, g_j^z)|``."""
    return cluster_impacts(members, model, sigma, [z])[0][int(z)]


def important_set(impacts: Mapping[int, float]) -> list[int]:
    """Shortest impact-sorted prefix whose impact is at least that of the rest.

    Features are ordered by impact descending, then by id ascending.
    """
    ranked = sorted(((f, v) for f, v in impacts.items() if v > 0), key=lambda t: (-t[1], t[0]))
    if not ranked:
        raise ZeroImpact("all feature impacts are zero")
    total = math.fsum(v for _, v in ranked)
    chosen, taken = [], []
    for f, v in ranked:
        chosen.append(f)
        taken.append(v)
        inside = math.fsum(taken)
        if inside >= total - inside:
            break
    return chosen


def explain_cluster(year: int, cluster_id: int, members: Sequence[SummedFeatureVector],
                    model: PcaModel, sigma: float) -> ImportanceReport:
    impacts, skipped = cluster_impacts(members, model, sigma)
    report = ImportanceReport(year, cluster_id, tuple(v.doc_id for v in members), model.dim,
                              impacts, skipped_pairs=skipped)
    report.important_set = important_set(impacts)
    return report


@dataclass
class SparsitySummary:
    ratios: np.ndarray
    median: float
    histogram: pd.DataFrame


def sparsity_distribution(reports: Sequence[ImportanceReport], bins: int = 20) -> SparsitySummary:
    if not reports:
        raise ValueError("sparsity distribution needs at least one report")
    ratios = np.array([r.sparsity_ratio for r in reports])
    counts, edges = np.histogram(ratios, bins=bins)
    hist = pd.DataFrame({"bin_lo": edges[:-1], "bin_hi": edges[1:], "count": counts})
    return SparsitySummary(ratios, float(np.median(ratios)), hist)


def feature_cluster_frequency(reports: Sequence[ImportanceReport]) -> Counter:
    """Number of clusters in whose important set each feature appears."""
    if not reports:
        raise ValueError("feature frequency needs at least one report")
    return Counter(f for r in reports for f in set(r.important_set))


def top_percentile_features(freq: Mapping[int, int], percentile: float = 99.0) -> list[int]:
    """Features at or above the given percentile of cluster counts, most frequent first."""
    if not freq:
        return []
    cut = np.percentile(np.fromiter(freq.values(), dtype=float), percentile)
    return sorted((f for f, c in freq.items() if c >= cut), key=lambda f: (-freq[f], f))


def write_importance(reports: Sequence[ImportanceReport], path: str | Path) -> None:
    rows = []
    for r in reports:
        s = set(r.important_set)
        rows.extend((r.year, r.cluster_id, f, r.impacts[f], int(f in s))
                    for f in sorted(r.impacts))
    pd.DataFrame(rows, columns=["year", "cluster_id", "feature_id", "impact", "in_s_star"]).to_csv(
        path, index=False, float_format="%.10g")


def write_sparsity(reports: Sequence[ImportanceReport], path: str | Path) -> None:
    rows = [(r.year, r.cluster_id, r.n_active, len(r.important_set), r.sparsity_ratio)
            for r in reports]
    pd.DataFrame(rows, columns=["year", "cluster_id", "n_active", "s_star_size",
                                "sparsity_ratio"]).to_csv(path, index=False, float_format="%.10g")


def write_feature_frequency(freq: Mapping[int, int], path: str | Path,
                            features: Sequence[int] | None = None) -> None:
    ids = list(features) if features is not None else sorted(freq, key=lambda f: (-freq[f], f))
    pd.DataFrame({"feature_id": ids, "clusters_important_count": [freq.get(f, 0) for f in ids]}
                 ).to_csv(path, index=False)
