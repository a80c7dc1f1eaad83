"""Return correlations and the mean intra-cluster correlation (MC) metric."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .graphcluster import YearClustering

PAIR_MEAN = "pair_mean"
PAPER_LITERAL = "paper_literal"
MC_MODES = (PAIR_MEAN, PAPER_LITERAL)


class UndefinedCorrelation(ValueError):
    pass


class NoScorableClusters(ValueError):
    """Raised when no cluster has two or more companies with defined correlations."""


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("pearson needs two equal-length 1-d series of length >= 2")
    da, db = a - a.mean(), b - b.mean()
    na, nb = math.sqrt(da.dot(da)), math.sqrt(db.dot(db))
    if na == 0 or nb == 0:
        raise UndefinedCorrelation("zero-variance series")
    return float(np.clip(da.dot(db) / (na * nb), -1.0, 1.0))


def correlation_matrix(series: np.ndarray) -> np.ndarray:
    """Row-wise Pearson matrix; rows with zero variance give NaN entries."""
    x = np.asarray(series, dtype=float)
    xc = x - x.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.einsum("ij,ij->i", xc, xc))
    with np.errstate(invalid="ignore", divide="ignore"):
        xn = xc / norms[:, None]
    xn[norms == 0] = np.nan
    return np.clip(xn @ xn.T, -1.0, 1.0)


@dataclass
class YearScore:
    year: int
    mc: float
    scored_clusters: int
    mean_cluster_size: float
    skipped_pairs: int


def score_clustering(clustering: YearClustering, returns: Mapping[str, np.ndarray],
                     mode: str = PAIR_MEAN) -> YearScore:
    """MC for one year with bookkeeping.

    pair_mean averages, over clusters, the mean correlation of the cluster's
    unordered pairs; paper_literal divides the cluster's pair sum by its size.
    Clusters with fewer than two members are ignored; undefined pairs are
    dropped from numerator and denominator.
    """
    if mode not in MC_MODES:
        raise ValueError(f"unknown MC mode {mode!r}")
    per_cluster = []
    sizes = []
    skipped = 0
    for members in clustering.clusters:
        if len(members) < 2:
            continue
        ids = sorted(members)
        missing = [c for c in ids if c not in returns]
        if missing:
            raise KeyError(f"no returns for {missing[:3]} in {clustering.year}")
        rho = correlation_matrix(np.vstack([returns[c] for c in ids]))
        vals = rho[np.triu_indices(len(ids), k=1)]
        ok = np.isfinite(vals)
        skipped += int((~ok).sum())
        if not ok.any():
            continue
        if mode == PAIR_MEAN:
            per_cluster.append(float(vals[ok].mean()))
        else:
            per_cluster.append(float(vals[ok].sum()) / len(ids))
        sizes.append(len(ids))
    if not per_cluster:
        raise NoScorableClusters(f"no cluster of size >= 2 with defined correlations in "
                                 f"{clustering.year}")
    return YearScore(clustering.year, float(np.mean(per_cluster)), len(per_cluster),
                     float(np.mean(sizes)), skipped)


def mean_intra_cluster_correlation(clustering: YearClustering,
                                   returns: Mapping[str, np.ndarray],
                                   mode: str = PAIR_MEAN) -> float:
    return score_clustering(clustering, returns, mode).mc


def overall_mc(per_year: Mapping[int, float]) -> float:
    if not per_year:
        raise ValueError("overall MC needs at least one year")
    return float(np.mean(list(per_year.values())))


def population_baseline(panel_returns: Mapping[int, Mapping[str, np.ndarray]]) -> float:
    """Mean over years of the mean pairwise correlation across all companies."""
    per_year = []
    for year in sorted(panel_returns):
        rets = panel_returns[year]
        if len(rets) < 2:
            raise ValueError(f"population baseline needs >= 2 companies in {year}")
        rho = correlation_matrix(np.vstack([rets[c] for c in sorted(rets)]))
        vals = rho[np.triu_indices(rho.shape[0], k=1)]
        vals = vals[np.isfinite(vals)]
        if vals.size:
            per_year.append(float(vals.mean()))
    if not per_year:
        raise NoScorableClusters("no defined correlations in any year")
    return float(np.mean(per_year))


@dataclass
class EvaluationReport:
    method: str
    mode: str
    years: dict[int, YearScore] = field(default_factory=dict)

    @property
    def per_year(self) -> dict[int, float]:
        return {y: s.mc for y, s in sorted(self.years.items())}

    @property
    def overall(self) -> float:
        return overall_mc(self.per_year)

    def to_frame(self) -> pd.DataFrame:
        rows = [(self.method, str(y), s.mc, s.scored_clusters, s.mean_cluster_size,
                 s.skipped_pairs) for y, s in sorted(self.years.items())]
        if self.years:
            rows.append((self.method, "overall", self.overall,
                         sum(s.scored_clusters for s in self.years.values()),
                         float(np.mean([s.mean_cluster_size for s in self.years.values()])),
                         sum(s.skipped_pairs for s in self.years.values())))
        return pd.DataFrame(rows, columns=["method", "year", "mc", "clusters",
                                           "mean_cluster_size", "skipped_pairs"])


def evaluate(method: str, clusterings: Iterable[YearClustering],
             returns_by_year: Mapping[int, Mapping[str, np.ndarray]],
             mode: str = PAIR_MEAN) -> EvaluationReport:
    """Score every year; years without scorable clusters are left out of the mean."""
    report = EvaluationReport(method, mode)
    for yc in sorted(clusterings, key=lambda c: c.year):
        try:
            report.years[yc.year] = score_clustering(yc, returns_by_year[yc.year], mode)
        except NoScorableClusters:
            continue
    return report


def write_evaluation(reports: Sequence[EvaluationReport], path: str | Path) -> None:
    frames = [r.to_frame() for r in reports]
    df = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(
        columns=["method", "year", "mc", "clusters", "mean_cluster_size", "skipped_pairs"])
    df["mode"] = [r.mode for r in reports for _ in range(len(r.to_frame()))]
    df.to_csv(path, index=False, float_format="%.10g")
