"""Choosing the MST cut-off: fixed temporal folds and rolling walk-forward."""

from __future__ import annotations

import contextlib
import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
import pandas as pd

from .graphcluster import MstForest, YearClustering, cut_mst
from .metrics import PAIR_MEAN, NoScorableClusters, mean_intra_cluster_correlation

log = logging.getLogger(__name__)

NEG_INF = float("-inf")


@dataclass(frozen=True)
class ThetaGrid:
    start: float = -4.5
    stop: float = -1.0
    step: float = 0.1

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("grid step must be positive")
        if not self.start <= self.stop:
            raise ValueError("grid start must not exceed stop")

    def values(self) -> np.ndarray:
        n = int(math.floor((self.stop - self.start) / self.step + 1e-9)) + 1
        vals = np.round(self.start + self.step * np.arange(n), 10)
        if abs(vals[-1] - self.stop) > 1e-9 and vals[-1] < self.stop:
            log.warning("grid stop %.6g is not reachable with step %.6g", self.stop, self.step)
        return vals

    def __contains__(self, theta) -> bool:
        return bool(np.any(np.abs(self.values() - theta) <= 1e-9))


class AuditedReturns(Mapping):
    """Year-keyed returns that log which years are read under which phase."""

    def __init__(self, returns_by_year: Mapping[int, Mapping[str, np.ndarray]]):
        self._data = returns_by_year
        self._phase: tuple = ("free",)
        self.accesses: list[tuple[tuple, int]] = []

    @contextlib.contextmanager
    def phase(self, *label) -> Iterator[None]:
        prev, self._phase = self._phase, tuple(label)
        try:
            yield
        finally:
            self._phase = prev

    def __getitem__(self, year):
        self.accesses.append((self._phase, year))
        return self._data[year]

    def __iter__(self):
        return iter(self._data)

    def __len__(self):
        return len(self._data)

    def lookahead_violations(self) -> list[tuple[tuple, int]]:
        """Reads of year >= y while choosing the threshold for year y."""
        return [(ph, yr) for ph, yr in self.accesses
                if ph[0] == "select" and yr >= ph[1]]


@dataclass
class CalibrationResult:
    variant: str
    theta_star: float | None = None
    thetas: dict[int, float] = field(default_factory=dict)
    oos_mc: dict[int, float] = field(default_factory=dict)
    table: pd.DataFrame | None = None

    def series_frame(self) -> pd.DataFrame:
        """``year,theta_star,mc_oos`` rows for the rolling variant."""
        years = sorted(self.thetas)
        return pd.DataFrame({"year": years,
                             "theta_star": [self.thetas[y] for y in years],
                             "mc_oos": [self.oos_mc.get(y, np.nan) for y in years]})


class ThetaScorer:
    """Caches ``MC^(y)(theta)`` per (theta, year) over precomputed MSTs."""

    def __init__(self, msts: Mapping[int, MstForest], returns_by_year: Mapping,
                 mode: str = PAIR_MEAN):
        self.msts = msts
        self.returns = returns_by_year
        self.mode = mode
        self._cache: dict[tuple[float, int], float] = {}

    def year_score(self, theta: float, year: int) -> float:
        key = (round(float(theta), 10), year)
        if key not in self._cache:
            clustering = cut_mst(self.msts[year], theta)
            try:
                self._cache[key] = mean_intra_cluster_correlation(
                    clustering, self.returns[year], self.mode)
            except NoScorableClusters:
                self._cache[key] = NEG_INF
        return self._cache[key]

    def __call__(self, theta: float, years: Sequence[int]) -> float:
        scores = [self.year_score(theta, y) for y in years]
        if not scores or any(s == NEG_INF for s in scores):
            return NEG_INF
        return float(np.mean(scores))


def evaluate_theta(theta: float, years: Sequence[int], msts: Mapping[int, MstForest],
                   returns_by_year: Mapping, mode: str = PAIR_MEAN) -> float:
    """Mean over ``years`` of the MC obtained by cutting each year's MST at ``theta``.

    Returns ``-inf`` when any year has no scorable cluster.
    """
    return ThetaScorer(msts, returns_by_year, mode)(theta, years)


def _argmax_smallest(grid: np.ndarray, scores: Sequence[float]) -> int:
    best = 0
    for k in range(1, len(grid)):
        if scores[k] > scores[best]:
            best = k
    return best


def fold_years(years: Sequence[int], fractions: Sequence[float] = (0.25, 0.5)) -> list[list[int]]:
    """Chronological prefixes covering the given fractions of the year range."""
    ys = sorted(years)
    folds = []
    for frac in fractions:
        k = int(math.floor(frac * len(ys) + 0.5))
        if k < 1:
            raise ValueError(f"fold covering {frac:.0%} of {len(ys)} years is empty")
        folds.append(ys[:k])
    return folds


def calibrate_fixed(grid: ThetaGrid, msts: Mapping[int, MstForest], returns_by_year: Mapping,
                    mode: str = PAIR_MEAN, fractions: Sequence[float] = (0.25, 0.5),
                    scorer: ThetaScorer | None = None) -> CalibrationResult:
    """Pick one threshold maximizing the average of the folds' mean MC.

    Ties go to the smaller threshold.
    """
    years = sorted(msts)
    if len(years) < 4:
        raise ValueError("fixed calibration needs at least 4 years")
    folds = fold_years(years, fractions)
    scorer = scorer or ThetaScorer(msts, returns_by_year, mode)
    thetas = grid.values()
    scores = []
    for theta in thetas:
        per_fold = [scorer(theta, f) for f in folds]
        scores.append(NEG_INF if NEG_INF in per_fold else float(np.mean(per_fold)))
    if all(s == NEG_INF for s in scores):
        raise NoScorableClusters("every grid threshold leaves a fold without scorable clusters")
    best = _argmax_smallest(thetas, scores)
    table = pd.DataFrame({"variant": "fixed", "year": "fixed", "theta": thetas, "score": scores})
    return CalibrationResult("fixed", theta_star=float(thetas[best]), table=table)


def calibrate_rolling(grid: ThetaGrid, msts: Mapping[int, MstForest], returns_by_year: Mapping,
                      mode: str = PAIR_MEAN, lookback: int = 5) -> CalibrationResult:
    """Per-year threshold from the preceding ``lookback`` years, scored out of sample.

    Years without a complete look-back window are skipped. If ``returns_by_year``
    is an :class:`AuditedReturns`, selection and scoring reads are labelled so
    look-ahead can be checked afterwards.
    """
    audited = isinstance(returns_by_year, AuditedReturns)
    phase: Callable = returns_by_year.phase if audited else (lambda *a: contextlib.nullcontext())
    scorer = ThetaScorer(msts, returns_by_year, mode)
    thetas = grid.values()
    years = sorted(msts)
    available = set(years)
    result = CalibrationResult("rolling")
    rows = []
    for y in years:
        window = list(range(y - lookback, y))
        if not set(window) <= available:
            if any(w in available for w in window):
                log.warning("year %d lacks a full %d-year look-back; skipped", y, lookback)
            continue
        with phase("select", y):
            scores = [scorer(t, window) for t in thetas]
        if all(s == NEG_INF for s in scores):
            log.warning("no scorable threshold in the look-back of %d; skipped", y)
            continue
        best = _argmax_smallest(thetas, scores)
        result.thetas[y] = float(thetas[best])
        rows.extend(("rolling", str(y), t, s) for t, s in zip(thetas, scores))
        with phase("score", y):
            mc = scorer.year_score(thetas[best], y)
        result.oos_mc[y] = mc if mc != NEG_INF else float("nan")
    result.table = pd.DataFrame(rows, columns=["variant", "year", "theta", "score"])
    return result


def rolling_clusterings(result: CalibrationResult, msts: Mapping[int, MstForest],
                        method: str = "CDR") -> list[YearClustering]:
    return [cut_mst(msts[y], t, method) for y, t in sorted(result.thetas.items())]


def write_calibration(results: Sequence[CalibrationResult], path) -> None:
    frames = [r.table for r in results if r.table is not None]
    df = (pd.concat(frames, ignore_index=True) if frames
          else pd.DataFrame(columns=["variant", "year", "theta", "score"]))
    df.to_csv(path, index=False, float_format="%.10g")
