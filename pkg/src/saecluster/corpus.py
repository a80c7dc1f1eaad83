"""Company panel ingestion: metadata, monthly log returns, features, prices.

Documents are keyed ``"<company_id>:<year>"`` in feature files; see
:func:`doc_id_for`.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .graphcluster import YearClustering, read_clusters
from .sparsefeat import (DEFAULT_DIM, DEFAULT_K_ACTIVE, SummedFeatureVector,
                         load_summed_features, load_token_activations, sum_documents)

log = logging.getLogger(__name__)

MONTHS = 12
SIC_MIN, SIC_MAX = 100, 9999

# Standard SIC major divisions keyed by 2-digit prefix ranges (inclusive).
# Prefixes outside every range (00, 18-19, 90, 98) go to a 12th bucket.
BISC_DIVISIONS: tuple[tuple[int, int, int, str], ...] = (
    (1, 9, 1, "Agriculture, Forestry, and Fishing"),
    (10, 14, 2, "Mining"),
    (15, 17, 3, "Construction"),
    (20, 39, 4, "Manufacturing"),
    (40, 49, 5, "Transportation, Communications, Electric, Gas, and Sanitary Services"),
    (50, 51, 6, "Wholesale Trade"),
    (52, 59, 7, "Retail Trade"),
    (60, 67, 8, "Finance, Insurance, and Real Estate"),
    (70, 89, 9, "Services"),
    (91, 97, 10, "Public Administration"),
    (99, 99, 11, "Nonclassifiable Establishments"),
)
BISC_UNASSIGNED = 12


class DataError(ValueError):
    """Fatal ingestion problem (unreadable file, duplicate key, bad reference)."""


def bisc_code(sic_code: int) -> int:
    """Major-division bucket (1..12) of a 4-digit SIC code."""
    sic = int(sic_code)
    if not SIC_MIN <= sic <= SIC_MAX:
        raise ValueError(f"SIC code {sic} outside [{SIC_MIN}, {SIC_MAX}]")
    prefix = sic // 100
    for lo, hi, code, _ in BISC_DIVISIONS:
        if lo <= prefix <= hi:
            return code
    return BISC_UNASSIGNED


def doc_id_for(company_id: str, year: int) -> str:
    return f"{company_id}:{int(year)}"


def parse_doc_id(doc_id: str) -> tuple[str, int]:
    company, sep, year = str(doc_id).rpartition(":")
    if not sep or not company:
        raise ValueError(f"doc id {doc_id!r} is not '<company_id>:<year>'")
    return company, int(year)


@dataclass(frozen=True)
class CompanyRecord:
    company_id: str
    ticker: str
    year: int
    sic_code: int

    @property
    def bisc_code(self) -> int:
        return bisc_code(self.sic_code)


@dataclass(frozen=True)
class YearPanel:
    year: int
    records: Mapping[str, CompanyRecord]
    returns: Mapping[str, np.ndarray]
    summed_features: Mapping[str, SummedFeatureVector]

    @property
    def companies(self) -> list[str]:
        return sorted(self.records)

    def __len__(self):
        return len(self.records)


@dataclass
class CorpusConfig:
    dim: int = DEFAULT_DIM
    k_active: int = DEFAULT_K_ACTIVE
    features_format: str = "summed"  # or "tokens"
    raw_returns: bool = False


@dataclass
class LoadReport:
    counts: Counter = field(default_factory=Counter)

    def add(self, key: str, n: int = 1) -> None:
        if n:
            self.counts[key] += n

    def __getitem__(self, key):
        return self.counts.get(key, 0)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.counts.items()))

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())


def _read_csv(path, columns: Sequence[str], dtype=None) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, dtype=dtype, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    return df


def read_metadata(path, report: LoadReport) -> dict[tuple[str, int], CompanyRecord]:
    df = _read_csv(path, ["company_id", "ticker", "year", "sic_code"],
                   dtype={"company_id": str, "ticker": str})
    report.add("metadata_rows", len(df))
    dup = df.duplicated(["company_id", "year"])
    if dup.any():
        row = df.loc[dup].iloc[0]
        raise DataError(f"duplicate metadata row for ({row.company_id}, {row.year})")
    out = {}
    for row in df.itertuples(index=False):
        if not isinstance(row.ticker, str) or not row.ticker.strip():
            report.add("dropped_missing_ticker")
            continue
        try:
            sic = int(row.sic_code)
        except (TypeError, ValueError):
            report.add("dropped_invalid_sic")
            continue
        if not SIC_MIN <= sic <= SIC_MAX or sic != row.sic_code:
            report.add("dropped_invalid_sic")
            continue
        out[(row.company_id, int(row.year))] = CompanyRecord(row.company_id, row.ticker.strip(),
                                                             int(row.year), sic)
    return out


def read_returns(path, report: LoadReport, raw: bool = False) -> dict[tuple[str, int], np.ndarray]:
    df = _read_csv(path, ["company_id", "year", "month", "log_return"], dtype={"company_id": str})
    report.add("return_rows", len(df))
    bad_month = ~df["month"].isin(range(1, MONTHS + 1))
    report.add("dropped_bad_month_rows", int(bad_month.sum()))
    df = df.loc[~bad_month]
    dup = df.duplicated(["company_id", "year", "month"])
    if dup.any():
        row = df.loc[dup].iloc[0]
        raise DataError(f"duplicate return for ({row.company_id}, {row.year}, month {row.month})")
    values = pd.to_numeric(df["log_return"], errors="coerce").to_numpy(dtype=float)
    if raw:
        with np.errstate(invalid="ignore", divide="ignore"):
            values = np.where(values > -1, np.log1p(values), np.nan)
    df = df.assign(log_return=values)
    out = {}
    for (cid, year), g in df.groupby(["company_id", "year"], sort=True):
        if len(g) < MONTHS:
            report.add("dropped_short_returns")
            continue
        vals = g.sort_values("month")["log_return"].to_numpy()
        if not np.all(np.isfinite(vals)):
            report.add("dropped_nonfinite_returns")
            continue
        out[(cid, int(year))] = vals
    return out


def read_features(path, config: CorpusConfig, report: LoadReport
                  ) -> dict[tuple[str, int], SummedFeatureVector]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"cannot read {path}: no such file")
    if config.features_format == "tokens":
        vectors = sum_documents(load_token_activations(path, config.dim, config.k_active))
    elif config.features_format == "summed":
        vectors = load_summed_features(path, config.dim)
    else:
        raise ValueError(f"unknown features format {config.features_format!r}")
    report.add("feature_documents", len(vectors))
    out = {}
    for v in vectors:
        try:
            key = parse_doc_id(v.doc_id)
        except ValueError:
            report.add("dropped_bad_doc_id")
            continue
        if key in out:
            raise DataError(f"duplicate feature document {v.doc_id}")
        out[key] = v
    return out


def load_panel(features_path, returns_path, metadata_path,
               config: CorpusConfig | None = None) -> tuple[list[YearPanel], LoadReport]:
    """Join metadata, returns and features into one panel per year.

    Company-years missing from any source are dropped and counted in the
    report under ``missing_*``; duplicates are fatal.
    """
    config = config or CorpusConfig()
    report = LoadReport()
    meta = read_metadata(metadata_path, report)
    rets = read_returns(returns_path, report, raw=config.raw_returns)
    feats = read_features(features_path, config, report)

    for key in sorted(set(rets) - set(meta)):
        report.add("returns_without_metadata")
    for key in sorted(set(feats) - set(meta)):
        log.warning("feature document %s has no metadata; dropped", doc_id_for(*key))
        report.add("features_without_metadata")

    by_year: dict[int, dict[str, CompanyRecord]] = {}
    for key, rec in sorted(meta.items()):
        if key not in rets:
            log.warning("no return series for %s in %d; dropped", *key)
            report.add("missing_returns")
            continue
        if key not in feats:
            log.warning("no features for %s in %d; dropped", *key)
            report.add("missing_features")
            continue
        by_year.setdefault(key[1], {})[key[0]] = rec

    panels = []
    for year in sorted(by_year):
        recs = by_year[year]
        panels.append(YearPanel(
            year=year,
            records=dict(sorted(recs.items())),
            returns={c: rets[(c, year)] for c in sorted(recs)},
            summed_features={c: feats[(c, year)] for c in sorted(recs)},
        ))
    report.add("panels", len(panels))
    report.add("company_years_loaded", sum(len(p) for p in panels))
    return panels, report


def filter_min_history(panels: Sequence[YearPanel], min_years: int) -> list[YearPanel]:
    """Drop companies present in fewer than ``min_years`` panels (from every panel)."""
    if min_years < 1:
        raise ValueError("min_years must be >= 1")
    tenure = Counter(c for p in panels for c in p.records)
    keep = {c for c, n in tenure.items() if n >= min_years}
    out = []
    for p in panels:
        ids = [c for c in p.records if c in keep]
        if not ids:
            continue
        out.append(YearPanel(p.year, {c: p.records[c] for c in ids},
                             {c: p.returns[c] for c in ids},
                             {c: p.summed_features[c] for c in ids}))
    return out


def benchmark_clusters(panel: YearPanel, scheme: str) -> YearClustering:
    """One cluster per distinct SIC (or BISC) code value."""
    scheme = scheme.upper()
    if scheme == "SIC":
        key = lambda r: r.sic_code
    elif scheme == "BISC":
        key = lambda r: r.bisc_code
    else:
        raise ValueError(f"unknown benchmark scheme {scheme!r}")
    groups: dict[int, set] = {}
    for cid, rec in panel.records.items():
        groups.setdefault(key(rec), set()).add(cid)
    return YearClustering(panel.year, tuple(frozenset(g) for g in groups.values()), scheme)


def load_external_clustering(path, year: int, known_companies: Iterable[str],
                             method: str = "external") -> YearClustering:
    """Read one year's partition from a ``year,cluster_id,company_id`` file."""
    all_years = read_clusters(path, method)
    if year not in all_years:
        raise DataError(f"{path}: no clusters for year {year}")
    yc = all_years[year]
    known = set(known_companies)
    unknown = sorted(yc.companies - known)
    if unknown:
        raise DataError(f"{path}: unknown company id(s) in {year}: {unknown[:5]}")
    return yc


def load_prices(path, report: LoadReport | None = None) -> pd.DataFrame:
    """Adjusted closes as a wide frame (dates x companies), NaN where absent."""
    df = _read_csv(path, ["company_id", "date", "adj_close"], dtype={"company_id": str})
    if report is not None:
        report.add("price_rows", len(df))
    df["date"] = pd.to_datetime(df["date"], format="%Y-%m-%d")
    dup = df.duplicated(["company_id", "date"])
    if dup.any():
        row = df.loc[dup].iloc[0]
        raise DataError(f"duplicate price for {row.company_id} on {row.date.date()}")
    bad = ~(df["adj_close"] > 0) | ~np.isfinite(df["adj_close"])
    if bad.any():
        log.warning("dropping %d non-positive or missing prices", int(bad.sum()))
        if report is not None:
            report.add("dropped_nonpositive_prices", int(bad.sum()))
        df = df.loc[~bad]
    wide = df.pivot(index="date", columns="company_id", values="adj_close").sort_index()
    wide.columns.name = None
    return wide


def write_prices(prices: pd.DataFrame, path) -> None:
    long = prices.stack().rename("adj_close").reset_index()
    long.columns = ["date", "company_id", "adj_close"]
    long = long.sort_values(["company_id", "date"], kind="stable")
    long["date"] = long["date"].dt.strftime("%Y-%m-%d")
    long[["company_id", "date", "adj_close"]].to_csv(path, index=False, float_format="%.17g")


def monthly_returns_from_prices(prices: pd.DataFrame) -> dict[tuple[str, int], np.ndarray]:
    """Log returns between consecutive month-end closes, grouped per calendar year.

    Only complete 12-month years are returned (the first observed month has no
    prior close and is therefore missing).
    """
    month_end = prices.groupby(prices.index.to_period("M")).last()
    logret = np.log(month_end).diff()
    out = {}
    for cid in logret.columns:
        s = logret[cid]
        for year, g in s.groupby(s.index.year):
            vals = g.to_numpy()
            if len(vals) == MONTHS and np.all(np.isfinite(vals)):
                out[(cid, int(year))] = vals
    return out
