"""Synthetic universes with known sectors, feature signatures and cointegrated pairs.

Features: every (sector, year) has a template stream of tokens drawn from the
sector's signature block with exponential activations. A company document
copies the template and redraws each token slot with probability
``signature_noise`` (new feature anywhere in the dictionary, new activation).
Company-level multiplicative jitter on signature activations (log-scale std
``company_jitter * signature_noise``) also vanishes with ``signature_noise``, so at zero noise all documents of a sector coincide.

Returns: daily log returns are ``market + sector factor + idiosyncratic``;
prices exponentiate their cumulative sum and monthly returns are monthly sums
of the daily ones. A planted pair ``(a, b)`` replaces ``a``'s price with
``beta * p_b + c + u`` where ``u`` is a stationary AR(1).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd
from scipy.special import comb

from .corpus import CompanyRecord, YearPanel, doc_id_for, write_prices
from .sparsefeat import (SummedFeatureVector, TokenFeatureActivations, write_summed_features,
                         write_token_activations)

log = logging.getLogger(__name__)

# One representative 4-digit SIC code per synthetic sector, spread over divisions.
SECTOR_SIC = (2834, 6021, 7372, 1311, 4911, 5411, 3674, 4512, 1531, 5063, 8062, 2080,
              3711, 6311, 4813, 5812)


@dataclass
class SynthConfig:
    n_companies: int = 200
    n_sectors: int = 8
    start_year: int = 2016
    n_years: int = 5
    feature_dim: int = 1024
    signature_size: int = 24
    signature_noise: float = 0.3
    company_jitter: float = 0.3
    n_tokens: int = 256
    k_per_token: int = 8
    activation_scale: float = 0.7
    market_vol: float = 0.006
    factor_vol: float = 0.012
    idio_vol: float = 0.012
    sic_noise: float = 0.0
    pairs_per_sector: int = 2
    coint_phi: float = 0.9
    coint_noise: float = 0.2
    n_rows: int | None = None
    with_prices: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_sectors <= self.n_companies:
            raise ValueError("need 1 <= n_sectors <= n_companies")
        if self.signature_size * self.n_sectors > self.feature_dim:
            raise ValueError("signature_size * n_sectors exceeds feature_dim")
        if not 1 <= self.k_per_token <= self.signature_size:
            raise ValueError("k_per_token must lie in [1, signature_size]")
        if not 0.0 <= self.signature_noise <= 1.0:
            raise ValueError("signature_noise must lie in [0, 1]")
        if self.n_years < 1 or self.n_tokens < 1:
            raise ValueError("n_years and n_tokens must be positive")
        if not 0.0 <= self.coint_phi < 1.0:
            raise ValueError("coint_phi must lie in [0, 1)")
        if self.n_rows is not None and not self.n_companies <= self.n_rows <= (
                self.n_companies * self.n_years):
            raise ValueError("n_rows must lie in [n_companies, n_companies * n_years]")

    @property
    def years(self) -> list[int]:
        return list(range(self.start_year, self.start_year + self.n_years))


@dataclass
class GroundTruth:
    labels: dict[int, dict[str, int]]
    signatures: dict[int, frozenset[int]]
    pairs: list[tuple[str, str, int, float]] = field(default_factory=list)

    def sector_members(self, year: int) -> dict[int, set[str]]:
        out: dict[int, set[str]] = {}
        for cid, s in self.labels[year].items():
            out.setdefault(s, set()).add(cid)
        return out


@dataclass
class Universe:
    config: SynthConfig
    panels: list[YearPanel]
    prices: pd.DataFrame | None
    truth: GroundTruth
    tokens: dict[str, list[TokenFeatureActivations]] = field(default_factory=dict, repr=False)


def company_id(i: int) -> str:
    return f"C{i:05d}"


def _tenure(cfg: SynthConfig) -> np.ndarray:
    """Years of presence per company, trimmed from the back to hit ``n_rows``."""
    tenure = np.full(cfg.n_companies, cfg.n_years)
    if cfg.n_rows is not None:
        excess = cfg.n_companies * cfg.n_years - cfg.n_rows
        i = cfg.n_companies - 1
        while excess > 0:
            cut = min(excess, cfg.n_years - 1)
            tenure[i] -= cut
            excess -= cut
            i -= 1
    return tenure


def _weighted_topk(rng: np.random.Generator, logw: np.ndarray, rows: int, k: int) -> np.ndarray:
    """``rows`` independent weighted draws of ``k`` distinct indices (Gumbel top-k)."""
    keys = logw[None, :] + rng.gumbel(size=(rows, logw.size))
    return np.argsort(-keys, axis=1, kind="stable")[:, :k]


def _distinct_rows(rng: np.random.Generator, feats: np.ndarray, redraw: np.ndarray,
                   dim: int) -> np.ndarray:
    """Redraw masked slots uniformly over the dictionary keeping rows duplicate-free.

    Unmasked slots come from a distinct top-k draw and are never changed.
    """
    feats = feats.copy()
    feats[redraw] = rng.integers(0, dim, size=int(redraw.sum()))
    for r in np.flatnonzero(redraw.any(axis=1)):
        row, mask = feats[r], redraw[r]
        while True:
            seen = set(row[~mask].tolist())
            clash = []
            for j in np.flatnonzero(mask):
                if row[j] in seen:
                    clash.append(j)
                else:
                    seen.add(row[j])
            if not clash:
                break
            row[clash] = rng.integers(0, dim, size=len(clash))
    return feats


def _documents(cfg: SynthConfig, rng: np.random.Generator, sectors: np.ndarray,
               sig_blocks: list[np.ndarray], present: dict[int, list[int]]):
    s_size, k, dim, nu = cfg.signature_size, cfg.k_per_token, cfg.feature_dim, cfg.signature_noise
    sector_logw = [rng.normal(0.0, 0.5, s_size) for _ in range(cfg.n_sectors)]
    jitter = np.exp(cfg.company_jitter * nu * rng.normal(0.0, 1.0, (cfg.n_companies, s_size)))
    docs: dict[tuple[str, int], tuple[np.ndarray, np.ndarray]] = {}
    for year in cfg.years:
        templates = []
        for s in range(cfg.n_sectors):
            slots = _weighted_topk(rng, sector_logw[s], cfg.n_tokens, k)
            acts = rng.exponential(cfg.activation_scale, (cfg.n_tokens, k))
            templates.append((slots, acts))
        for i in present[year]:
            s = sectors[i]
            slots, acts = templates[s]
            redraw = rng.random(slots.shape) < nu
            feats = _distinct_rows(rng, sig_blocks[s][slots], redraw, dim)
            a = np.where(redraw, rng.exponential(cfg.activation_scale, slots.shape),
                         acts * jitter[i][slots])
            docs[(company_id(i), year)] = (feats, np.maximum(a, 1e-12))
    return docs


def _prices(cfg: SynthConfig, rng: np.random.Generator, sectors: np.ndarray):
    days = pd.bdate_range(f"{cfg.start_year}-01-01", f"{cfg.years[-1]}-12-31")
    t = days.size
    market = rng.normal(0.0, cfg.market_vol, t)
    factors = rng.normal(0.0, cfg.factor_vol, (cfg.n_sectors, t))
    idio = rng.normal(0.0, cfg.idio_vol, (cfg.n_companies, t))
    logret = market[None, :] + factors[sectors] + idio
    base = 100.0 * np.exp(rng.normal(0.0, 0.3, cfg.n_companies))
    price = base[:, None] * np.exp(np.cumsum(logret, axis=1))
    return days, base, price


def _plant_pairs(cfg: SynthConfig, rng: np.random.Generator, sectors: np.ndarray,
                 base: np.ndarray, price: np.ndarray):
    pairs = []
    for s in range(cfg.n_sectors):
        members = np.flatnonzero(sectors == s)
        for p in range(min(cfg.pairs_per_sector, members.size // 2)):
            ia, ib = members[2 * p], members[2 * p + 1]
            beta = float(rng.uniform(0.5, 1.5))
            u = np.empty(price.shape[1] + 1)
            u[0] = rng.normal(0.0, cfg.coint_noise / math.sqrt(1.0 - cfg.coint_phi ** 2))
            shocks = rng.normal(0.0, cfg.coint_noise, price.shape[1])
            for j, e in enumerate(shocks):
                u[j + 1] = cfg.coint_phi * u[j] + e
            path = beta * np.concatenate([[base[ib]], price[ib]]) + u
            c = max(10.0, 1.0 - float(path.min()))
            path += c
            base[ia], price[ia] = path[0], path[1:]
            pairs.append((company_id(ia), company_id(ib), s, beta))
    return pairs


def generate_universe(config: SynthConfig, keep_tokens: bool = False) -> Universe:
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    sectors = np.sort(np.arange(cfg.n_companies) % cfg.n_sectors)
    perm = rng.permutation(cfg.feature_dim)
    sig_blocks = [np.sort(perm[s * cfg.signature_size:(s + 1) * cfg.signature_size])
                  for s in range(cfg.n_sectors)]
    tenure = _tenure(cfg)
    present = {y: [i for i in range(cfg.n_companies) if k < tenure[i]]
               for k, y in enumerate(cfg.years)}

    sic = np.array([SECTOR_SIC[s % len(SECTOR_SIC)] + s // len(SECTOR_SIC) for s in sectors])
    noisy = rng.random(cfg.n_companies) < cfg.sic_noise
    sic[noisy] = rng.choice(np.unique(sic), size=int(noisy.sum())) if noisy.any() else sic[noisy]

    docs = _documents(cfg, rng, sectors, sig_blocks, present)
    days, base, price = _prices(cfg, rng, sectors)
    pairs = _plant_pairs(cfg, rng, sectors, base, price)

    logp = np.log(np.concatenate([base[:, None], price], axis=1))
    month_key = np.concatenate([[-1], days.year * 12 + days.month - 1])
    month_end = np.flatnonzero(np.r_[month_key[1:] != month_key[:-1], True])
    # month_end[0] is the pre-sample base value
    monthly = np.diff(logp[:, month_end], axis=1)
    month_years = (month_key[month_end[1:]] // 12)

    panels, tokens = [], {}
    for year in cfg.years:
        cols = np.flatnonzero(month_years == year)
        records, returns, feats = {}, {}, {}
        for i in present[year]:
            cid = company_id(i)
            records[cid] = CompanyRecord(cid, f"T{i:05d}", year, int(sic[i]))
            returns[cid] = monthly[i, cols].copy()
            f, a = docs[(cid, year)]
            doc = doc_id_for(cid, year)
            entries: dict[int, float] = {}
            for fid, act in zip(f.ravel(), a.ravel()):
                entries[int(fid)] = entries.get(int(fid), 0.0) + float(act)
            feats[cid] = SummedFeatureVector.from_mapping(doc, cfg.feature_dim, entries)
            if keep_tokens:
                tokens[doc] = [TokenFeatureActivations(doc, t, f[t], a[t], cfg.feature_dim)
                               for t in range(f.shape[0])]
        panels.append(YearPanel(year, records, returns, feats))

    prices = None
    if cfg.with_prices:
        prices = pd.DataFrame(price.T, index=days, columns=[company_id(i)
                                                             for i in range(cfg.n_companies)])
    labels = {y: {company_id(i): int(sectors[i]) for i in present[y]} for y in cfg.years}
    truth = GroundTruth(labels, {s: frozenset(int(f) for f in b) for s, b in enumerate(sig_blocks)},
                        pairs)
    return Universe(cfg, panels, prices, truth, tokens)


def write_universe(universe: Universe, out_dir: str | Path, tokens: bool = False) -> dict[str, Path]:
    """Write the corpus CSVs plus ``ground_truth.csv``, ``signatures.csv`` and ``planted_pairs.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / f"{name}.csv" for name in
             ("metadata", "returns", "features", "ground_truth", "signatures", "planted_pairs")}
    meta = [(r.company_id, r.ticker, r.year, r.sic_code)
            for p in universe.panels for r in p.records.values()]
    pd.DataFrame(meta, columns=["company_id", "ticker", "year", "sic_code"]).to_csv(
        paths["metadata"], index=False)
    rets = [(cid, p.year, m + 1, v) for p in universe.panels for cid, series in p.returns.items()
            for m, v in enumerate(series)]
    pd.DataFrame(rets, columns=["company_id", "year", "month", "log_return"]).to_csv(
        paths["returns"], index=False, float_format="%.17g")
    write_summed_features([v for p in universe.panels for v in p.summed_features.values()],
                          paths["features"])
    if tokens:
        if not universe.tokens:
            raise ValueError("universe was generated without token-level activations")
        paths["tokens"] = out / "tokens.csv"
        write_token_activations([t for doc in universe.tokens.values() for t in doc],
                                paths["tokens"])
    if universe.prices is not None:
        paths["prices"] = out / "prices.csv"
        write_prices(universe.prices, paths["prices"])
    gt = [(y, cid, s) for y, lab in universe.truth.labels.items() for cid, s in lab.items()]
    pd.DataFrame(gt, columns=["year", "company_id", "sector"]).to_csv(paths["ground_truth"],
                                                                      index=False)
    sig = [(s, f) for s, fs in universe.truth.signatures.items() for f in sorted(fs)]
    pd.DataFrame(sig, columns=["sector", "feature_id"]).to_csv(paths["signatures"], index=False)
    pd.DataFrame(universe.truth.pairs, columns=["id_a", "id_b", "sector", "beta"]).to_csv(
        paths["planted_pairs"], index=False, float_format="%.17g")
    return paths


def adjusted_rand_index(labels_a: Mapping, labels_b: Mapping) -> float:
    """Hubert-Arabie adjusted Rand index of two labelings of the same elements."""
    if set(labels_a) != set(labels_b):
        raise ValueError("labelings cover different element sets")
    keys = sorted(labels_a)
    n = len(keys)
    if n < 2:
        return 1.0
    _, ia = np.unique([str(labels_a[k]) for k in keys], return_inverse=True)
    _, ib = np.unique([str(labels_b[k]) for k in keys], return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    sum_cells = comb(table, 2).sum()
    sum_a = comb(table.sum(axis=1), 2).sum()
    sum_b = comb(table.sum(axis=0), 2).sum()
    total = comb(n, 2)
    expected = sum_a * sum_b / total
    max_index = (sum_a + sum_b) / 2.0
    if max_index == expected:
        # both partitions trivial (all singletons or one block) and identical structure
        return 1.0 if sum_cells == expected else 0.0
    return float((sum_cells - expected) / (max_index - expected))


def config_dict(config: SynthConfig) -> dict:
    return asdict(config)
