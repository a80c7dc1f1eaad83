"""Cluster-conditioned pairs trading: selection, band simulation, accounting."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .cointegration import CointConfig, CointResult, OlsFit, engle_granger
from .graphcluster import YearClustering
from .metrics import correlation_matrix

log = logging.getLogger(__name__)

LONG, SHORT = "long_spread", "short_spread"
WORKERS_ENV = "SAECLUSTER_WORKERS"


@dataclass
class TradingConfig:
    in_sample: tuple[str, str] = ("2002-01-01", "2013-12-31")
    out_of_sample: tuple[str, str] = ("2014-01-01", "2020-12-31")
    preselect_corr_min: float = 0.95
    coint_p_max: float = 0.01
    entry_band: float = 1.0
    stop_band: float = 2.0
    transaction_cost: float = 0.0
    initial_cash_per_pair: float = 1000.0
    min_overlap_months: int = 12
    min_coint_obs: int = 100

    def __post_init__(self):
        self.in_sample = tuple(pd.Timestamp(d) for d in self.in_sample)
        self.out_of_sample = tuple(pd.Timestamp(d) for d in self.out_of_sample)
        if not (self.in_sample[0] <= self.in_sample[1] < self.out_of_sample[0]
                <= self.out_of_sample[1]):
            raise ValueError("in-sample and out-of-sample windows must be ordered and disjoint")
        if not 0 < self.entry_band < self.stop_band:
            raise ValueError("need 0 < entry_band < stop_band")
        if self.transaction_cost != 0:
            raise ValueError("only zero transaction costs are supported")

    @property
    def in_sample_years(self) -> range:
        return range(self.in_sample[0].year, self.in_sample[1].year + 1)


class AccessAudit:
    """Records every price window read, and flags reads outside the allowed span."""

    def __init__(self):
        self.records: list[tuple[str, pd.Timestamp, pd.Timestamp]] = []
        self.violations: list[tuple[str, pd.Timestamp, pd.Timestamp, pd.Timestamp]] = []
        self.carried_forward: list[tuple[str, pd.Timestamp]] = []

    def read(self, stage: str, allowed_hi: pd.Timestamp, lo: pd.Timestamp,
             hi: pd.Timestamp, allowed_lo: pd.Timestamp | None = None) -> None:
        self.records.append((stage, lo, hi))
        if hi > allowed_hi or (allowed_lo is not None and lo < allowed_lo):
            self.violations.append((stage, allowed_hi, lo, hi))


@dataclass
class TradeEvent:
    date: pd.Timestamp
    action: str  # open | close
    side: str
    spread: float
    reason: str  # band_entry | mean_exit | stop_loss | forced_close
    pnl: float = 0.0


@dataclass
class PairTradeLog:
    id_a: str
    id_b: str
    alpha: float
    beta: float
    mu: float
    sigma: float
    events: list[TradeEvent] = field(default_factory=list)

    @property
    def round_trip_pnl(self) -> list[float]:
        return [e.pnl for e in self.events if e.action == "close"]

    @property
    def realized_pnl(self) -> float:
        return float(sum(self.round_trip_pnl))


@dataclass
class PortfolioTrajectory:
    method: str
    dates: pd.DatetimeIndex
    cash: np.ndarray
    unrealized: np.ndarray

    @property
    def value(self) -> np.ndarray:
        return self.cash + self.unrealized

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"date": self.dates.strftime("%Y-%m-%d"), "cash": self.cash,
                             "unrealized": self.unrealized, "V": self.value})


def trading_clustering(clusterings: Mapping[int, YearClustering] | Iterable[YearClustering],
                       config: TradingConfig) -> YearClustering | None:
    """The most recent clustering available at the end of the in-sample window."""
    items = clusterings.values() if isinstance(clusterings, Mapping) else clusterings
    eligible = [c for c in items if c.year <= config.in_sample[1].year]
    return max(eligible, key=lambda c: c.year) if eligible else None


def _in_sample_monthly(cid: str, returns: Mapping[tuple[str, int], np.ndarray],
                       years: Iterable[int]) -> dict[int, np.ndarray]:
    return {y: returns[(cid, y)] for y in years if (cid, y) in returns}


def preselect_pairs(clustering: YearClustering, returns: Mapping[tuple[str, int], np.ndarray],
                    config: TradingConfig) -> list[tuple[str, str]]:
    """Within-cluster pairs whose in-sample monthly log returns correlate above the cut.

    ``returns`` maps ``(company_id, year)`` to 12 monthly values; the pair is
    scored over in-sample years both companies have.
    """
    years = list(config.in_sample_years)
    out = []
    for members in clustering.clusters:
        ids = sorted(members)
        hist = {c: _in_sample_monthly(c, returns, years) for c in ids}
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                common = sorted(set(hist[a]) & set(hist[b]))
                if len(common) * 12 < config.min_overlap_months:
                    continue
                ra = np.concatenate([hist[a][y] for y in common])
                rb = np.concatenate([hist[b][y] for y in common])
                rho = correlation_matrix(np.vstack([ra, rb]))[0, 1]
                if np.isfinite(rho) and rho > config.preselect_corr_min:
                    out.append((a, b))
    return out


def _workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def select_cointegrated(pairs: Sequence[tuple[str, str]], prices: pd.DataFrame,
                        config: TradingConfig, audit: AccessAudit | None = None,
                        report: list | None = None) -> list[CointResult]:
    """Engle-Granger on in-sample closes; returns only the pairs that pass.

    The dependent leg is the lexicographically smaller id. Every tested pair
    (passing or not) is appended to ``report`` when given; pairs with too little
    overlapping history are skipped and logged.
    """
    lo, hi = config.in_sample
    window = prices.loc[(prices.index >= lo) & (prices.index <= hi)]
    if audit is not None and len(window):
        audit.read("select", hi, window.index[0], window.index[-1], allowed_lo=lo)
    cfg = CointConfig(p_max=config.coint_p_max, min_obs=config.min_coint_obs)

    def test(pair):
        a, b = sorted(pair)
        if a not in window or b not in window:
            log.info("pair %s/%s skipped: no in-sample prices", a, b)
            return None
        both = window[[a, b]].dropna()
        if len(both) < config.min_coint_obs:
            log.info("pair %s/%s skipped: %d overlapping days", a, b, len(both))
            return None
        return engle_granger(both[a].to_numpy(), both[b].to_numpy(), cfg, a, b)

    workers = _workers()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(test, pairs))
    else:
        results = [test(p) for p in pairs]
    tested = [r for r in results if r is not None]
    if report is not None:
        report.extend(tested)
    return [r for r in tested if r.is_cointegrated and not r.zero_variance]


def simulate_pair(pair: tuple[str, str], fit: OlsFit, prices_oos: pd.DataFrame,
                  config: TradingConfig, audit: AccessAudit | None = None) -> PairTradeLog | None:
    """Walk the out-of-sample closes day by day and trade the spread bands.

    The spread is ``p_a - alpha - beta * p_b`` with mean and standard deviation
    taken from the in-sample residuals. Returns ``None`` when that deviation is 0.
    """
    a, b = pair
    mu = float(np.mean(fit.residuals))
    sigma = float(np.std(fit.residuals))
    if not sigma > 0:
        log.info("pair %s/%s excluded: zero in-sample spread deviation", a, b)
        return None
    trade_log = PairTradeLog(a, b, fit.alpha, fit.beta, mu, sigma)
    legs = prices_oos[[a, b]].ffill()
    dates = legs.index
    pa, pb = legs[a].to_numpy(), legs[b].to_numpy()
    upper, lower = mu + config.entry_band * sigma, mu - config.entry_band * sigma
    stop = config.stop_band * sigma

    side, entry = None, 0.0
    for t, day in enumerate(dates):
        if audit is not None:
            audit.read("simulate", config.out_of_sample[1], day, day,
                       allowed_lo=config.out_of_sample[0])
        if not (np.isfinite(pa[t]) and np.isfinite(pb[t])):
            continue
        s = pa[t] - fit.alpha - fit.beta * pb[t]
        last = t == len(dates) - 1
        if side is not None:
            sign = 1.0 if side == LONG else -1.0
            reason = None
            if abs(s - mu) > stop:
                reason = "stop_loss"
            elif (side == SHORT and s <= mu) or (side == LONG and s >= mu):
                reason = "mean_exit"
            elif last:
                reason = "forced_close"
            if reason:
                trade_log.events.append(TradeEvent(day, "close", side, s, reason, sign * (s - entry)))
                side = None
            continue
        if last:
            break
        # no new position beyond the stop band: it would be closed immediately
        if upper < s and s - mu <= stop:
            side, entry = SHORT, s
        elif s < lower and mu - s <= stop:
            side, entry = LONG, s
        if side is not None:
            trade_log.events.append(TradeEvent(day, "open", side, s, "band_entry"))
    return trade_log


def portfolio_trajectory(logs: Sequence[PairTradeLog], prices_oos: pd.DataFrame,
                         config: TradingConfig, method: str = "",
                         audit: AccessAudit | None = None) -> PortfolioTrajectory:
    """Daily ``V = cash + unrealized`` over all pairs, each seeded with equal cash.

    Realized PnL is credited to cash on the closing day; open positions are
    marked to the day's closes (carried forward, with an audit note, if missing).
    """
    dates = prices_oos.index
    n = len(dates)
    cash = np.full(n, config.initial_cash_per_pair * len(logs), dtype=float)
    unreal = np.zeros(n)
    for lg in logs:
        raw = prices_oos[[lg.id_a, lg.id_b]]
        legs = raw.ffill()
        missing = raw.isna().any(axis=1).to_numpy() & legs.notna().all(axis=1).to_numpy()
        s = (legs[lg.id_a] - lg.alpha - lg.beta * legs[lg.id_b]).to_numpy()
        pos = {d: k for k, d in enumerate(dates)}
        side, entry, k_open = None, 0.0, 0
        for ev in lg.events:
            k = pos[ev.date]
            if ev.action == "open":
                side, entry, k_open = ev.side, ev.spread, k
            else:
                sign = 1.0 if side == LONG else -1.0
                span = slice(k_open, k)
                unreal[span] += sign * (s[span] - entry)
                if audit is not None:
                    for d in np.flatnonzero(missing[span]) + k_open:
                        audit.carried_forward.append((f"{lg.id_a}/{lg.id_b}", dates[d]))
                cash[k:] += ev.pnl
                side = None
        if side is not None:
            raise ValueError(f"pair {lg.id_a}/{lg.id_b} has an unclosed position")
    return PortfolioTrajectory(method, dates, cash, unreal)


class UndefinedSharpe(ValueError):
    pass


def sharpe_ratio(trajectory: PortfolioTrajectory | np.ndarray, periods: int = 252) -> float:
    """Annualized mean/std of daily simple returns of V (risk-free rate 0)."""
    v = trajectory.value if isinstance(trajectory, PortfolioTrajectory) else np.asarray(trajectory)
    if v.size < 30:
        raise UndefinedSharpe("need at least 30 daily observations")
    if not np.all(v[:-1] > 0):
        raise UndefinedSharpe("portfolio value is not positive (no pairs traded?)")
    r = v[1:] / v[:-1] - 1.0
    sd = float(np.std(r, ddof=1))
    if not sd > 1e-15 * max(1.0, float(np.abs(r).max())):
        raise UndefinedSharpe("portfolio returns have zero variance")
    return float(np.mean(r) / sd * math.sqrt(periods))


@dataclass
class BacktestResult:
    method: str
    candidates: list[tuple[str, str]]
    tested: list[CointResult]
    selected: list[CointResult]
    logs: list[PairTradeLog]
    trajectory: PortfolioTrajectory
    sharpe: float | None
    audit: AccessAudit

    @property
    def round_trips(self) -> int:
        return sum(len(lg.round_trip_pnl) for lg in self.logs)

    def trades_frame(self) -> pd.DataFrame:
        rows = [(lg.id_a, lg.id_b, ev.date.strftime("%Y-%m-%d"), ev.action, ev.side, ev.spread,
                 ev.pnl, ev.reason) for lg in self.logs for ev in lg.events]
        return pd.DataFrame(rows, columns=["id_a", "id_b", "date", "action", "side", "spread",
                                           "pnl", "reason"])

    def summary_row(self) -> dict:
        return {"method": self.method, "pairs_traded": sum(1 for lg in self.logs if lg.events),
                "round_trips": self.round_trips,
                "sharpe": "undefined" if self.sharpe is None else f"{self.sharpe:.10g}"}


def run_backtest(method: str, clustering: YearClustering,
                 returns: Mapping[tuple[str, int], np.ndarray], prices: pd.DataFrame,
                 config: TradingConfig) -> BacktestResult:
    audit = AccessAudit()
    candidates = preselect_pairs(clustering, returns, config)
    tested: list[CointResult] = []
    selected = select_cointegrated(candidates, prices, config, audit, tested)
    lo, hi = config.out_of_sample
    oos = prices.loc[(prices.index >= lo) & (prices.index <= hi)]
    logs = []
    for res in selected:
        lg = simulate_pair((res.id_a, res.id_b), res.fit, oos, config, audit)
        if lg is not None:
            logs.append(lg)
    traj = portfolio_trajectory(logs, oos, config, method, audit)
    try:
        sharpe = sharpe_ratio(traj)
    except UndefinedSharpe:
        sharpe = None
    return BacktestResult(method, candidates, tested, selected, logs, traj, sharpe, audit)
