"""End-to-end run: load, project, cluster, calibrate, evaluate, trade, explain.

A run is described by a TOML file; every artifact lands in one output
directory next to a ``run.manifest`` recording the config hash, seed,
timestamps and library versions.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import platform
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .backtest import BacktestResult, TradingConfig, run_backtest, trading_clustering
from .calib import (CalibrationResult, ThetaGrid, ThetaScorer, calibrate_fixed, calibrate_rolling,
                    rolling_clusterings, write_calibration)
from .cointegration import write_coint_report
from .corpus import (CorpusConfig, DataError, YearPanel, benchmark_clusters, filter_min_history,
                     load_panel, load_prices)
from .graphcluster import (DistanceGraph, MstForest, YearClustering, build_distance_graph,
                           build_mst, cut_mst, normalize_distances, read_clusters,
                           write_clusters, write_edges)
from .interp import (ImportanceReport, ZeroImpact, explain_cluster, feature_cluster_frequency,
                     top_percentile_features, write_feature_frequency, write_importance,
                     write_sparsity)
from .metrics import MC_MODES, PAIR_MEAN, evaluate, write_evaluation
from .pca import PcaModel, fit_pca, save_model, transform_many

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

METHODS = ("CD", "CDR", "SIC", "BISC", "external")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PathsConfig:
    features: Path
    returns: Path
    metadata: Path
    output_dir: Path
    prices: Path | None = None
    external_clusters: Path | None = None


@dataclass
class ClusteringConfig:
    grid: ThetaGrid = field(default_factory=ThetaGrid)
    mc_mode: str = PAIR_MEAN
    calibration: str = "both"  # fixed | rolling | both
    lookback: int = 5
    fold_fractions: tuple[float, ...] = (0.25, 0.5)
    write_edges: bool = False


@dataclass
class InterpConfig:
    enabled: bool = True
    method: str = "CD"
    top_percentile: float = 99.0
    max_clusters_per_year: int = 0  # 0 keeps every cluster; otherwise a seeded sample


@dataclass
class RunConfig:
    paths: PathsConfig
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    min_history_years: int = 1
    n_components: int | None = None
    pca_method: str = "auto"
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    trading_enabled: bool = True
    trading_methods: tuple[str, ...] = METHODS
    trading: TradingConfig = field(default_factory=TradingConfig)
    interp: InterpConfig = field(default_factory=InterpConfig)
    seed: int = 0

    def __post_init__(self):
        if self.clustering.mc_mode not in MC_MODES:
            raise ValueError(f"mc_mode must be one of {MC_MODES}")
        if self.clustering.calibration not in ("fixed", "rolling", "both"):
            raise ValueError("calibration must be fixed, rolling or both")
        for m in (*self.trading_methods, self.interp.method):
            if m not in METHODS:
                raise ValueError(f"unknown method tag {m!r}; expected one of {METHODS}")
        if self.min_history_years < 1:
            raise ValueError("min_history_years must be >= 1")

    def to_dict(self, include_output: bool = True) -> dict:
        """Config in the TOML section layout, accepted back by :func:`run_config_from_dict`."""
        def day(ts):
            return str(ts.date())

        p = self.paths
        paths = {k: (str(v) if v is not None else None) for k, v in dataclasses.asdict(p).items()}
        if not include_output:
            paths.pop("output_dir")
        t, g, cl = self.trading, self.clustering.grid, self.clustering
        return {
            "seed": self.seed,
            "paths": paths,
            "corpus": {"dim": self.corpus.dim, "k_active": self.corpus.k_active,
                       "features_format": self.corpus.features_format,
                       "raw_returns": self.corpus.raw_returns,
                       "min_history_years": self.min_history_years},
            "pca": {"n_components": self.n_components, "method": self.pca_method},
            "clustering": {"theta_start": g.start, "theta_stop": g.stop, "theta_step": g.step,
                           "mc_mode": cl.mc_mode, "calibration": cl.calibration,
                           "lookback": cl.lookback, "fold_fractions": list(cl.fold_fractions),
                           "write_edges": cl.write_edges},
            "trading": {"enabled": self.trading_enabled, "methods": list(self.trading_methods),
                        "in_sample_start": day(t.in_sample[0]),
                        "in_sample_end": day(t.in_sample[1]),
                        "out_of_sample_start": day(t.out_of_sample[0]),
                        "out_of_sample_end": day(t.out_of_sample[1]),
                        "preselect_corr_min": t.preselect_corr_min, "coint_p_max": t.coint_p_max,
                        "entry_band": t.entry_band, "stop_band": t.stop_band,
                        "transaction_cost": t.transaction_cost,
                        "initial_cash_per_pair": t.initial_cash_per_pair,
                        "min_overlap_months": t.min_overlap_months,
                        "min_coint_obs": t.min_coint_obs},
            "interp": dataclasses.asdict(self.interp),
        }

    def config_hash(self) -> str:
        """SHA-256 of everything that can influence artifacts (the output location excluded)."""
        text = json.dumps(self.to_dict(include_output=False), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()


_SECTIONS = {
    "paths": {"features", "returns", "metadata", "prices", "external_clusters", "output_dir"},
    "corpus": {"dim", "k_active", "features_format", "raw_returns", "min_history_years"},
    "pca": {"n_components", "method"},
    "clustering": {"theta_start", "theta_stop", "theta_step", "mc_mode", "calibration",
                   "lookback", "fold_fractions", "write_edges"},
    "trading": {"enabled", "methods", "in_sample_start", "in_sample_end", "out_of_sample_start",
                "out_of_sample_end", "preselect_corr_min", "coint_p_max", "entry_band",
                "stop_band", "transaction_cost", "initial_cash_per_pair", "min_overlap_months",
                "min_coint_obs"},
    "interp": {"enabled", "method", "top_percentile", "max_clusters_per_year"},
}


def trading_config_from_dict(t: Mapping[str, Any]) -> TradingConfig:
    """Trading settings from a ``[trading]`` table; absent keys keep their defaults."""
    d = TradingConfig()
    return TradingConfig(
        in_sample=(t.get("in_sample_start", str(d.in_sample[0].date())),
                   t.get("in_sample_end", str(d.in_sample[1].date()))),
        out_of_sample=(t.get("out_of_sample_start", str(d.out_of_sample[0].date())),
                       t.get("out_of_sample_end", str(d.out_of_sample[1].date()))),
        preselect_corr_min=float(t.get("preselect_corr_min", d.preselect_corr_min)),
        coint_p_max=float(t.get("coint_p_max", d.coint_p_max)),
        entry_band=float(t.get("entry_band", d.entry_band)),
        stop_band=float(t.get("stop_band", d.stop_band)),
        transaction_cost=float(t.get("transaction_cost", d.transaction_cost)),
        initial_cash_per_pair=float(t.get("initial_cash_per_pair", d.initial_cash_per_pair)),
        min_overlap_months=int(t.get("min_overlap_months", d.min_overlap_months)),
        min_coint_obs=int(t.get("min_coint_obs", d.min_coint_obs)))


def run_config_from_dict(raw: Mapping[str, Any], base_dir: str | Path = ".") -> RunConfig:
    """Build a :class:`RunConfig` from parsed TOML; relative paths resolve against ``base_dir``."""
    base = Path(base_dir)
    unknown_top = set(raw) - set(_SECTIONS) - {"seed"}
    if unknown_top:
        raise ValueError(f"unknown config section(s): {sorted(unknown_top)}")
    for sec, keys in _SECTIONS.items():
        extra = set(raw.get(sec, {})) - keys
        if extra:
            raise ValueError(f"unknown key(s) in [{sec}]: {sorted(extra)}")

    p = raw.get("paths", {})

    def path(key, required=True):
        val = p.get(key)
        if not val:
            if required:
                raise ValueError(f"[paths] {key} is required")
            return None
        q = Path(val)
        return q if q.is_absolute() else (base / q).resolve()

    paths = PathsConfig(path("features"), path("returns"), path("metadata"), path("output_dir"),
                        path("prices", False), path("external_clusters", False))
    c = raw.get("corpus", {})
    corpus = CorpusConfig(dim=int(c.get("dim", CorpusConfig.dim)),
                          k_active=int(c.get("k_active", CorpusConfig.k_active)),
                          features_format=c.get("features_format", "summed"),
                          raw_returns=bool(c.get("raw_returns", False)))
    pc = raw.get("pca", {})
    cl = raw.get("clustering", {})
    grid_default = ThetaGrid()
    clustering = ClusteringConfig(
        grid=ThetaGrid(float(cl.get("theta_start", grid_default.start)),
                       float(cl.get("theta_stop", grid_default.stop)),
                       float(cl.get("theta_step", grid_default.step))),
        mc_mode=cl.get("mc_mode", PAIR_MEAN),
        calibration=cl.get("calibration", "both"),
        lookback=int(cl.get("lookback", 5)),
        fold_fractions=tuple(float(f) for f in cl.get("fold_fractions", (0.25, 0.5))),
        write_edges=bool(cl.get("write_edges", False)))
    t = raw.get("trading", {})
    trading = trading_config_from_dict(t)
    it = raw.get("interp", {})
    interp = InterpConfig(enabled=bool(it.get("enabled", True)),
                          method=it.get("method", "CD"),
                          top_percentile=float(it.get("top_percentile", 99.0)),
                          max_clusters_per_year=int(it.get("max_clusters_per_year", 0)))
    n_comp = pc.get("n_components")
    return RunConfig(paths=paths, corpus=corpus,
                     min_history_years=int(c.get("min_history_years", 1)),
                     n_components=int(n_comp) if n_comp else None,
                     pca_method=pc.get("method", "auto"), clustering=clustering,
                     trading_enabled=bool(t.get("enabled", True)),
                     trading_methods=tuple(t.get("methods", METHODS)), trading=trading,
                     interp=interp, seed=int(raw.get("seed", 0)))


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    return run_config_from_dict(raw, path.parent)


def load_manifest_config(path: str | Path) -> RunConfig:
    """Rebuild the exact configuration recorded in a ``run.manifest``."""
    manifest = json.loads(Path(path).read_text())
    try:
        raw = manifest["config"]
    except KeyError:
        raise ValueError(f"{path}: manifest has no config") from None
    return run_config_from_dict(raw, Path(path).parent)


@dataclass
class YearGraphs:
    graphs: dict[int, DistanceGraph]
    msts: dict[int, MstForest]


def build_year_graphs(panels: list[YearPanel], model: PcaModel) -> YearGraphs:
    graphs, msts = {}, {}
    for p in panels:
        if len(p) < 3:
            log.warning("year %d has %d companies; skipped for clustering", p.year, len(p))
            continue
        ids = p.companies
        g = transform_many(model, [p.summed_features[c] for c in ids])
        graph = normalize_distances(build_distance_graph(p.year, ids, g))
        graphs[p.year] = graph
        msts[p.year] = build_mst(graph)
    return YearGraphs(graphs, msts)


def explain_clusterings(clusterings: list[YearClustering], panels: Mapping[int, YearPanel],
                        graphs: Mapping[int, DistanceGraph], model: PcaModel,
                        max_per_year: int = 0, seed: int = 0) -> list[ImportanceReport]:
    """Importance report for every cluster of size >= 2 (optionally a seeded sample per year)."""
    rng = np.random.default_rng(seed)
    reports = []
    for yc in sorted(clusterings, key=lambda c: c.year):
        ids = [k for k, c in enumerate(yc.clusters) if len(c) >= 2]
        if max_per_year and len(ids) > max_per_year:
            ids = sorted(rng.choice(ids, size=max_per_year, replace=False).tolist())
        panel = panels[yc.year]
        for k in ids:
            members = [panel.summed_features[c] for c in sorted(yc.clusters[k])]
            try:
                reports.append(explain_cluster(yc.year, k, members, model,
                                               graphs[yc.year].sigma))
            except ZeroImpact:
                log.warning("cluster %d in %d has no feature with positive impact", k, yc.year)
    return reports


@dataclass
class RunResult:
    output_dir: Path
    clusterings: dict[str, list[YearClustering]]
    calibration: list[CalibrationResult]
    backtests: dict[str, BacktestResult]
    reports: list[ImportanceReport]


def _stage(name: str):
    class _Ctx:
        def __enter__(self):
            log.info("stage %s", name)

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not isinstance(exc, PipelineError):
                raise PipelineError(name, exc) from exc
            return False
    return _Ctx()


def _write_manifest(cfg: RunConfig, out: Path, started: str, status: str,
                    stage: str | None = None) -> None:
    manifest = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "status": status,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "versions": {"saecluster": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__,
                     "pandas": pd.__version__},
        "config": cfg.to_dict(),
    }
    if stage:
        manifest["failed_stage"] = stage
    (out / "run.manifest").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def run_pipeline(cfg: RunConfig) -> RunResult:
    """Execute every stage and return the in-memory results.

    On failure a ``FAILED`` marker naming the stage is written, outputs produced
    so far are kept, and :class:`PipelineError` is raised.
    """
    out = cfg.paths.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "FAILED").unlink(missing_ok=True)
    started = datetime.now(timezone.utc).isoformat(timespec="seconds")
    try:
        result = _run(cfg, out)
    except PipelineError as err:
        (out / "FAILED").write_text(f"stage = {err.stage}\nerror = {err.cause}\n")
        _write_manifest(cfg, out, started, "failed", err.stage)
        raise
    _write_manifest(cfg, out, started, "ok")
    return result


def _run(cfg: RunConfig, out: Path) -> RunResult:
    with _stage("load"):
        panels, report = load_panel(cfg.paths.features, cfg.paths.returns, cfg.paths.metadata,
                                    cfg.corpus)
        if cfg.min_history_years > 1:
            panels = filter_min_history(panels, cfg.min_history_years)
        report.write(out / "load_report.txt")
        if not panels:
            raise ValueError("no complete company-years after loading")
        by_year = {p.year: p for p in panels}
        returns_by_year = {p.year: p.returns for p in panels}

    with _stage("pca"):
        model = fit_pca([v for p in panels for v in p.summed_features.values()],
                        cfg.n_components, cfg.pca_method)
        save_model(model, out / "pca_model.bin")
        model.variance_table().to_csv(out / "pca_variance.csv", index=False, float_format="%.10g")

    with _stage("cluster"):
        yg = build_year_graphs(panels, model)
        if cfg.clustering.write_edges:
            (out / "edges.csv").unlink(missing_ok=True)
            for y in sorted(yg.graphs):
                write_edges(yg.graphs[y], out / "edges.csv")

    clusterings: dict[str, list[YearClustering]] = {}
    calibrations: list[CalibrationResult] = []
    with _stage("calibrate"):
        cc = cfg.clustering
        scorer = ThetaScorer(yg.msts, returns_by_year, cc.mc_mode)
        if cc.calibration in ("fixed", "both"):
            fixed = calibrate_fixed(cc.grid, yg.msts, returns_by_year, cc.mc_mode,
                                    cc.fold_fractions, scorer=scorer)
            calibrations.append(fixed)
            clusterings["CD"] = [cut_mst(yg.msts[y], fixed.theta_star, "CD")
                                 for y in sorted(yg.msts)]
        if cc.calibration in ("rolling", "both"):
            rolling = calibrate_rolling(cc.grid, yg.msts, returns_by_year, cc.mc_mode,
                                        cc.lookback)
            calibrations.append(rolling)
            clusterings["CDR"] = rolling_clusterings(rolling, yg.msts, "CDR")
            rolling.series_frame().to_csv(out / "calibration_rolling_series.csv", index=False,
                                          float_format="%.10g")
        write_calibration(calibrations, out / "calibration.csv")

    with _stage("benchmarks"):
        clusterings["SIC"] = [benchmark_clusters(p, "SIC") for p in panels]
        clusterings["BISC"] = [benchmark_clusters(p, "BISC") for p in panels]
        if cfg.paths.external_clusters is not None:
            ext = read_clusters(cfg.paths.external_clusters, "external")
            for y, yc in ext.items():
                unknown = sorted(yc.companies - set(by_year[y].records)) if y in by_year else []
                if unknown:
                    raise DataError(f"{cfg.paths.external_clusters}: unknown company id(s) "
                                    f"in {y}: {unknown[:5]}")
            clusterings["external"] = [ext[y] for y in sorted(ext) if y in by_year]
        for method, cl in clusterings.items():
            write_clusters(cl, out / f"clusters_{method}.csv")

    with _stage("evaluate"):
        reports = [evaluate(m, clusterings[m], returns_by_year, cfg.clustering.mc_mode)
                   for m in METHODS if m in clusterings]
        write_evaluation(reports, out / "evaluation.csv")

    backtests: dict[str, BacktestResult] = {}
    if cfg.trading_enabled:
        with _stage("backtest"):
            if cfg.paths.prices is None:
                raise ValueError("trading is enabled but no prices file is configured")
            prices = load_prices(cfg.paths.prices)
            flat_returns = {(c, p.year): r for p in panels for c, r in p.returns.items()}
            summary = []
            for method in cfg.trading_methods:
                if method not in clusterings:
                    continue
                clustering = trading_clustering(clusterings[method], cfg.trading)
                if clustering is None:
                    log.warning("%s has no clustering inside the in-sample window", method)
                    summary.append({"method": method, "pairs_traded": 0, "round_trips": 0,
                                    "sharpe": "undefined"})
                    continue
                bt = run_backtest(method, clustering, flat_returns, prices, cfg.trading)
                if bt.audit.violations:
                    raise RuntimeError(f"{method}: {len(bt.audit.violations)} out-of-window "
                                       "price reads")
                backtests[method] = bt
                write_coint_report(bt.tested, out / f"cointegration_{method}.csv")
                bt.trades_frame().to_csv(out / f"trades_{method}.csv", index=False,
                                         float_format="%.10g")
                bt.trajectory.to_frame().to_csv(out / f"trajectory_{method}.csv", index=False,
                                                float_format="%.10g")
                summary.append(bt.summary_row())
            pd.DataFrame(summary, columns=["method", "pairs_traded", "round_trips", "sharpe"]
                         ).to_csv(out / "backtest_summary.csv", index=False)

    reports_imp: list[ImportanceReport] = []
    if cfg.interp.enabled:
        with _stage("interpret"):
            method = cfg.interp.method
            if method not in clusterings:
                raise ValueError(f"no {method} clustering to explain")
            reports_imp = explain_clusterings(clusterings[method], by_year, yg.graphs, model,
                                              cfg.interp.max_clusters_per_year, cfg.seed)
            write_importance(reports_imp, out / "importance.csv")
            write_sparsity(reports_imp, out / "sparsity.csv")
            if reports_imp:
                freq = feature_cluster_frequency(reports_imp)
                top = top_percentile_features(freq, cfg.interp.top_percentile)
            else:
                freq, top = {}, []
            write_feature_frequency(freq, out / "feature_frequency.csv", top)

    return RunResult(out, clusterings, calibrations, backtests, reports_imp)
