"""Command line entry point: ``saecluster <subcommand> ...``.

Exit codes: 0 on success, 1 on data/stage errors, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from . import __version__
from .backtest import TradingConfig, run_backtest, trading_clustering
from .calib import (ThetaGrid, calibrate_fixed, calibrate_rolling, rolling_clusterings,
                    write_calibration)
from .cointegration import write_coint_report
from .corpus import (CorpusConfig, LoadReport, YearPanel, filter_min_history, load_panel,
                     load_prices, monthly_returns_from_prices, parse_doc_id, read_returns)
from .graphcluster import cut_mst, read_clusters, write_clusters, write_edges
from .interp import (feature_cluster_frequency, top_percentile_features, write_feature_frequency,
                     write_importance, write_sparsity)
from .metrics import MC_MODES, PAIR_MEAN, evaluate, write_evaluation
from .pca import fit_pca, load_model, save_model
from .pipeline import (PipelineError, YearGraphs, build_year_graphs, explain_clusterings,
                       load_manifest_config, load_run_config, run_pipeline, tomllib,
                       trading_config_from_dict)
from .sparsefeat import (DEFAULT_DIM, DEFAULT_K_ACTIVE, activation_histogram,
                         load_summed_features, load_token_activations, sum_documents,
                         write_summed_features)
from .synth import SynthConfig, generate_universe, write_universe

log = logging.getLogger("saecluster")


def _panels_from_features(path, dim):
    """Year panels holding only features (no metadata or returns), keyed by doc id."""
    by_year: dict[int, dict] = {}
    for v in load_summed_features(path, dim):
        cid, year = parse_doc_id(v.doc_id)
        by_year.setdefault(year, {})[cid] = v
    return [YearPanel(y, {c: None for c in sorted(f)}, {}, dict(sorted(f.items())))
            for y, f in sorted(by_year.items())]


def _returns_by_year(path, raw=False) -> dict[int, dict[str, np.ndarray]]:
    out: dict[int, dict[str, np.ndarray]] = {}
    for (cid, year), r in read_returns(path, LoadReport(), raw=raw).items():
        out.setdefault(year, {})[cid] = r
    return out


def _mkdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _grid(args) -> ThetaGrid:
    return ThetaGrid(args.theta_start, args.theta_stop, args.theta_step)


def cmd_ingest(args) -> int:
    cfg = CorpusConfig(args.dim, args.k_active, args.features_format, args.raw_returns)
    panels, report = load_panel(args.features, args.returns, args.metadata, cfg)
    if args.min_years > 1:
        panels = filter_min_history(panels, args.min_years)
    if args.report:
        report.write(args.report)
    sys.stdout.write(report.to_text())
    for p in panels:
        print(f"year {p.year}: {len(p)} companies")
    return 0


def cmd_features_sum(args) -> int:
    vectors = sum_documents(load_token_activations(args.tokens, args.dim, args.k_active))
    write_summed_features(vectors, args.out)
    print(f"{len(vectors)} documents written to {args.out}")
    return 0


def cmd_features_hist(args) -> int:
    hist = activation_histogram(load_summed_features(args.features, args.dim), args.bin_width,
                                args.clip_max)
    if args.out:
        hist.to_csv(args.out, index=False, float_format="%.10g")
    else:
        sys.stdout.write(hist.to_csv(index=False, float_format="%.10g"))
    return 0


def cmd_pca_fit(args) -> int:
    vectors = load_summed_features(args.features, args.dim)
    model = fit_pca(vectors, args.n_components, args.method)
    save_model(model, args.out)
    if args.variance:
        model.variance_table().to_csv(args.variance, index=False, float_format="%.10g")
    print(f"{model.n_components} components, cumulative explained variance "
          f"{model.explained_variance_ratio.sum():.6f}")
    return 0


def cmd_pca_info(args) -> int:
    model = load_model(args.model)
    print(f"dim = {model.dim}\nn_components = {model.n_components}\n"
          f"total_variance = {model.total_variance:.10g}")
    table = model.variance_table()
    sys.stdout.write(table.head(args.rows).to_csv(index=False, float_format="%.10g"))
    return 0


def _graphs(args) -> YearGraphs:
    model = load_model(args.model)
    return build_year_graphs(_panels_from_features(args.features, model.dim), model)


def cmd_cluster(args) -> int:
    yg = _graphs(args)
    clusterings = [cut_mst(yg.msts[y], args.theta, args.method) for y in sorted(yg.msts)]
    write_clusters(clusterings, args.out)
    if args.edges:
        Path(args.edges).unlink(missing_ok=True)
        for y in sorted(yg.graphs):
            write_edges(yg.graphs[y], args.edges)
    print(f"{sum(len(c) for c in clusterings)} clusters over {len(clusterings)} years")
    return 0


def cmd_calibrate(args) -> int:
    yg = _graphs(args)
    rets = _returns_by_year(args.returns, args.raw_returns)
    results = []
    if args.variant in ("fixed", "both"):
        fixed = calibrate_fixed(_grid(args), yg.msts, rets, args.mode)
        results.append(fixed)
        print(f"fixed theta* = {fixed.theta_star:.1f}")
        if args.clusters_dir:
            write_clusters([cut_mst(yg.msts[y], fixed.theta_star, "CD") for y in sorted(yg.msts)],
                           _mkdir(args.clusters_dir) / "clusters_CD.csv")
    if args.variant in ("rolling", "both"):
        rolling = calibrate_rolling(_grid(args), yg.msts, rets, args.mode, args.lookback)
        results.append(rolling)
        for y, t in sorted(rolling.thetas.items()):
            print(f"rolling {y}: theta* = {t:.1f}, out-of-sample MC = {rolling.oos_mc[y]:.6f}")
        if args.series:
            rolling.series_frame().to_csv(args.series, index=False, float_format="%.10g")
        if args.clusters_dir:
            write_clusters(rolling_clusterings(rolling, yg.msts, "CDR"),
                           _mkdir(args.clusters_dir) / "clusters_CDR.csv")
    write_calibration(results, args.out)
    return 0


def cmd_evaluate(args) -> int:
    rets = _returns_by_year(args.returns, args.raw_returns)
    reports = []
    for item in args.clusters:
        method, _, path = item.rpartition("=")
        method = method or Path(path).stem
        reports.append(evaluate(method, read_clusters(path, method).values(), rets, args.mode))
    if args.out:
        write_evaluation(reports, args.out)
    for r in reports:
        overall = f"{r.overall:.6f}" if r.years else "undefined"
        print(f"{r.method}: MC ({r.mode}) = {overall}")
    return 0


def _trading_config(path) -> TradingConfig:
    if path is None:
        return TradingConfig()
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    return trading_config_from_dict(raw.get("trading", raw))


def cmd_backtest(args) -> int:
    cfg = _trading_config(args.config)
    prices = load_prices(args.prices)
    if args.returns:
        flat = read_returns(args.returns, LoadReport(), raw=args.raw_returns)
    else:
        flat = monthly_returns_from_prices(prices)
    clusterings = read_clusters(args.clusters, args.method)
    clustering = trading_clustering(clusterings, cfg)
    if clustering is None:
        raise ValueError(f"{args.clusters} has no year inside the in-sample window")
    bt = run_backtest(args.method, clustering, flat, prices, cfg)
    out = _mkdir(args.out_dir)
    write_coint_report(bt.tested, out / f"cointegration_{args.method}.csv")
    bt.trades_frame().to_csv(out / f"trades_{args.method}.csv", index=False,
                             float_format="%.10g")
    bt.trajectory.to_frame().to_csv(out / f"trajectory_{args.method}.csv", index=False,
                                    float_format="%.10g")
    pd.DataFrame([bt.summary_row()]).to_csv(out / "backtest_summary.csv", index=False)
    row = bt.summary_row()
    print(f"{row['method']}: {len(bt.candidates)} candidates, {len(bt.selected)} cointegrated, "
          f"{row['round_trips']} round trips, Sharpe {row['sharpe']}")
    return 0


def cmd_interpret(args) -> int:
    model = load_model(args.model)
    panels = _panels_from_features(args.features, model.dim)
    yg = build_year_graphs(panels, model)
    by_year = {p.year: p for p in panels}
    clusterings = [c for y, c in sorted(read_clusters(args.clusters, "CD").items())
                   if y in yg.graphs]
    reports = explain_clusterings(clusterings, by_year, yg.graphs, model, args.max_clusters,
                                  args.seed)
    out = _mkdir(args.out_dir)
    write_importance(reports, out / "importance.csv")
    write_sparsity(reports, out / "sparsity.csv")
    freq = feature_cluster_frequency(reports) if reports else {}
    write_feature_frequency(freq, out / "feature_frequency.csv",
                            top_percentile_features(freq, args.top_percentile))
    if reports:
        print(f"{len(reports)} clusters explained, median sparsity ratio "
              f"{np.median([r.sparsity_ratio for r in reports]):.6f}")
    return 0


def cmd_synth(args) -> int:
    cfg = SynthConfig(n_companies=args.n_companies, n_sectors=args.n_sectors,
                      start_year=args.start_year, n_years=args.n_years,
                      feature_dim=args.feature_dim, signature_noise=args.signature_noise,
                      pairs_per_sector=args.pairs_per_sector, n_rows=args.n_rows,
                      with_prices=not args.no_prices, seed=args.seed)
    universe = generate_universe(cfg, keep_tokens=args.tokens)
    paths = write_universe(universe, args.out_dir, tokens=args.tokens)
    if args.write_config:
        _write_run_config(Path(args.out_dir), cfg, universe.prices is not None)
    for name, p in sorted(paths.items()):
        print(f"{name}: {p}")
    return 0


def _write_run_config(out: Path, cfg: SynthConfig, with_prices: bool) -> None:
    years = cfg.years
    lines = [f"seed = {cfg.seed}", "", "[paths]", 'features = "features.csv"',
             'returns = "returns.csv"', 'metadata = "metadata.csv"', 'output_dir = "run"']
    if with_prices:
        lines.append('prices = "prices.csv"')
    lines += ["", "[corpus]", f"dim = {cfg.feature_dim}", "", "[trading]",
              f"enabled = {'true' if with_prices else 'false'}"]
    if with_prices and len(years) >= 2:
        split = years[0] + max(1, (len(years) * 2) // 3) - 1
        lines += [f'in_sample_start = "{years[0]}-01-01"', f'in_sample_end = "{split}-12-31"',
                  f'out_of_sample_start = "{split + 1}-01-01"',
                  f'out_of_sample_end = "{years[-1]}-12-31"']
    (out / "run.toml").write_text("\n".join(lines) + "\n")


def cmd_run(args) -> int:
    cfg = load_run_config(args.config) if args.config else load_manifest_config(args.manifest)
    if args.output_dir:
        cfg.paths.output_dir = Path(args.output_dir).resolve()
    try:
        result = run_pipeline(cfg)
    except PipelineError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    print(f"run complete: {result.output_dir}")
    return 0


def _add_grid(p):
    g = ThetaGrid()
    p.add_argument("--theta-start", type=float, default=g.start)
    p.add_argument("--theta-stop", type=float, default=g.stop)
    p.add_argument("--theta-step", type=float, default=g.step)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="saecluster", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate and join metadata, returns and features")
    p.add_argument("--features", required=True)
    p.add_argument("--returns", required=True)
    p.add_argument("--metadata", required=True)
    p.add_argument("--features-format", choices=("summed", "tokens"), default="summed")
    p.add_argument("--dim", type=int, default=DEFAULT_DIM)
    p.add_argument("--k-active", type=int, default=DEFAULT_K_ACTIVE)
    p.add_argument("--raw-returns", action="store_true", help="apply log(1+r) on ingest")
    p.add_argument("--min-years", type=int, default=1)
    p.add_argument("--report", help="write the load report here")
    p.set_defaults(func=cmd_ingest)

    feats = sub.add_parser("features", help="feature summing and histograms")
    fsub = feats.add_subparsers(dest="features_command", required=True)
    p = fsub.add_parser("sum", help="sum token activations per document")
    p.add_argument("--tokens", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, default=DEFAULT_DIM)
    p.add_argument("--k-active", type=int, default=DEFAULT_K_ACTIVE)
    p.set_defaults(func=cmd_features_sum)
    p = fsub.add_parser("hist", help="histogram of summed activation values")
    p.add_argument("--features", required=True)
    p.add_argument("--bin-width", type=float, default=0.1)
    p.add_argument("--clip-max", type=float, default=10.0)
    p.add_argument("--dim", type=int, default=DEFAULT_DIM)
    p.add_argument("--out")
    p.set_defaults(func=cmd_features_hist)

    pca = sub.add_parser("pca", help="fit or inspect the global PCA model")
    psub = pca.add_subparsers(dest="pca_command", required=True)
    p = psub.add_parser("fit")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, default=DEFAULT_DIM)
    p.add_argument("--n-components", type=int)
    p.add_argument("--method", choices=("auto", "svd", "cov", "implicit"), default="auto")
    p.add_argument("--variance", help="write the explained-variance table here")
    p.set_defaults(func=cmd_pca_fit)
    p = psub.add_parser("info")
    p.add_argument("--model", required=True)
    p.add_argument("--rows", type=int, default=20)
    p.set_defaults(func=cmd_pca_info)

    p = sub.add_parser("cluster", help="cut every year's MST at a fixed threshold")
    p.add_argument("--features", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--theta", type=float, required=True)
    p.add_argument("--method", default="CD")
    p.add_argument("--out", required=True)
    p.add_argument("--edges", help="also dump every year's complete distance graph")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("calibrate", help="choose the MST cut-off")
    p.add_argument("--features", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--returns", required=True)
    p.add_argument("--raw-returns", action="store_true")
    p.add_argument("--variant", choices=("fixed", "rolling", "both"), default="both")
    p.add_argument("--mode", choices=MC_MODES, default=PAIR_MEAN)
    p.add_argument("--lookback", type=int, default=5)
    p.add_argument("--out", required=True)
    p.add_argument("--series", help="rolling year,theta_star,mc_oos series")
    p.add_argument("--clusters-dir", help="write clusters_CD.csv / clusters_CDR.csv here")
    _add_grid(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="mean intra-cluster correlation of clusterings")
    p.add_argument("--clusters", required=True, nargs="+", metavar="[METHOD=]PATH")
    p.add_argument("--returns", required=True)
    p.add_argument("--raw-returns", action="store_true")
    p.add_argument("--mode", choices=MC_MODES, default=PAIR_MEAN)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("backtest", help="pairs trading within clusters")
    p.add_argument("--clusters", required=True)
    p.add_argument("--prices", required=True)
    p.add_argument("--config", help="TOML file with a [trading] table")
    p.add_argument("--returns", help="monthly returns (derived from prices when omitted)")
    p.add_argument("--raw-returns", action="store_true")
    p.add_argument("--method", default="CD")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("interpret", help="feature importance per cluster")
    p.add_argument("--clusters", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--top-percentile", type=float, default=99.0)
    p.add_argument("--max-clusters", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_interpret)

    d = SynthConfig()
    p = sub.add_parser("synth", help="generate a synthetic universe")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-companies", type=int, default=d.n_companies)
    p.add_argument("--n-sectors", type=int, default=d.n_sectors)
    p.add_argument("--start-year", type=int, default=d.start_year)
    p.add_argument("--n-years", type=int, default=d.n_years)
    p.add_argument("--feature-dim", type=int, default=d.feature_dim)
    p.add_argument("--signature-noise", type=float, default=d.signature_noise)
    p.add_argument("--pairs-per-sector", type=int, default=d.pairs_per_sector)
    p.add_argument("--n-rows", type=int)
    p.add_argument("--no-prices", action="store_true")
    p.add_argument("--tokens", action="store_true", help="also write token-level activations")
    p.add_argument("--write-config", action="store_true", help="also write run.toml")
    p.add_argument("--seed", type=int, default=d.seed)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="run the whole pipeline from a TOML config or a manifest")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="TOML run configuration")
    src.add_argument("--manifest", help="repeat the run recorded in this run.manifest")
    p.add_argument("--output-dir", help="override [paths] output_dir")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
