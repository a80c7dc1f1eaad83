import filecmp
import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from saecluster.cli import build_parser, main
from saecluster.graphcluster import YearClustering, write_clusters
from saecluster.pipeline import PipelineError, load_run_config, run_pipeline

from test_metrics import equicorrelated

SYNTH_ARGS = ["--n-companies", "48", "--n-sectors", "4", "--start-year", "2008",
              "--n-years", "10", "--feature-dim", "1024", "--seed", "3"]


@pytest.fixture(scope="module")
def universe_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("universe")
    assert main(["synth", "--out-dir", str(out), "--write-config", "--tokens", *SYNTH_ARGS]) == 0
    return out


@pytest.fixture(scope="module")
def finished_run(universe_dir):
    cfg = load_run_config(universe_dir / "run.toml")
    result = run_pipeline(cfg)
    return cfg, result


def edit_config(src_dir: Path, dst: Path, drop=(), replace=None) -> Path:
    text = (src_dir / "run.toml").read_text()
    lines = [ln for ln in text.splitlines() if not any(ln.startswith(d) for d in drop)]
    text = "\n".join(lines) + "\n"
    for old, new in (replace or {}).items():
        text = text.replace(old, new)
    # keep the universe's inputs but write into dst
    text = text.replace('output_dir = "run"', f'output_dir = "{dst.as_posix()}"')
    path = src_dir / f"{dst.name}.toml"
    path.write_text(text)
    return path


EXPECTED = ["load_report.txt", "pca_model.bin", "pca_variance.csv", "calibration.csv",
            "calibration_rolling_series.csv", "evaluation.csv", "backtest_summary.csv",
            "importance.csv", "sparsity.csv", "feature_frequency.csv", "run.manifest"]


def test_run_writes_every_artifact(finished_run):
    cfg, result = finished_run
    out = result.output_dir
    for name in EXPECTED:
        assert (out / name).exists(), name
    for method in ("CD", "CDR", "SIC", "BISC"):
        assert (out / f"clusters_{method}.csv").exists()
        for kind in ("cointegration", "trades", "trajectory"):
            assert (out / f"{kind}_{method}.csv").exists()
    assert not (out / "FAILED").exists()
    manifest = json.loads((out / "run.manifest").read_text())
    assert manifest["status"] == "ok" and manifest["config_hash"] == cfg.config_hash()
    assert manifest["seed"] == 3 and "numpy" in manifest["versions"]
    ev = pd.read_csv(out / "evaluation.csv", dtype={"year": str})
    assert set(ev.method) == {"CD", "CDR", "SIC", "BISC"}
    traj = pd.read_csv(out / "trajectory_CD.csv")
    np.testing.assert_allclose(traj.V, traj.cash + traj.unrealized, atol=1e-6)


def test_rerun_from_manifest_is_byte_identical(finished_run, tmp_path):
    _, result = finished_run
    again = tmp_path / "again"
    assert main(["run", "--manifest", str(result.output_dir / "run.manifest"),
                 "--output-dir", str(again)]) == 0
    first = json.loads((result.output_dir / "run.manifest").read_text())
    second = json.loads((again / "run.manifest").read_text())
    assert second["config_hash"] == first["config_hash"]
    csvs = sorted(result.output_dir.glob("*.csv"))
    assert len(csvs) > 10
    for f in csvs:
        assert filecmp.cmp(f, again / f.name, shallow=False), f.name


def test_missing_prices_aborts_in_backtest(universe_dir, tmp_path):
    path = edit_config(universe_dir, tmp_path / "noprices", drop=["prices ="])
    with pytest.raises(PipelineError) as err:
        run_pipeline(load_run_config(path))
    assert err.value.stage == "backtest"
    marker = (tmp_path / "noprices" / "FAILED").read_text()
    assert "stage = backtest" in marker
    assert (tmp_path / "noprices" / "evaluation.csv").exists()
    assert json.loads((tmp_path / "noprices" / "run.manifest").read_text())["status"] == "failed"
    assert main(["run", "--config", str(path)]) == 1


def test_trading_disabled_skips_backtest(universe_dir, tmp_path):
    path = edit_config(universe_dir, tmp_path / "notrade",
                       replace={"enabled = true": "enabled = false"})
    run_pipeline(load_run_config(path))
    out = tmp_path / "notrade"
    assert not list(out.glob("trades_*")) and not (out / "backtest_summary.csv").exists()
    assert (out / "importance.csv").exists() and (out / "evaluation.csv").exists()


def test_external_clusters_are_evaluated_and_checked(universe_dir, tmp_path):
    gt = pd.read_csv(universe_dir / "ground_truth.csv", dtype={"company_id": str})
    ext = [YearClustering(int(y), tuple(frozenset(m.company_id) for _, m in g.groupby("sector")),
                          "external") for y, g in gt.groupby("year")]
    write_clusters(ext, tmp_path / "ext.csv")
    path = edit_config(universe_dir, tmp_path / "ext",
                       replace={"[corpus]": f'external_clusters = "{tmp_path / "ext.csv"}"\n\n'
                                            "[corpus]",
                                "enabled = true": "enabled = false"})
    run_pipeline(load_run_config(path))
    ev = pd.read_csv(tmp_path / "ext" / "evaluation.csv", dtype={"year": str})
    assert "external" in set(ev.method)
    bad = pd.read_csv(tmp_path / "ext.csv")
    bad.loc[0, "company_id"] = "NOPE"
    bad.to_csv(tmp_path / "ext.csv", index=False)
    with pytest.raises(PipelineError) as err:
        run_pipeline(load_run_config(path))
    assert err.value.stage == "benchmarks"


def test_unknown_config_key_is_rejected(universe_dir, tmp_path):
    path = edit_config(universe_dir, tmp_path / "bad", replace={"[corpus]": "[corpus]\ncolour = 1"})
    with pytest.raises(ValueError):
        load_run_config(path)


def subcommands():
    parser = build_parser()
    action = next(a for a in parser._actions if a.dest == "command")
    out = []
    for name, sub in action.choices.items():
        nested = [a for a in sub._actions if a.dest.endswith("_command")]
        if nested:
            out.extend([name, child] for child in nested[0].choices)
        else:
            out.append([name])
    return out


@pytest.mark.parametrize("cmd", subcommands(), ids=" ".join)
def test_help_exits_zero(cmd):
    with pytest.raises(SystemExit) as exc:
        main([*cmd, "--help"])
    assert exc.value.code == 0


def test_usage_errors_exit_two():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["cluster", "--features", "x"])
    assert exc.value.code == 2


def test_evaluate_modes_diverge_on_four_company_fixture(tmp_path, capsys):
    r = equicorrelated(4, 0.5)  # 5 observations per series; pad to 12 months
    r = np.hstack([r, r, r[:, :2]])
    rows = [(c, 2001, m + 1, r[k, m]) for k, c in enumerate("abcd") for m in range(12)]
    pd.DataFrame(rows, columns=["company_id", "year", "month", "log_return"]).to_csv(
        tmp_path / "returns.csv", index=False)
    write_clusters([YearClustering(2001, (frozenset("abcd"),), "CD")], tmp_path / "c.csv")
    mc = {}
    for mode in ("pair_mean", "paper_literal"):
        out = tmp_path / f"{mode}.csv"
        assert main(["evaluate", "--clusters", f"CD={tmp_path / 'c.csv'}", "--returns",
                     str(tmp_path / "returns.csv"), "--mode", mode, "--out", str(out)]) == 0
        df = pd.read_csv(out, dtype={"year": str})
        mc[mode] = float(df.loc[df.year == "overall", "mc"].iloc[0])
    assert mc["pair_mean"] != mc["paper_literal"]
    assert mc["paper_literal"] == pytest.approx(mc["pair_mean"] * 6 / 4)


def test_subcommands_compose(universe_dir, tmp_path):
    u = universe_dir
    t = tmp_path
    assert main(["ingest", "--features", str(u / "features.csv"), "--returns",
                 str(u / "returns.csv"), "--metadata", str(u / "metadata.csv"), "--dim", "1024",
                 "--report", str(t / "load.txt")]) == 0
    assert "company_years_loaded = 480" in (t / "load.txt").read_text()
    assert main(["features", "sum", "--tokens", str(u / "tokens.csv"), "--out",
                 str(t / "summed.csv"), "--dim", "1024"]) == 0
    a = pd.read_csv(t / "summed.csv").sort_values(["doc_id", "feature_id"]).reset_index(drop=True)
    b = pd.read_csv(u / "features.csv").sort_values(["doc_id", "feature_id"]).reset_index(drop=True)
    np.testing.assert_allclose(a.summed_activation, b.summed_activation, atol=1e-9)
    assert main(["features", "hist", "--features", str(u / "features.csv"), "--dim", "1024",
                 "--out", str(t / "hist.csv")]) == 0
    assert main(["pca", "fit", "--features", str(u / "features.csv"), "--dim", "1024",
                 "--n-components", "40", "--out", str(t / "m.bin")]) == 0
    assert main(["pca", "info", "--model", str(t / "m.bin")]) == 0
    common = ["--features", str(u / "features.csv"), "--model", str(t / "m.bin")]
    assert main(["cluster", *common, "--theta", "-2.0", "--out", str(t / "cl.csv")]) == 0
    assert main(["calibrate", *common, "--returns", str(u / "returns.csv"), "--out",
                 str(t / "cal.csv"), "--series", str(t / "series.csv"), "--clusters-dir",
                 str(t)]) == 0
    assert (t / "clusters_CD.csv").exists() and (t / "clusters_CDR.csv").exists()
    assert main(["evaluate", "--clusters", f"CD={t / 'clusters_CD.csv'}",
                 f"CDR={t / 'clusters_CDR.csv'}", "--returns", str(u / "returns.csv"),
                 "--out", str(t / "eval.csv")]) == 0
    assert main(["backtest", "--clusters", str(t / "clusters_CD.csv"), "--prices",
                 str(u / "prices.csv"), "--config", str(u / "run.toml"), "--out-dir",
                 str(t / "bt")]) == 0
    summary = pd.read_csv(t / "bt" / "backtest_summary.csv")
    assert list(summary.columns) == ["method", "pairs_traded", "round_trips", "sharpe"]
    assert main(["interpret", "--clusters", str(t / "clusters_CD.csv"), *common,
                 "--out-dir", str(t / "interp"), "--max-clusters", "3"]) == 0
    assert (t / "interp" / "sparsity.csv").exists()
    assert main(["pca", "info", "--model", str(t / "missing.bin")]) == 1
