import csv
import json

import numpy as np
import pytest

from cdps.bench import (
    BenchConfig,
    RESULT_COLUMNS,
    derive_rng,
    emit_results,
    make_measurement_model,
    run_config,
    run_grid,
)
from cdps.cli import main as cli_main


def smoke_config(**overrides):
    base = dict(
        dims=(8,),
        measurements=(4,),
        sigmas=(1e-2,),
        matrices_per_config=2,
        samples_per_run=100,
        sw_slices=1000,
        num_steps=200,
        methods=("cdps", "dps"),
        master_seed=0,
        record_timing=False,
    )
    base.update(overrides)
    # keep the discretized betas well inside (0, 1) for shortened schedules
    base.setdefault("beta_max", base["num_steps"] / 4.0)
    return BenchConfig(**base)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_smoke_grid_runs_and_emits(tmp_path):
    cfg = smoke_config()
    result = run_grid(cfg)
    assert len(result.rows) == 2 * 2  # methods x matrices
    paths = emit_results(result, tmp_path, cfg)
    rows = read_csv(tmp_path / "results.csv")
    assert rows[0] == list(RESULT_COLUMNS)
    assert len(rows) == 1 + 4
    for row in rows[1:]:
        assert row[0] in ("cdps", "dps")
        assert float(row[5]) >= 0.0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert len(summary["aggregates"]) == 2
    assert summary["aborted"] == []
    assert (tmp_path / "summary.json") in paths


def test_rerun_is_byte_identical(tmp_path):
    cfg = smoke_config(matrices_per_config=1, samples_per_run=50, num_steps=100)
    emit_results(run_grid(cfg), tmp_path / "a", cfg)
    emit_results(run_grid(cfg), tmp_path / "b", cfg)
    assert (tmp_path / "a/results.csv").read_bytes() == (tmp_path / "b/results.csv").read_bytes()
    assert (tmp_path / "a/summary.json").read_bytes() == (tmp_path / "b/summary.json").read_bytes()


def test_summary_mean_matches_rows(tmp_path):
    cfg = smoke_config(methods=("cdps",), matrices_per_config=3, samples_per_run=50,
                       num_steps=100)
    result = run_grid(cfg)
    emit_results(result, tmp_path, cfg)
    rows = read_csv(tmp_path / "results.csv")[1:]
    sws = [float(r[5]) for r in rows]
    summary = json.loads((tmp_path / "summary.json").read_text())
    agg = summary["aggregates"][0]
    assert agg["sw_mean"] == pytest.approx(np.mean(sws), rel=1e-9)
    assert agg["n_matrices"] == 3


def test_empty_methods_gives_header_only_csv(tmp_path):
    cfg = smoke_config(methods=())
    result = run_grid(cfg)
    emit_results(result, tmp_path, cfg)
    assert read_csv(tmp_path / "results.csv") == [list(RESULT_COLUMNS)]


def test_single_row_csv(tmp_path):
    cfg = smoke_config(methods=("cdps",), matrices_per_config=1, samples_per_run=50,
                       num_steps=100)
    emit_results(run_grid(cfg), tmp_path, cfg)
    assert len(read_csv(tmp_path / "results.csv")) == 2


def test_grid_completeness():
    cfg = smoke_config(dims=(4, 8), measurements=(1, 2), sigmas=(0.1, 1.0),
                       methods=("cdps",), matrices_per_config=1,
                       samples_per_run=20, sw_slices=100, num_steps=50)
    result = run_grid(cfg)
    keys = {(r["method"], r["d"], r["m"], r["sigma"], r["matrix"]) for r in result.rows}
    assert len(keys) == len(result.rows) == 2 * 2 * 2


def test_full_grid_flag_gates_large_dims():
    cfg = smoke_config(dims=(8, 800))
    assert cfg.active_dims() == (8,)
    cfg.full_grid = True
    assert cfg.active_dims() == (8, 800)


def test_shared_measurement_model_across_methods():
    cfg = smoke_config()
    _, A1, x1, y1 = make_measurement_model(cfg, 8, 4, 1e-2, 0)
    _, A2, x2, y2 = make_measurement_model(cfg, 8, 4, 1e-2, 0)
    np.testing.assert_array_equal(A1.dense, A2.dense)
    np.testing.assert_array_equal(y1, y2)


def test_seed_derivation_distinct_and_canonical():
    a = derive_rng(0, "matrix", 8, 4, 0.01, 0).standard_normal(4)
    b = derive_rng(0, "matrix", 8, 4, 1e-2, 0).standard_normal(4)
    np.testing.assert_array_equal(a, b)  # repr-equal floats share a stream
    c = derive_rng(0, "matrix", 8, 4, 0.1, 0).standard_normal(4)
    assert not np.array_equal(a, c)
    d = derive_rng(1, "matrix", 8, 4, 0.01, 0).standard_normal(4)
    assert not np.array_equal(a, d)


def test_config_validation():
    with pytest.raises(ValueError):
        BenchConfig(methods=("nonsense",))
    with pytest.raises(ValueError):
        BenchConfig(dims=(7,))
    with pytest.raises(ValueError):
        BenchConfig(dims=(2,), measurements=(4,))
    with pytest.raises(ValueError):
        BenchConfig(sw_order=3)
    with pytest.raises(ValueError):
        BenchConfig(samples_per_run=0)


def test_run_config_scatter_samples():
    cfg = smoke_config(methods=("cdps",), samples_per_run=30, sw_slices=100,
                       num_steps=50)
    rows, samples = run_config(cfg, 8, 4, 1e-2, 0, keep_samples=True)
    assert set(samples) == {"posterior", "cdps"}
    assert samples["cdps"].shape == (30, 8)


def test_optional_guidance_methods_run():
    cfg = smoke_config(methods=("score_sde", "ilvr"), matrices_per_config=1,
                       samples_per_run=20, sw_slices=100, num_steps=50)
    result = run_grid(cfg)
    assert {r["method"] for r in result.rows} == {"score_sde", "ilvr"}
    assert all(np.isfinite(r["sw"]) for r in result.rows)


def test_workers_do_not_change_results(tmp_path):
    cfg1 = smoke_config(methods=("cdps",), matrices_per_config=2, samples_per_run=30,
                        sw_slices=200, num_steps=50, workers=1)
    cfg2 = smoke_config(methods=("cdps",), matrices_per_config=2, samples_per_run=30,
                        sw_slices=200, num_steps=50, workers=2)
    r1 = run_grid(cfg1)
    r2 = run_grid(cfg2)
    assert [row["sw"] for row in r1.rows] == [row["sw"] for row in r2.rows]


# ---------------------------------------------------------------------------
# CLI


def test_cli_run_with_config_file(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({
        "dims": [8], "measurements": [4], "sigmas": [0.01],
        "matrices_per_config": 1, "samples_per_run": 30, "sw_slices": 200,
        "num_steps": 50, "beta_max": 12.5, "methods": ["cdps"], "record_timing": False,
    }))
    out = tmp_path / "out"
    assert cli_main(["run", "--config", str(cfg_path), "--out", str(out),
                     "--seed", "3", "--scatter"]) == 0
    assert (out / "results.csv").exists()
    assert (out / "summary.json").exists()
    scatters = list(out.glob("scatter_*.csv"))
    assert len(scatters) == 1
    header = read_csv(scatters[0])[0]
    assert header == ["source", "x1", "x2"]


def test_cli_run_trace_flag(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({
        "dims": [8], "measurements": [2], "sigmas": [0.1],
        "matrices_per_config": 1, "samples_per_run": 20, "sw_slices": 100,
        "num_steps": 50, "beta_max": 12.5, "methods": ["cdps"],
        "record_timing": False,
    }))
    out = tmp_path / "out"
    cli_main(["run", "--config", str(cfg_path), "--out", str(out), "--trace"])
    traces = list(out.glob("trace_cdps_*.csv"))
    assert len(traces) == 1
    rows = read_csv(traces[0])
    assert rows[0] == ["chain_id", "t", "residual_sq", "cg_iters_mean", "cg_iters_noise"]
    assert len(rows) == 1 + 20 * 51


def test_cli_rejects_unknown_config_keys(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"dims": [8], "bogus": 1}))
    with pytest.raises(SystemExit):
        cli_main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "o")])


def test_cli_methods_override(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({
        "dims": [8], "measurements": [1], "sigmas": [0.1],
        "matrices_per_config": 1, "samples_per_run": 20, "sw_slices": 100,
        "num_steps": 50, "beta_max": 12.5, "methods": ["cdps", "dps"], "record_timing": False,
    }))
    out = tmp_path / "out"
    cli_main(["run", "--config", str(cfg_path), "--out", str(out),
              "--methods", "cdps"])
    rows = read_csv(out / "results.csv")[1:]
    assert {r[0] for r in rows} == {"cdps"}


def test_cli_oracle_trace_diagnostics(tmp_path, capsys):
    out = tmp_path / "aux"
    assert cli_main(["oracle", "--d", "4", "--m", "2", "--sigma", "0.1",
                     "--samples", "50", "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "posterior weights sum: 1.0" in printed
    oracle_files = list(out.glob("oracle_*.csv"))
    assert len(oracle_files) == 1
    assert len(read_csv(oracle_files[0])) == 51

    assert cli_main(["trace", "--d", "4", "--m", "2", "--sigma", "0.1",
                     "--chains", "3", "--out", str(out)]) == 0
    trace_files = list(out.glob("trace_*.csv"))
    assert len(trace_files) == 1
    rows = read_csv(trace_files[0])
    assert rows[0] == ["method", "chain_id", "t", "residual_sq",
                       "cg_iters_mean", "cg_iters_noise"]
    # both methods, 3 chains, BenchConfig default T=1000 levels 0..T
    assert len(rows) == 1 + 2 * 3 * 1001

    assert cli_main(["diagnostics", "--d", "4", "--m", "2", "--sigma", "0.1",
                     "--chains", "3", "--out", str(out)]) == 0
    diag_files = list(out.glob("diagnostics_*.csv"))
    assert len(diag_files) == 1
    rows = read_csv(diag_files[0])
    assert rows[0] == ["t", "cos_mean", "mse_mean", "n_chains"]
    assert len(rows) == 1 + 1000
