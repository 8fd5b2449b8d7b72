"""Command-line benchmark driver.

Subcommands:
  run           full benchmark grid -> results.csv / summary.json
  oracle        exact-posterior sanity run -> samples CSV + summary
  trace         measurement-residual trajectories -> CSV
  diagnostics   score-consistency (cosine / MSE) per step -> CSV
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import gmm as gmm_mod
from .bench import BenchConfig, derive_rng, emit_results, make_measurement_model, run_grid
from .operators import IsotropicNoise
from .sampler import cdps_sample, dps_sample
from .schedules import make_linear_schedule


def _load_config(path: str | None, overrides: dict) -> BenchConfig:
    data = {}
    if path is not None:
        with open(path) as fh:
            data = json.load(fh)
        unknown = set(data) - set(BenchConfig.__dataclass_fields__)
        if unknown:
            raise SystemExit(f"unknown config keys: {sorted(unknown)}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return BenchConfig(**data)


def _cmd_run(args) -> int:
    overrides = {
        "methods": tuple(args.methods.split(",")) if args.methods else None,
        "master_seed": args.seed,
        "workers": args.workers,
        "cg_tol": args.cg_tol,
        "cg_max_iter": args.cg_max_iter,
        "sw_order": args.sw_order,
    }
    cfg = _load_config(args.config, overrides)
    if args.full_grid:
        cfg.full_grid = True
    if args.shared_y_chain:
        cfg.shared_y_chain = True
    if args.scatter:
        cfg.scatter = True

    result = run_grid(cfg)
    written = emit_results(result, args.out, cfg)
    if args.trace:
        written.extend(_write_run_traces(cfg, args.out))
    for agg in result.aggregates:
        print(
            f"{agg['method']:>9s}  d={agg['d']:<4d} m={agg['m']:<2d} "
            f"sigma={agg['sigma']:<6g} sw={agg['sw_mean']:.3f} "
            f"+-{agg['sw_ci95']:.3f} ({agg['n_matrices']} matrices)"
        )
    for bad in result.aborted:
        print(f"aborted: {bad}", file=sys.stderr)
    print("wrote: " + ", ".join(str(p) for p in written))
    return 0


def _trace_csv_rows(trace, n_chains):
    """(chain_id, t, residual_sq, cg_iters_mean, cg_iters_noise) rows."""
    T = trace.residual_sq.shape[0] - 1
    res = trace.residual_sq
    if res.ndim == 1:
        res = res[:, None]
        n_chains = 1
    im = trace.cg_iters_mean
    ino = trace.cg_iters_noise
    for chain in range(n_chains):
        for t in range(T, -1, -1):
            produced_by = t + 1  # step consuming beta_{t+1} produced level t
            cg_m = int(im[produced_by]) if im is not None and produced_by <= T else 0
            cg_n = int(ino[produced_by]) if ino is not None and produced_by <= T else 0
            yield chain, t, res[t, chain], cg_m, cg_n


def _write_run_traces(cfg: BenchConfig, out_dir) -> list[Path]:
    """Residual traces for the first matrix of every grid point."""
    out = Path(out_dir)
    schedule = make_linear_schedule(cfg.num_steps, cfg.beta_min, cfg.beta_max)
    written = []
    for d in cfg.active_dims():
        for m in cfg.measurements:
            for sigma in cfg.sigmas:
                prior, A, _, y = make_measurement_model(cfg, d, m, sigma, 0)
                score_fn = gmm_mod.score_fn_for(prior, schedule)
                noise = IsotropicNoise(sigma * sigma)
                rng = derive_rng(cfg.master_seed, "trace", d, m, sigma)
                n = min(cfg.samples_per_run, 100)
                _, trace = cdps_sample(
                    y, A, noise, schedule, score_fn, rng, n_chains=n,
                    config=cfg.solver_config(), record_residuals=True,
                )
                path = out / f"trace_cdps_d{d}_m{m}_s{sigma!r}.csv"
                with open(path, "w", newline="") as fh:
                    writer = csv.writer(fh)
                    writer.writerow(["chain_id", "t", "residual_sq", "cg_iters_mean", "cg_iters_noise"])
                    for row in _trace_csv_rows(trace, n):
                        writer.writerow([row[0], row[1], f"{row[2]:.12g}", row[3], row[4]])
                written.append(path)
    return written


def _cmd_oracle(args) -> int:
    cfg = BenchConfig(master_seed=args.seed)
    prior, A, x_star, y = make_measurement_model(cfg, args.d, args.m, args.sigma, args.matrix)
    posterior = gmm_mod.exact_posterior(prior, A, y, args.sigma)
    rng = derive_rng(args.seed, "oracle", args.d, args.m, args.sigma, args.matrix)
    samples = gmm_mod.sample_mixture(posterior, args.samples, rng)

    weights = posterior.weights
    print(f"posterior weights sum: {weights.sum():.15f}")
    top = np.argsort(weights)[::-1][:3]
    for k in top:
        print(f"  component {k}: weight={weights[k]:.4f} mean[:2]={posterior.means[k][:2]}")
    mix_mean = weights @ posterior.means
    print(f"posterior mean[:2]: {mix_mean[:2]}")
    print(f"sample mean[:2]:    {samples.mean(axis=0)[:2]}")
    print(f"truth x*[:2]:       {x_star[:2]}")

    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"oracle_d{args.d}_m{args.m}_s{args.sigma!r}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{i}" for i in range(samples.shape[1])])
            for p in samples:
                writer.writerow([f"{v:.12g}" for v in p])
        print(f"wrote {path}")
    return 0


def _cmd_trace(args) -> int:
    cfg = BenchConfig(master_seed=args.seed)
    prior, A, _, y = make_measurement_model(cfg, args.d, args.m, args.sigma, args.matrix)
    schedule = make_linear_schedule(cfg.num_steps, cfg.beta_min, cfg.beta_max)
    score_fn = gmm_mod.score_fn_for(prior, schedule)
    jvp_fn = gmm_mod.denoiser_jvp_fn_for(prior, schedule)
    noise = IsotropicNoise(args.sigma ** 2)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"trace_d{args.d}_m{args.m}_s{args.sigma!r}.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "chain_id", "t", "residual_sq", "cg_iters_mean", "cg_iters_noise"])
        for method in ("cdps", "dps"):
            rng = derive_rng(args.seed, "trace", method, args.d, args.m, args.sigma)
            if method == "cdps":
                _, trace = cdps_sample(y, A, noise, schedule, score_fn, rng,
                                       n_chains=args.chains, config=cfg.solver_config(),
                                       record_residuals=True)
            else:
                _, trace = dps_sample(y, A, schedule, score_fn, jvp_fn, rng,
                                      n_chains=args.chains, record_residuals=True)
            final = trace.residual_sq[0].mean()
            start = trace.residual_sq[-1].mean()
            print(f"{method}: mean residual_sq t=T {start:.4g} -> t=0 {final:.4g}")
            for row in _trace_csv_rows(trace, args.chains):
                writer.writerow([method, row[0], row[1], f"{row[2]:.12g}", row[3], row[4]])
    print(f"wrote {path}")
    return 0


def _cmd_diagnostics(args) -> int:
    cfg = BenchConfig(master_seed=args.seed)
    prior, A, _, y = make_measurement_model(cfg, args.d, args.m, args.sigma, args.matrix)
    schedule = make_linear_schedule(cfg.num_steps, cfg.beta_min, cfg.beta_max)
    score_fn = gmm_mod.score_fn_for(prior, schedule)
    noise = IsotropicNoise(args.sigma ** 2)
    rng = derive_rng(args.seed, "diagnostics", args.d, args.m, args.sigma)
    _, trace = cdps_sample(y, A, noise, schedule, score_fn, rng, n_chains=args.chains,
                           config=cfg.solver_config(), record_scores=True)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"diagnostics_d{args.d}_m{args.m}_s{args.sigma!r}.csv"
    cos = np.atleast_2d(trace.score_cos.T).T
    mse = np.atleast_2d(trace.score_mse.T).T
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "cos_mean", "mse_mean", "n_chains"])
        for t in range(schedule.num_steps, 0, -1):
            c = np.nanmean(cos[t])
            e = np.nanmean(mse[t])
            writer.writerow([t, f"{c:.8g}", f"{e:.8g}", args.chains])
    valid = np.arange(1, schedule.num_steps + 1)
    print(f"mean cosine over trajectory: {np.nanmean(cos[valid]):.4f}")
    print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="cdps-bench", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the benchmark grid")
    run.add_argument("--config", help="JSON config mirroring BenchConfig fields")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--methods", help="comma-separated subset of cdps,dps,score_sde,ilvr")
    run.add_argument("--full-grid", action="store_true", help="include dims above 80")
    run.add_argument("--trace", action="store_true", help="also write residual trace CSVs")
    run.add_argument("--shared-y-chain", action="store_true",
                     help="one shared measurement chain per observation")
    run.add_argument("--scatter", action="store_true",
                     help="write first-two-dimension scatter CSVs for matrix 0")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--workers", type=int, default=None)
    run.add_argument("--cg-tol", type=float, default=None)
    run.add_argument("--cg-max-iter", type=int, default=None)
    run.add_argument("--sw-order", type=int, default=None, choices=(1, 2))
    run.set_defaults(func=_cmd_run)

    def _common(p):
        p.add_argument("--d", type=int, default=8)
        p.add_argument("--m", type=int, default=2)
        p.add_argument("--sigma", type=float, default=0.1)
        p.add_argument("--matrix", type=int, default=0)
        p.add_argument("--seed", type=int, default=0)

    oracle = sub.add_parser("oracle", help="exact-posterior sanity run")
    _common(oracle)
    oracle.add_argument("--samples", type=int, default=1000)
    oracle.add_argument("--out", default=None)
    oracle.set_defaults(func=_cmd_oracle)

    trace = sub.add_parser("trace", help="measurement-residual trajectories")
    _common(trace)
    trace.add_argument("--chains", type=int, default=100)
    trace.add_argument("--out", required=True)
    trace.set_defaults(func=_cmd_trace)

    diag = sub.add_parser("diagnostics", help="score-consistency diagnostics")
    _common(diag)
    diag.add_argument("--chains", type=int, default=20)
    diag.add_argument("--out", required=True)
    diag.set_defaults(func=_cmd_diagnostics)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
