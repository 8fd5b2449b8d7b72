"""Grid benchmark: sampler posteriors scored against the exact mixture posterior.

For every (d, m, sigma) grid point a batch of measurement models is drawn;
each enabled method produces posterior samples that are compared with exact
posterior draws by sliced Wasserstein distance.  Every random input is
derived from the master seed and the task coordinates, so reruns are
reproducible and workers never share streams.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import gmm as gmm_mod
from .metrics import sliced_wasserstein
from .operators import IsotropicNoise, make_random_svd_operator
from .sampler import SolverConfig, cdps_sample, dps_sample, ilvr_sample, score_sde_sample
from .schedules import make_linear_schedule

KNOWN_METHODS = ("cdps", "dps", "score_sde", "ilvr")

RESULT_COLUMNS = ("method", "d", "m", "sigma", "matrix", "sw", "failures", "seconds")

FULL_GRID_MAX_D = 80  # larger dims only run with full_grid=True


class BenchAbort(RuntimeError):
    """Raised when more than 10% of a task's chains fail."""


@dataclass
class BenchConfig:
    dims: tuple[int, ...] = (8, 80, 800)
    measurements: tuple[int, ...] = (1, 2, 4)
    sigmas: tuple[float, ...] = (1e-2, 1e-1, 1.0)
    matrices_per_config: int = 20
    samples_per_run: int = 1000
    sw_slices: int = 10_000
    sw_order: int = 2
    num_steps: int = 1000
    beta_min: float = 0.1
    beta_max: float = 500.0
    methods: tuple[str, ...] = ("cdps", "dps")
    master_seed: int = 0
    cg_tol: float = 1e-8
    cg_max_iter: int | None = None
    dps_zeta: float = 1.0
    guidance_scale: float = 1.0  # score_sde / ilvr step scale
    shared_y_chain: bool = False
    full_grid: bool = False
    scatter: bool = False
    workers: int = 1
    record_timing: bool = True  # False zeroes the seconds column for byte-stable output

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.measurements = tuple(int(m) for m in self.measurements)
        self.sigmas = tuple(float(s) for s in self.sigmas)
        self.methods = tuple(self.methods)
        for name in self.methods:
            if name not in KNOWN_METHODS:
                raise ValueError(f"unknown method {name!r}; known: {KNOWN_METHODS}")
        if any(d % 2 for d in self.dims):
            raise ValueError("every d must be even")
        if any(m > d for d in self.dims for m in self.measurements):
            raise ValueError("need m <= d for every grid point")
        for val, name in [
            (self.matrices_per_config, "matrices_per_config"),
            (self.samples_per_run, "samples_per_run"),
            (self.sw_slices, "sw_slices"),
            (self.num_steps, "num_steps"),
        ]:
            if val < 1:
                raise ValueError(f"{name} must be positive")
        if self.sw_order not in (1, 2):
            raise ValueError("sw_order must be 1 or 2")

    def active_dims(self) -> tuple[int, ...]:
        if self.full_grid:
            return self.dims
        return tuple(d for d in self.dims if d <= FULL_GRID_MAX_D)

    def solver_config(self) -> SolverConfig:
        return SolverConfig(cg_tol=self.cg_tol, cg_max_iter=self.cg_max_iter, strict=False)


def derive_rng(master_seed: int, *parts) -> np.random.Generator:
    """Deterministic per-task generator from the master seed and task tags.

    Floats are canonicalized through repr, so 0.01 and 1e-2 map to the same
    stream while distinct values never collide.
    """
    canon = [str(int(master_seed))]
    for p in parts:
        if isinstance(p, float):
            canon.append(repr(p))
        else:
            canon.append(str(p))
    digest = hashlib.sha256("|".join(canon).encode()).digest()
    words = np.frombuffer(digest[:16], dtype=np.uint32)
    return np.random.default_rng(np.random.SeedSequence(words.tolist()))


def make_measurement_model(cfg: BenchConfig, d: int, m: int, sigma: float, matrix_index: int):
    """Draw (A, x_star, y) for one benchmark task, shared across methods."""
    prior = gmm_mod.make_grid_gmm(d)
    rng = derive_rng(cfg.master_seed, "matrix", d, m, sigma, matrix_index)
    A = make_random_svd_operator(d, m, rng)
    x_star = gmm_mod.sample_mixture(prior, 1, rng)[0]
    y = A.apply(x_star) + sigma * rng.standard_normal(m)
    return prior, A, x_star, y


def _run_method(method, cfg, prior, A, y, sigma, schedule, seed_parts):
    """Produce posterior samples for one method; returns (samples, failures)."""
    n = cfg.samples_per_run
    noise = IsotropicNoise(sigma * sigma)
    score_fn = gmm_mod.score_fn_for(prior, schedule)
    rng = derive_rng(*seed_parts)
    solver = cfg.solver_config()

    if method == "cdps":
        x0, trace = cdps_sample(
            y, A, noise, schedule, score_fn, rng, n_chains=n, config=solver,
            shared_chain=cfg.shared_y_chain,
        )
        failures = 0
        drop = []
        for row in trace.failed_rows:
            fixed = False
            for attempt in range(1, 4):
                retry_rng = derive_rng(*seed_parts, "retry", int(row), attempt)
                xr, tr = cdps_sample(
                    y, A, noise, schedule, score_fn, retry_rng, n_chains=None,
                    config=solver, shared_chain=cfg.shared_y_chain,
                )
                if tr.failed_rows.size == 0:
                    x0[row] = xr
                    fixed = True
                    break
            if not fixed:
                failures += 1
                drop.append(int(row))
        if drop:
            x0 = np.delete(x0, drop, axis=0)
        return x0, failures

    if method == "dps":
        jvp_fn = gmm_mod.denoiser_jvp_fn_for(prior, schedule)
        x0, _ = dps_sample(y, A, schedule, score_fn, jvp_fn, rng, n_chains=n, zeta=cfg.dps_zeta)
        return x0, 0

    if method == "score_sde":
        x0, _ = score_sde_sample(y, A, schedule, score_fn, rng, n_chains=n,
                                 scale=cfg.guidance_scale)
        return x0, 0

    if method == "ilvr":
        x0, _ = ilvr_sample(y, A, schedule, score_fn, rng, n_chains=n,
                            scale=cfg.guidance_scale)
        return x0, 0

    raise ValueError(f"unknown method {method!r}")


def run_config(cfg: BenchConfig, d: int, m: int, sigma: float, matrix_index: int,
               keep_samples: bool = False):
    """Run every enabled method against one measurement model.

    Returns (rows, samples) where rows are result dicts and samples maps
    source name to the sample arrays when ``keep_samples``.
    """
    prior, A, _, y = make_measurement_model(cfg, d, m, sigma, matrix_index)
    schedule = make_linear_schedule(cfg.num_steps, cfg.beta_min, cfg.beta_max)

    posterior = gmm_mod.exact_posterior(prior, A, y, sigma)
    oracle_rng = derive_rng(cfg.master_seed, "oracle", d, m, sigma, matrix_index)
    reference = gmm_mod.sample_mixture(posterior, cfg.samples_per_run, oracle_rng)

    rows = []
    samples = {"posterior": reference} if keep_samples else None
    for method in cfg.methods:
        started = time.perf_counter()
        seed_parts = (cfg.master_seed, method, d, m, sigma, matrix_index)
        x0, failures = _run_method(method, cfg, prior, A, y, sigma, schedule, seed_parts)
        if failures > 0.1 * cfg.samples_per_run:
            raise BenchAbort(
                f"{method} at (d={d}, m={m}, sigma={sigma}, matrix={matrix_index}): "
                f"{failures} of {cfg.samples_per_run} chains failed"
            )
        ref = reference if x0.shape[0] == reference.shape[0] else reference[: x0.shape[0]]
        sw_rng = derive_rng(cfg.master_seed, "slices", d, m, sigma, matrix_index)
        sw = sliced_wasserstein(x0, ref, cfg.sw_slices, sw_rng, order=cfg.sw_order)
        seconds = time.perf_counter() - started if cfg.record_timing else 0.0
        rows.append({
            "method": method, "d": d, "m": m, "sigma": sigma,
            "matrix": matrix_index, "sw": sw, "failures": failures,
            "seconds": seconds,
        })
        if keep_samples:
            samples[method] = x0
    return rows, samples


@dataclass
class BenchResult:
    rows: list[dict] = field(default_factory=list)
    aggregates: list[dict] = field(default_factory=list)
    aborted: list[dict] = field(default_factory=list)
    scatter: dict = field(default_factory=dict)


def _aggregate(rows: list[dict]) -> list[dict]:
    """Mean SW and 95% normal-approximation CI over the matrix replicates."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        groups.setdefault((row["method"], row["d"], row["m"], row["sigma"]), []).append(row)
    out = []
    for (method, d, m, sigma), grp in sorted(groups.items()):
        sws = np.array([g["sw"] for g in grp])
        n = sws.size
        ci = 1.96 * sws.std(ddof=1) / np.sqrt(n) if n > 1 else 0.0
        out.append({
            "method": method, "d": d, "m": m, "sigma": sigma,
            "sw_mean": float(sws.mean()), "sw_ci95": float(ci),
            "n_matrices": int(n),
            "failures_total": int(sum(g["failures"] for g in grp)),
        })
    return out


def _task_wrapper(args):
    cfg, d, m, sigma, k, keep = args
    try:
        return run_config(cfg, d, m, sigma, k, keep_samples=keep), None
    except BenchAbort as exc:
        return None, {"d": d, "m": m, "sigma": sigma, "matrix": k, "reason": str(exc)}


def run_grid(cfg: BenchConfig) -> BenchResult:
    """Run the whole benchmark grid, optionally across worker processes."""
    tasks = [
        (cfg, d, m, sigma, k, cfg.scatter and k == 0)
        for d in cfg.active_dims()
        for m in cfg.measurements
        for sigma in cfg.sigmas
        for k in range(cfg.matrices_per_config)
    ]
    result = BenchResult()
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            outcomes = list(pool.map(_task_wrapper, tasks))
    else:
        outcomes = [_task_wrapper(t) for t in tasks]

    for (cfg_, d, m, sigma, k, keep), (payload, aborted) in zip(tasks, outcomes):
        if aborted is not None:
            result.aborted.append(aborted)
            continue
        rows, samples = payload
        result.rows.extend(rows)
        if keep and samples:
            result.scatter[(d, m, sigma)] = samples
    result.rows.sort(key=lambda r: (r["method"], r["d"], r["m"], r["sigma"], r["matrix"]))
    result.aggregates = _aggregate(result.rows)
    return result


def emit_results(result: BenchResult, out_dir, cfg: BenchConfig | None = None) -> list[Path]:
    """Write results.csv, summary.json and any scatter CSVs; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    csv_path = out / "results.csv"
    try:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(RESULT_COLUMNS)
            for row in result.rows:
                writer.writerow([
                    row["method"], row["d"], row["m"], repr(float(row["sigma"])),
                    row["matrix"], f"{row['sw']:.12g}", row["failures"],
                    f"{row['seconds']:.3f}",
                ])
    except OSError as exc:
        raise OSError(f"failed writing {csv_path}: {exc}") from exc
    written.append(csv_path)

    summary_path = out / "summary.json"
    payload = {"aggregates": result.aggregates, "aborted": result.aborted}
    if cfg is not None:
        payload["config"] = asdict(cfg)
    try:
        summary_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"failed writing {summary_path}: {exc}") from exc
    written.append(summary_path)

    for (d, m, sigma), samples in sorted(result.scatter.items()):
        path = out / f"scatter_d{d}_m{m}_s{sigma!r}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["source", "x1", "x2"])
            for source, arr in samples.items():
                for p in arr:
                    writer.writerow([source, f"{p[0]:.12g}", f"{p[1]:.12g}"])
        written.append(path)
    return written
