"""Wall-clock timing of the log-domain Sinkhorn layer."""

from __future__ import annotations

import platform
import statistics
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .features import GecoError
from .ot import BALANCED, UNBALANCED, Marginals, ScoreMatrix, SolverConfig, solve

MIN_RUNS = 100


class BenchError(GecoError):
    pass


def bench_instance(side: int, cfg: SolverConfig, seed: int = 0):
    """Random cosine-like scores for a ``side x side`` matrix, bin included."""
    if side < 2:
        raise BenchError(f"matrix side must be at least 2, got {side}")
    rng = np.random.default_rng([seed, side])
    sim = rng.uniform(-1.0, 1.0, size=(side - 1, side - 1))
    return ScoreMatrix.from_similarities(sim, cfg.z), Marginals.uniform(side, side)


def _timed_solve(c, marg, cfg, mode) -> float:
    t0 = time.perf_counter()
    solve(c, marg, cfg, mode)
    return time.perf_counter() - t0


def _stats(seconds) -> dict:
    ms = [1000.0 * s for s in seconds]
    return {
        "mean_ms": statistics.fmean(ms),
        "std_ms": statistics.stdev(ms) if len(ms) > 1 else 0.0,
        "min_ms": min(ms),
        "max_ms": max(ms),
    }


def bench_size(side: int, cfg: SolverConfig, mode: str = UNBALANCED, runs: int = MIN_RUNS,
               warmup: int = 3, threads: int = 1, seed: int = 0) -> dict:
    """Per-solve latency for one size, sequential and with ``threads`` concurrent solves."""
    if runs < MIN_RUNS:
        raise BenchError(f"need at least {MIN_RUNS} timed runs, got {runs}")
    if threads < 1:
        raise BenchError("threads must be positive")
    c, marg = bench_instance(side, cfg, seed)
    for _ in range(warmup):
        solve(c, marg, cfg, mode)

    single = [_timed_solve(c, marg, cfg, mode) for _ in range(runs)]
    row = {"side": side, "runs": runs, "single_thread": _stats(single)}

    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(lambda _: solve(c, marg, cfg, mode), range(threads)))
        t0 = time.perf_counter()
        multi = list(pool.map(lambda _: _timed_solve(c, marg, cfg, mode), range(runs)))
        wall = time.perf_counter() - t0
    stats = _stats(multi)
    stats["threads"] = threads
    stats["throughput_ms"] = 1000.0 * wall / runs
    row["multi_thread"] = stats
    return row


def bench(sizes, cfg: SolverConfig = SolverConfig(), mode: str = UNBALANCED, runs: int = MIN_RUNS,
          warmup: int = 3, threads: int = 2, seed: int = 0) -> dict:
    sizes = [int(s) for s in sizes]
    if not sizes:
        raise BenchError("no sizes given")
    if mode not in (BALANCED, UNBALANCED):
        raise BenchError(f"unknown mode {mode!r}")
    return {
        "solver": {"lambda": cfg.lam, "alpha": cfg.alpha, "beta": cfg.beta, "iterations": cfg.iterations,
                   "z": cfg.z, "mode": mode},
        "warmup": warmup,
        "machine": {"python": platform.python_version(), "numpy": np.__version__},
        "results": [bench_size(s, cfg, mode, runs, warmup, threads, seed) for s in sizes],
    }
