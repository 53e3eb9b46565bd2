"""Single-threaded wall-clock benchmark of the network forward pass.

Only the forward is timed; feature extraction is not part of the loop.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .graph import ModelGraph, model_forward


@dataclass(frozen=True)
class BenchStats:
    model_tag: str
    frames: int
    repeats: int
    warmup: int
    runs: int
    mean_us: float
    median_us: float
    p5_us: float
    p95_us: float
    min_us: float
    max_us: float
    total_seconds: float

    def as_dict(self) -> dict:
        return {**asdict(self), "note": "wall-clock values are hardware-dependent"}


def run_bench(
    model: ModelGraph,
    frames: int = 300,
    repeats: int = 10_000,
    warmup: int = 100,
    runs: int = 10,
    seed: int = 0,
) -> BenchStats:
    """Time ``runs`` x ``repeats`` batch-size-1 forwards on one thread.

    Each run draws one fresh random input and reuses it for its warmup and
    timed iterations. Statistics pool the per-inference times of all runs.
    """
    if repeats < 1 or runs < 1 or warmup < 0 or frames < 1:
        raise ValueError("repeats, runs and frames must be >= 1; warmup >= 0")
    rng = np.random.Generator(np.random.PCG64(seed))
    samples = np.empty(runs * repeats, dtype=np.int64)
    clock = time.perf_counter_ns
    with threadpool_limits(limits=1):
        for run in range(runs):
            x = rng.standard_normal((model.input_dim, frames)).astype(model.dtype)
            for _ in range(warmup):
                model_forward(model, x)
            base = run * repeats
            for i in range(repeats):
                t0 = clock()
                model_forward(model, x)
                samples[base + i] = clock() - t0
    us = samples / 1e3
    p5, median, p95 = np.percentile(us, [5, 50, 95])
    return BenchStats(
        model_tag=model.topology,
        frames=frames,
        repeats=repeats,
        warmup=warmup,
        runs=runs,
        mean_us=float(us.mean()),
        median_us=float(median),
        p5_us=float(p5),
        p95_us=float(p95),
        min_us=float(us.min()),
        max_us=float(us.max()),
        total_seconds=float(samples.sum() / 1e9),
    )
