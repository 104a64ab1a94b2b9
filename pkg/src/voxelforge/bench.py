"""Throughput benchmark for the augmentation pipeline."""
from __future__ import annotations

import os
import platform
import statistics
import time
from typing import Sequence

import numpy as np

from .augment3d import AugmentSpec, pipeline_run
from .volgrid import LabelMap, Volume

SCHEMA = 1

DEFAULT_BENCH_SPEC = AugmentSpec(
    rotation_range=(-0.3, 0.3),
    scale_range=(0.9, 1.1),
    shear_range=(-0.05, 0.05),
    reflect_prob=(0.5, 0.0, 0.0),
    generic_range=(-0.02, 0.02),
    displacement_max=(10.0, 10.0, 10.0),
    occlusion_max=40.0,
    noise_sigma_range=(0.0, 50.0),
    window_low_range=(-1000.0, -150.0),
    window_high_range=(230.0, 1500.0),
    seed=0,
)


def machine_descriptor() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'} x{os.cpu_count()} / {platform.python_implementation()} {platform.python_version()}"


def synthetic_batch(n: int, dims=(120, 120, 160), spacing=(3.0, 3.0, 3.0), seed: int = 0):
    """CT-like int16 volumes with random label maps."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        hu = rng.normal(0.0, 300.0, dims).clip(-1024, 3000).astype(np.int16)
        labels = rng.integers(0, 6, dims, dtype=np.uint8)
        out.append((Volume(hu, spacing), LabelMap(labels, spacing)))
    return out


def _time_batch(batch, spec, depth, n_threads) -> float:
    t0 = time.perf_counter()
    pipeline_run(batch, spec, depth=depth, n_threads=n_threads)
    return (time.perf_counter() - t0) * 1000.0 / len(batch)


def _summary(ms: list[float]) -> dict:
    mean = statistics.fmean(ms)
    return {
        "ms_per_volume_mean": mean,
        "ms_per_volume_std": statistics.stdev(ms) if len(ms) > 1 else 0.0,
        "ms_per_volume_min": min(ms),
        "volumes_per_second": 1000.0 / mean,
        "samples_ms": ms,
    }


def bench(
    spec: AugmentSpec = DEFAULT_BENCH_SPEC,
    batch_sizes: Sequence[int] = (1, 4, 16, 32),
    repetitions: int = 5,
    *,
    depth: int = 4,
    dims=(120, 120, 160),
    n_threads: int = 1,
    seed: int = 0,
) -> dict:
    """Time ``pipeline_run`` per batch size, then compare depth 1 against
    ``depth`` at the largest batch size.

    Each repetition uses a different synthetic batch. In the depth
    comparison the two configurations alternate within every repetition so
    drift in machine load affects both equally; the speedup is the ratio of
    the per-configuration minima, with the ratio of means also reported.
    """
    if not batch_sizes:
        raise ValueError("batch_sizes must be nonempty")
    if repetitions < 5:
        raise ValueError("at least 5 repetitions are required")
    if depth < 2:
        raise ValueError("depth must be >= 2 for the pipelining comparison")
    largest = max(batch_sizes)
    pools = [synthetic_batch(largest, dims, seed=seed + r) for r in range(repetitions)]
    per_batch = {}
    for bs in batch_sizes:
        ms = [_time_batch(pools[r][:bs], spec, depth, n_threads) for r in range(repetitions)]
        per_batch[str(bs)] = _summary(ms)
    seq, pipe = [], []
    for r in range(repetitions):
        order = (1, depth) if r % 2 == 0 else (depth, 1)
        for d in order:
            (seq if d == 1 else pipe).append(_time_batch(pools[r], spec, d, n_threads))
    comparison = {
        "batch_size": largest,
        "depth_sequential": 1,
        "depth_pipelined": depth,
        "sequential": _summary(seq),
        "pipelined": _summary(pipe),
        "speedup": min(seq) / min(pipe),
        "speedup_of_means": statistics.fmean(seq) / statistics.fmean(pipe),
    }
    return {
        "schema": SCHEMA,
        "dims": list(dims),
        "repetitions": repetitions,
        "pipeline_depth": depth,
        "n_threads": n_threads,
        "machine": machine_descriptor(),
        "batch_sizes": per_batch,
        "pipelining": comparison,
    }
