"""Wall-clock timing of the purification pipelines, single image and batch.

Each pipeline is timed ``repeats`` times on the same input; the table
reports mean and standard deviation in seconds.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import rng_stream
from .diffusion import DiffusionConfig, IdentityDenoiser, ddrm_denoise
from .filters import FilterConfig, gaussian_noise, window_filter_batch

BENCH_LAMBDA = 0.25
BENCH_SIGMA_Y = 0.15

# (name, blur stage, diffusion stage, corrupt before the chain)
PIPELINES: dict[str, tuple[str | None, bool, bool]] = {
    "gaussian": ("gaussian", False, False),
    "iwmf": ("iwmf", False, False),
    "noiseless-diffusion": (None, True, False),
    "iwmf+diffusion": ("iwmf", True, False),
    "gaussian+diffusion": (None, True, True),
    "iwmf+gaussian+diffusion": ("iwmf", True, True),
}

DIFFUSION_PIPELINES = tuple(k for k, v in PIPELINES.items() if v[1])
BLUR_PIPELINES = tuple(k for k, v in PIPELINES.items() if not v[1])


def make_pipeline(name: str, lam: float = BENCH_LAMBDA, sigma_y: float = BENCH_SIGMA_Y,
                  seed: int = 0) -> Callable[[np.ndarray], np.ndarray]:
    """Batch purifier ``(N, C, H, W) -> (N, C, H, W)`` for one timing row.

    The Gaussian blur uses ``sigma_y`` as its noise level, matching the
    corruption step of the diffusion rows.
    """
    try:
        blur, diffuse, corrupt_first = PIPELINES[name]
    except KeyError:
        raise ValueError(f"unknown pipeline {name!r}; choose from {list(PIPELINES)}") from None
    fcfg = FilterConfig(lam=lam, seed=seed)
    dcfg = DiffusionConfig(sigma_y=sigma_y, seed=seed)
    den = IdentityDenoiser()

    def run(x: np.ndarray) -> np.ndarray:
        rng = rng_stream(seed)
        if blur == "iwmf":
            x = window_filter_batch(x, fcfg, rng.integers(0, 2**63 - 1, size=len(x)))
        elif blur == "gaussian":
            x = gaussian_noise(x, sigma_y, rng)
        if diffuse:
            x = ddrm_denoise(x, dcfg, den, rng, add_noise=corrupt_first)
        return x

    return run


def _chunked(fn, x: np.ndarray, threads: int) -> np.ndarray:
    if threads <= 1 or len(x) < 2:
        return fn(x)
    parts = np.array_split(x, min(threads, len(x)))
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return np.concatenate(list(pool.map(fn, parts)))


def time_call(fn: Callable[[], object], repeats: int = 3) -> tuple[float, float]:
    """Mean and standard deviation of ``repeats`` timed calls."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return float(np.mean(samples)), float(np.std(samples))


@dataclass
class BenchRow:
    name: str
    single_mean: float
    single_std: float
    batch_mean: float
    batch_std: float


def run_bench(names=tuple(PIPELINES), size: int = 112, batch: int = 500, repeats: int = 3,
              threads: int = 1, seed: int = 0) -> list[BenchRow]:
    if not names:
        raise ValueError("no pipelines to time")
    rng = rng_stream(seed)
    imgs = rng.uniform(0.0, 1.0, size=(batch, 3, size, size))
    rows = []
    for name in names:
        fn = make_pipeline(name, seed=seed)
        single = time_call(lambda: fn(imgs[:1]), repeats)
        full = time_call(lambda: _chunked(fn, imgs, threads), repeats)
        rows.append(BenchRow(name, *single, *full))
    return rows


def format_table(rows: list[BenchRow], batch: int) -> str:
    head = f"{'strategy':<26}{'single (s)':>22}{f'{batch} (s)':>24}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r.name:<26}{r.single_mean:>12.4f} ± {r.single_std:<7.4f}"
                     f"{r.batch_mean:>14.4f} ± {r.batch_std:<7.4f}")
    return "\n".join(lines)
