"""Blurring and purification filters, centred on the iterative window mean filter.

Window filters place ``int(lambda * H * W)`` randomly centred ``s x s``
windows on every channel and overwrite each window with a statistic of its
pixels.  The window spans rows ``[m - s//2, m + ceil(s/2))`` (likewise for
columns) and is clamped to the image, so border windows are smaller.

All window sums are accumulated in row-major order starting from ``0.0``;
this fixes the floating-point result so the vectorised kernels here agree
bit-for-bit with a plain per-pixel loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import SeedLike, check_image, clamp01, rng_stream

STRATEGIES = (
    "iwmf",
    "window_mean_noniter",
    "window_median_iter",
    "mean_filter",
    "median_filter",
    "gaussian_noise",
    "pepper_noise",
)

WINDOW_STRATEGIES = ("iwmf", "window_mean_noniter", "window_median_iter")


@dataclass(frozen=True)
class FilterConfig:
    """Settings for one blurring strategy.

    Args:
        lam: window amount; the window count is ``int(lam * H * W)``.
        window_size: window side ``s`` in pixels.
        strategy: one of :data:`STRATEGIES`.
        seed: seed for window placement or noise.
        noise_param: Gaussian sigma or pepper fraction for the noise strategies.
    """

    lam: float = 0.25
    window_size: int = 3
    strategy: str = "iwmf"
    seed: int = 0
    noise_param: float = 0.0

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.window_size < 2:
            raise ValueError(f"window size must be >= 2, got {self.window_size}")
        if not self.noise_param >= 0:
            raise ValueError(f"noise_param must be >= 0, got {self.noise_param}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")


def iters_for(lam: float, h: int, w: int) -> int:
    """Number of windows for an ``h x w`` image (truncates toward zero)."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return int(lam * h * w)


def window_bounds(m: int, n: int, s: int, h: int, w: int) -> tuple[int, int, int, int]:
    """Clamped ``(r0, r1, c0, c1)`` of the window centred at ``(m, n)``."""
    lo, hi = s // 2, math.ceil(s / 2)
    return max(m - lo, 0), min(m + hi, h), max(n - lo, 0), min(n + hi, w)


def draw_centers(rng: np.random.Generator, ch: int, iters: int, h: int, w: int) -> np.ndarray:
    """Window centres of shape ``(ch, iters, 2)``.

    Draw order is (channel, iteration, row, column) so that replaying a seed
    reproduces every window.
    """
    return rng.integers(0, np.array([h, w]), size=(ch, iters, 2))


def _masked_median(vals: np.ndarray, mask: np.ndarray) -> np.ndarray:
    # NaN sorts last, leaving the n valid values in front
    srt = np.sort(np.where(mask, vals, np.nan), axis=-1)
    n = mask.sum(axis=-1)
    lo = np.take_along_axis(srt, ((n - 1) // 2)[..., None], axis=-1)[..., 0]
    hi = np.take_along_axis(srt, (n // 2)[..., None], axis=-1)[..., 0]
    return (lo + hi) / 2.0


_CHUNK_ELEMS = 1 << 22


def _window_planes(planes: np.ndarray, centers: np.ndarray, s: int, mode: str) -> np.ndarray:
    """Run the window loop on ``(P, H, W)`` planes with ``(P, iters, 2)`` centres.

    Windows are applied one iteration at a time; within an iteration the P
    planes are independent and handled together.  Planes live in a flat
    zero-padded buffer so every window is a full ``s x s`` block; slots that
    fall in the padding read from a sentinel cell (0.0 for sums, NaN for
    medians) instead.  Writes into the padding are never read back.
    """
    p, h, w = planes.shape
    lo = s // 2
    hp, wp = h + s - 1, w + s - 1
    size = p * hp * wp
    fill = np.nan if mode == "median" else 0.0
    buf = np.zeros(size + 1)
    buf[size] = fill
    padded = buf[:size].reshape(p, hp, wp)
    padded[:, lo:lo + h, lo:lo + w] = planes
    src = buf.copy() if mode == "noniter" else buf

    inside = np.zeros((hp, wp), dtype=bool)
    inside[lo:lo + h, lo:lo + w] = True
    inside = inside.ravel()
    ar = np.arange(s)
    offs = (ar[:, None] * wp + ar[None, :]).ravel()
    plane_base = np.arange(p) * (hp * wp)

    iters = centers.shape[1]
    step = max(1, _CHUNK_ELEMS // (p * s * s))
    for c0 in range(0, iters, step):
        cen = centers[:, c0:c0 + step]
        m, n = cen[..., 0].T, cen[..., 1].T
        # top-left corner of the window in padded coordinates is (m, n)
        inplane = (m * wp + n)[:, None, :] + offs[None, :, None]
        write = inplane + plane_base
        read = np.where(inside[inplane], write, size)
        if mode == "median":
            for i in range(len(m)):
                vals = src.take(read[i])
                srt = np.sort(vals, axis=0)
                cnt = (~np.isnan(srt)).sum(axis=0)
                lo_v = np.take_along_axis(srt, ((cnt - 1) // 2)[None], axis=0)[0]
                hi_v = np.take_along_axis(srt, (cnt // 2)[None], axis=0)[0]
                buf.put(write[i], (lo_v + hi_v) / 2.0)
            continue
        count = ((np.minimum(m + s - lo, h) - np.maximum(m - lo, 0))
                 * (np.minimum(n + s - lo, w) - np.maximum(n - lo, 0))).astype(np.float64)
        for i in range(len(m)):
            vals = src.take(read[i])
            acc = vals[0].copy()
            for k in range(1, s * s):
                acc += vals[k]
            acc /= count[i]
            buf.put(write[i], acc)
    return padded[:, lo:lo + h, lo:lo + w].copy()


def _window_filter(img, cfg: FilterConfig, mode: str, rng: SeedLike = None) -> np.ndarray:
    arr = check_image(img)
    ch, h, w = arr.shape
    s = cfg.window_size
    if s > h or s > w:
        raise ValueError(f"window size {s} exceeds image {h}x{w}")
    rng = rng_stream(cfg.seed if rng is None else rng)
    centers = draw_centers(rng, ch, iters_for(cfg.lam, h, w), h, w)
    return _window_planes(arr, centers, s, mode)


def window_filter_batch(imgs, cfg: FilterConfig, seeds) -> np.ndarray:
    """Apply a window strategy to a ``(N, CH, H, W)`` batch.

    Image ``k`` uses its own stream ``seeds[k]``; the result equals filtering
    each image alone with that seed.
    """
    arr = check_image(imgs, batched=True)
    n, ch, h, w = arr.shape
    s = cfg.window_size
    if s > h or s > w:
        raise ValueError(f"window size {s} exceeds image {h}x{w}")
    mode = {"iwmf": "mean", "window_mean_noniter": "noniter", "window_median_iter": "median"}[cfg.strategy]
    iters = iters_for(cfg.lam, h, w)
    centers = np.concatenate([draw_centers(rng_stream(sd), ch, iters, h, w) for sd in seeds])
    return _window_planes(arr.reshape(n * ch, h, w), centers, s, mode).reshape(arr.shape)


def iwmf(img, cfg: FilterConfig, rng: SeedLike = None) -> np.ndarray:
    """Iterative window mean filter.

    Each window is replaced by the mean of the *current* working image, so
    earlier windows feed later ones.  ``rng`` overrides ``cfg.seed``.
    """
    return _window_filter(img, cfg, "mean", rng)


def window_mean_noniter(img, cfg: FilterConfig, rng: SeedLike = None) -> np.ndarray:
    """Window mean filter whose means are always taken from the input image."""
    return _window_filter(img, cfg, "noniter", rng)


def window_median_iter(img, cfg: FilterConfig, rng: SeedLike = None) -> np.ndarray:
    """Iterative window filter using the window median instead of the mean.

    Even-sized (clamped) windows use the average of the two middle values.
    """
    return _window_filter(img, cfg, "median", rng)


def _neighborhood_offsets(s: int):
    lo = s // 2
    return [(di, dj) for di in range(-lo, s - lo) for dj in range(-lo, s - lo)]


def mean_filter(img, s: int = 3) -> np.ndarray:
    """Classic mean filter: each pixel becomes its clamped-neighbourhood mean."""
    if s < 2:
        raise ValueError("window size must be >= 2")
    arr = check_image(img)
    ch, h, w = arr.shape
    lo, hi = s // 2, s - s // 2 - 1
    padded = np.pad(arr, ((0, 0), (lo, hi), (lo, hi)))
    ones = np.pad(np.ones((h, w)), ((lo, hi), (lo, hi)))
    acc = np.zeros_like(arr)
    count = np.zeros((h, w))
    for di, dj in _neighborhood_offsets(s):
        acc = acc + padded[:, lo + di:lo + di + h, lo + dj:lo + dj + w]
        count = count + ones[lo + di:lo + di + h, lo + dj:lo + dj + w]
    return acc / count


def median_filter(img, s: int = 3) -> np.ndarray:
    """Classic median filter with clamped borders."""
    if s < 2:
        raise ValueError("window size must be >= 2")
    arr = check_image(img)
    lo, hi = s // 2, s - s // 2 - 1
    padded = np.pad(arr, ((0, 0), (lo, hi), (lo, hi)), constant_values=np.nan)
    win = np.lib.stride_tricks.sliding_window_view(padded, (s, s), axis=(1, 2))
    win = win.reshape(*arr.shape, s * s)
    return _masked_median(win, ~np.isnan(win))


def gaussian_noise(img, sigma: float, seed: SeedLike = None) -> np.ndarray:
    """Add i.i.d. ``N(0, sigma^2)`` noise and clamp to [0, 1]."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    arr = np.asarray(img, dtype=np.float64)
    if sigma == 0:
        return arr.copy()
    return clamp01(arr + rng_stream(seed).normal(0.0, sigma, size=arr.shape))


def pepper_noise(img, fraction: float, seed: SeedLike = None) -> np.ndarray:
    """Zero exactly ``round(fraction * size)`` uniformly chosen elements."""
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must lie in [0, 1]")
    arr = np.asarray(img, dtype=np.float64).copy()
    k = int(round(fraction * arr.size))
    idx = rng_stream(seed).choice(arr.size, size=k, replace=False)
    arr.reshape(-1)[idx] = 0.0
    return arr


def apply_filter(img, cfg: FilterConfig, rng: SeedLike = None) -> np.ndarray:
    """Dispatch ``img`` to the strategy named in ``cfg``."""
    seed = cfg.seed if rng is None else rng
    if cfg.strategy == "iwmf":
        return iwmf(img, cfg, seed)
    if cfg.strategy == "window_mean_noniter":
        return window_mean_noniter(img, cfg, seed)
    if cfg.strategy == "window_median_iter":
        return window_median_iter(img, cfg, seed)
    if cfg.strategy == "mean_filter":
        return mean_filter(img, cfg.window_size)
    if cfg.strategy == "median_filter":
        return median_filter(img, cfg.window_size)
    if cfg.strategy == "gaussian_noise":
        return gaussian_noise(img, cfg.noise_param, seed)
    return pepper_noise(img, cfg.noise_param, seed)


def diff_histogram(a, b, bins: int = 51) -> tuple[np.ndarray, np.ndarray]:
    """Histogram of elementwise ``a - b`` over [-1, 1].

    Returns ``(counts, edges)`` as from :func:`numpy.histogram`.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return np.histogram(a - b, bins=bins, range=(-1.0, 1.0))
