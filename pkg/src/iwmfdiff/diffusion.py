"""Gaussian corruption plus a DDRM-style denoising reverse chain.

The chain starts from the corrupted image ``y`` at noise level ``sigma_y`` and
walks the remaining schedule entries (all strictly below ``sigma_y``) with::

    x_t ~ N(xhat + sqrt(1 - eta^2) * sigma_t * (y - xhat) / sigma_y,  eta^2 * sigma_t^2)

where ``xhat`` is the previous state itself (no model) or a denoiser's
estimate from it.  Intermediate states are never clamped; only ``x_0`` is.
"""

from __future__ import annotations

import logging
import math
import subprocess
from dataclasses import dataclass, field
from io import BytesIO
from typing import Optional, Protocol

import numpy as np

from .core import SeedLike, clamp01, read_raw, rng_stream, write_raw
from .filters import FilterConfig, WINDOW_STRATEGIES, apply_filter, window_filter_batch

log = logging.getLogger(__name__)

SIGMA_0 = 0.0001


def default_schedule(n: int = 100, sigma_max: float = 0.30, sigma_min: float = SIGMA_0) -> tuple[float, ...]:
    return tuple(float(v) for v in np.geomspace(sigma_max, sigma_min, n))


@dataclass(frozen=True)
class DiffusionConfig:
    """Reverse-chain settings.

    ``sigma_y=None`` disables the diffusion stage entirely; ``sigma_y=0`` is
    the degenerate mode that only adds ``N(0, sigma_0^2)`` noise.
    """

    sigma_y: Optional[float] = 0.15
    eta: float = 0.85
    eta_b: float = 1.0
    schedule: tuple[float, ...] = field(default_factory=default_schedule)
    seed: int = 0

    def __post_init__(self):
        sched = np.asarray(self.schedule, dtype=np.float64)
        if sched.ndim != 1 or len(sched) == 0:
            raise ValueError("schedule must be a non-empty list")
        if np.any(sched <= 0) or np.any(np.diff(sched) >= 0):
            raise ValueError("schedule must be positive and strictly decreasing")
        if not 0 < self.eta <= 1 or not 0 < self.eta_b <= 1:
            raise ValueError("eta and eta_b must lie in (0, 1]")
        if self.sigma_y is not None and self.sigma_y < 0:
            raise ValueError("sigma_y must be >= 0")
        object.__setattr__(self, "schedule", tuple(float(v) for v in sched))

    @property
    def sigma_0(self) -> float:
        return self.schedule[-1]


class Denoiser(Protocol):
    def predict(self, x: np.ndarray, sigma: float) -> np.ndarray: ...


class IdentityDenoiser:
    """Returns its input; reproduces the model-free recursion."""

    def predict(self, x, sigma):
        return x


@dataclass
class GaussianPriorDenoiser:
    """Posterior mean for data drawn element-wise from ``N(mean, var)``.

    For ``x = clean + sigma * noise`` the MMSE estimate is the linear
    shrinkage ``mean + var / (var + sigma^2) * (x - mean)``.
    """

    mean: float | np.ndarray
    var: float | np.ndarray

    def predict(self, x, sigma):
        gain = self.var / (self.var + sigma * sigma)
        return self.mean + gain * (np.asarray(x) - self.mean)


@dataclass
class ExternalDenoiser:
    """Runs a denoiser in a separate process, one process per call.

    The command reads two raw tensors from stdin: the state ``x_t``, then a
    1x1x1 tensor holding ``sigma_t``. It writes the estimate as one raw
    tensor to stdout.  Batches are sent image by image.
    """

    command: list[str]
    timeout: float = 60.0

    def _one(self, x: np.ndarray, sigma: float) -> np.ndarray:
        payload = BytesIO()
        write_raw(x, payload)
        write_raw(np.full((1, 1, 1), sigma), payload)
        try:
            proc = subprocess.run(self.command, input=payload.getvalue(), capture_output=True,
                                  timeout=self.timeout, check=False)
        except subprocess.TimeoutExpired as exc:
            raise RuntimeError(f"external denoiser timed out after {self.timeout}s") from exc
        if proc.returncode != 0:
            raise RuntimeError(f"external denoiser exited with {proc.returncode}: "
                               f"{proc.stderr.decode(errors='replace').strip()}")
        out = read_raw(BytesIO(proc.stdout))
        if out.shape != x.shape:
            raise RuntimeError(f"external denoiser returned shape {out.shape}, expected {x.shape}")
        return out

    def predict(self, x, sigma):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 4:
            return np.stack([self._one(xi, sigma) for xi in x])
        return self._one(x, sigma)


def corrupt(x_iwmf, sigma_y: float, seed: SeedLike = None) -> np.ndarray:
    """``y = x + N(0, sigma_y^2)``, unclamped."""
    if sigma_y < 0:
        raise ValueError("sigma_y must be >= 0")
    x = np.asarray(x_iwmf, dtype=np.float64)
    if sigma_y == 0:
        return x.copy()
    return x + rng_stream(seed).normal(0.0, sigma_y, size=x.shape)


def chain_start(y, cfg: DiffusionConfig) -> tuple[np.ndarray, int]:
    """Initial state and schedule index of the reverse chain.

    The chain is conditioned at ``sigma_T = sigma_y`` and starts from
    ``x_T = y``.  When ``sigma_y`` is not a schedule entry the nearest entry
    is used as the start index; every later entry is still below
    ``sigma_y``.
    """
    sy = cfg.sigma_y
    if sy is None or sy <= 0:
        raise ValueError("chain_start needs sigma_y > 0")
    sched = np.asarray(cfg.schedule)
    if sy < sched[-1] or sy > sched[0]:
        raise ValueError(f"sigma_y={sy} outside schedule range [{sched[-1]}, {sched[0]}]")
    idx = int(np.argmin(np.abs(sched - sy)))
    if sched[idx] != sy:
        log.info("sigma_y=%g not on schedule; starting at index %d (sigma=%g)", sy, idx, sched[idx])
    return np.array(y, dtype=np.float64), idx


def chain_sigmas(cfg: DiffusionConfig) -> list[float]:
    """Noise levels of the reverse steps actually executed, in order."""
    _, idx = chain_start(0.0, cfg)
    return list(cfg.schedule[idx + 1:])


def reverse_step(x_next, y, sigma_t: float, cfg: DiffusionConfig, denoiser: Optional[Denoiser] = None,
                 rng: SeedLike = None, sigma_next: Optional[float] = None) -> np.ndarray:
    """Draw ``x_t`` given ``x_{t+1}`` for a level ``sigma_t < sigma_y``.

    Args:
        x_next: previous state ``x_{t+1}``.
        y: the corrupted observation.
        sigma_t: noise level of the state being drawn.
        cfg: chain settings (``sigma_y``, ``eta``).
        denoiser: optional estimator; without one ``xhat = x_next``.
        rng: seed or generator for the step noise.
        sigma_next: noise level handed to the denoiser (defaults to ``sigma_t``).
    """
    sy = cfg.sigma_y
    if not sy:
        raise ValueError("reverse_step needs sigma_y > 0")
    if sigma_t >= sy:
        raise ValueError(f"reverse_step needs sigma_t < sigma_y ({sigma_t} >= {sy})")
    x_next = np.asarray(x_next, dtype=np.float64)
    if denoiser is None:
        xhat = x_next
    else:
        xhat = denoiser.predict(x_next, sigma_t if sigma_next is None else sigma_next)
    eta = cfg.eta
    out = np.subtract(y, xhat)
    out *= math.sqrt(1.0 - eta * eta) * sigma_t / sy
    out += xhat
    noise = rng_stream(rng).standard_normal(x_next.shape)
    noise *= eta * sigma_t
    out += noise
    return out


def ddrm_denoise(x_iwmf, cfg: DiffusionConfig, denoiser: Optional[Denoiser] = None,
                 rng: SeedLike = None, add_noise: bool = True) -> np.ndarray:
    """Corrupt ``x_iwmf`` at ``sigma_y`` and run the reverse chain to ``x_0``.

    ``add_noise=False`` skips the corruption and runs the chain on the clean
    input (the noiseless-diffusion benchmark row).  With ``sigma_y == 0`` the
    result is ``x_iwmf + N(0, sigma_0^2)``, clamped.
    """
    rng = rng_stream(cfg.seed if rng is None else rng)
    x = np.asarray(x_iwmf, dtype=np.float64)
    if cfg.sigma_y is None:
        raise ValueError("diffusion stage is disabled (sigma_y is None)")
    if cfg.sigma_y == 0:
        return clamp01(x + rng.normal(0.0, cfg.sigma_0, size=x.shape))
    y = corrupt(x, cfg.sigma_y, rng) if add_noise else x.copy()
    state, _ = chain_start(y, cfg)
    level = cfg.sigma_y
    for sigma_t in chain_sigmas(cfg):
        if not sigma_t < cfg.sigma_y:
            raise RuntimeError("reverse chain would step at or above sigma_y")
        state = reverse_step(state, y, sigma_t, cfg, denoiser, rng, sigma_next=level)
        level = sigma_t
    return clamp01(state)


@dataclass
class Purifier:
    """Blur-then-restore defence applied to an image or a batch.

    With ``randomized=True`` every call draws fresh window positions and
    noise from the ``rng`` argument; otherwise the seeds stored in the
    configs are reused on every call and for every image.
    """

    filter_cfg: Optional[FilterConfig] = None
    diffusion_cfg: Optional[DiffusionConfig] = None
    denoiser: Optional[Denoiser] = None
    randomized: bool = True

    @property
    def is_identity(self) -> bool:
        no_filter = self.filter_cfg is None or (
            self.filter_cfg.strategy in WINDOW_STRATEGIES and self.filter_cfg.lam == 0)
        no_diff = self.diffusion_cfg is None or self.diffusion_cfg.sigma_y is None
        return no_filter and no_diff

    def _blur(self, x: np.ndarray, rng: np.random.Generator | None) -> np.ndarray:
        cfg = self.filter_cfg
        if cfg is None:
            return x
        if x.ndim == 3:
            return apply_filter(x, cfg, rng)
        if cfg.strategy in WINDOW_STRATEGIES:
            seeds = [cfg.seed] * len(x) if rng is None else rng.integers(0, 2**63 - 1, size=len(x))
            return window_filter_batch(x, cfg, seeds)
        return np.stack([apply_filter(xi, cfg, rng) for xi in x])

    def _restore(self, x: np.ndarray, rng: np.random.Generator | None) -> np.ndarray:
        cfg = self.diffusion_cfg
        if cfg is None or cfg.sigma_y is None:
            return x
        if rng is not None or x.ndim == 3:
            return ddrm_denoise(x, cfg, self.denoiser, rng)
        return np.stack([ddrm_denoise(xi, cfg, self.denoiser) for xi in x])

    def __call__(self, x, rng: SeedLike = None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.is_identity:
            return x.copy()
        if self.randomized:
            rng = rng_stream(rng) if rng is not None else np.random.default_rng()
        else:
            rng = None
        return self._restore(self._blur(x, rng), rng)


def purify(img, fcfg: Optional[FilterConfig], dcfg: Optional[DiffusionConfig],
           denoiser: Optional[Denoiser] = None) -> np.ndarray:
    """Blur with ``fcfg`` then restore with ``dcfg`` using the configs' own seeds.

    Either stage may be ``None`` (a ``DiffusionConfig`` with ``sigma_y=None``
    also disables restoration), so ``purify(x, None, None)`` is the identity.
    """
    return Purifier(fcfg, dcfg, denoiser, randomized=False)(img)
