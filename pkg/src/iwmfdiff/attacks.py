"""L-infinity sign-gradient impersonation attacks on the toy verifier.

Every attack here minimises the feature distance ``J = ||f(x) - f(target)||``
between the adversarial image and the target identity, i.e. each step moves
along ``-sign(grad J)``.  Iterates are projected onto the epsilon-ball around
the source and onto the [0, 1] box after every step.

Attacks accept a single image or a batch; batched inputs give per-row
``iterations_used``, ``final_loss``, ``converged`` and ``degenerate``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .core import rng_stream
from .verifier import ToyExtractor, extract, loss_and_grad

Defense = Callable[..., np.ndarray]


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.03
    alpha: float = 0.001
    t_max: int = 40
    tau_conv: float = 0.0001
    eot_samples: int = 1
    seed: int = 0
    random_start: bool = True

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.eot_samples < 1:
            raise ValueError("eot_samples must be >= 1")


PRESETS: dict[str, AttackConfig] = {
    "fgsm": AttackConfig(epsilon=0.03, alpha=0.03, t_max=1, random_start=False),
    "pgd": AttackConfig(epsilon=0.03, alpha=0.001, t_max=40, random_start=True),
    "bim": AttackConfig(epsilon=4 / 255, alpha=0.001, t_max=20, random_start=False),
    "sgadv": AttackConfig(epsilon=0.03, alpha=0.001, t_max=1000, tau_conv=0.0001, random_start=True),
    "adaptive-sgadv": AttackConfig(epsilon=0.03, alpha=0.001, t_max=1000, tau_conv=0.0001, random_start=True),
}

# steps averaged by the plateau test
CONV_WINDOW = 5


def preset(name: str, **overrides) -> AttackConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown attack {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(cfg, **overrides)


@dataclass
class AttackResult:
    adversarial: np.ndarray
    iterations_used: np.ndarray | int
    final_loss: np.ndarray | float
    converged: np.ndarray | bool
    degenerate: np.ndarray | bool


def clip_to_ball(x: np.ndarray, source: np.ndarray, eps: float) -> np.ndarray:
    """Project onto ``[source - eps, source + eps]`` intersected with [0, 1]."""
    return np.clip(np.clip(x, source - eps, source + eps), 0.0, 1.0)


def _batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == 3 else (x, False)


def _unbatch(res: AttackResult, single: bool) -> AttackResult:
    if not single:
        return res
    return AttackResult(res.adversarial[0], int(res.iterations_used[0]), float(res.final_loss[0]),
                        bool(res.converged[0]), bool(res.degenerate[0]))


def eot_gradient(model: ToyExtractor, x, target_emb, defense: Optional[Defense], k: int = 1,
                 seed=None) -> tuple[np.ndarray, np.ndarray]:
    """Mean BPDA gradient over ``k`` independent draws of the defence.

    Each draw purifies ``x`` and takes the gradient at the purified image,
    which is then used as-is for ``x`` (straight-through).  Returns
    ``(mean_loss, mean_grad)``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = rng_stream(seed)
    loss_sum = grad_sum = 0.0
    for _ in range(k):
        xp = x if defense is None else defense(x, rng)
        loss, grad = loss_and_grad(model, xp, target_emb)
        loss_sum = loss_sum + loss
        grad_sum = grad_sum + grad
    return loss_sum / k, grad_sum / k


def _sign_descent(model: ToyExtractor, source, target_emb, cfg: AttackConfig,
                  defense: Optional[Defense] = None, plateau_stop: bool = False) -> AttackResult:
    src, single = _batch(source)
    target = np.asarray(target_emb, dtype=np.float64)
    n = len(src)
    eps = cfg.epsilon
    start_rng = rng_stream(cfg.seed)
    # separate stream so the defence never shifts the random start
    defense_rng = rng_stream([cfg.seed, 1])
    x = src.copy()
    if cfg.random_start:
        x = clip_to_ball(src + start_rng.uniform(-eps, eps, size=src.shape), src, eps)

    active = np.ones(n, dtype=bool)
    converged = np.zeros(n, dtype=bool)
    degenerate = np.zeros(n, dtype=bool)
    iters = np.zeros(n, dtype=int)
    history: list[np.ndarray] = []
    for t in range(cfg.t_max):
        loss, grad = eot_gradient(model, x, target, defense, cfg.eot_samples, defense_rng)
        history.append(loss)
        flat = np.abs(grad).reshape(n, -1).max(axis=1) == 0
        if t == 0:
            degenerate = flat.copy()
        if plateau_stop:
            stalled = flat.copy()
            if len(history) > CONV_WINDOW:
                recent = np.abs(np.diff(np.stack(history[-CONV_WINDOW - 1:]), axis=0))
                stalled |= recent.mean(axis=0) < cfg.tau_conv
            newly = active & stalled
            converged |= newly
            active &= ~stalled
        if not active.any():
            break
        step = x - cfg.alpha * np.sign(grad)
        x = np.where(active[:, None, None, None], clip_to_ball(step, src, eps), x)
        iters += active
    final = loss_and_grad(model, x if defense is None else defense(x, defense_rng), target)[0]
    return _unbatch(AttackResult(x, iters, np.asarray(final), converged, degenerate), single)


def fgsm(model: ToyExtractor, source, target_emb, cfg: AttackConfig = PRESETS["fgsm"]) -> AttackResult:
    """One signed step of size epsilon toward the target embedding."""
    src, single = _batch(source)
    loss, grad = loss_and_grad(model, src, target_emb)
    degenerate = np.abs(grad).reshape(len(src), -1).max(axis=1) == 0
    adv = np.clip(src - cfg.epsilon * np.sign(grad), 0.0, 1.0)
    final = loss_and_grad(model, adv, target_emb)[0]
    res = AttackResult(adv, np.ones(len(src), dtype=int), final, np.zeros(len(src), dtype=bool), degenerate)
    return _unbatch(res, single)


def pgd(model: ToyExtractor, source, target_emb, cfg: AttackConfig = PRESETS["pgd"]) -> AttackResult:
    """Projected sign-gradient descent, optionally from a uniform random start."""
    return _sign_descent(model, source, target_emb, cfg)


def bim(model: ToyExtractor, source, target_emb, cfg: AttackConfig = PRESETS["bim"]) -> AttackResult:
    """Basic iterative method: PGD without the random start."""
    return _sign_descent(model, source, target_emb, replace(cfg, random_start=False))


def sgadv(model: ToyExtractor, source, target_img, cfg: AttackConfig = PRESETS["sgadv"]) -> AttackResult:
    """Similarity-guided attack toward ``f(target_img)``.

    Stops per image once the mean absolute loss change over the last five
    steps drops below ``tau_conv`` or after ``t_max`` steps.
    """
    target_emb = extract(model, target_img)
    return _sign_descent(model, source, target_emb, cfg, plateau_stop=True)


def adaptive_sgadv(model: ToyExtractor, source, target_img, cfg: AttackConfig, defense: Defense) -> AttackResult:
    """SGADV through a purification defence using straight-through gradients.

    Each step purifies the current iterate, computes the loss gradient at
    the purified image and applies its sign to the unpurified iterate.
    ``defense(x, rng)`` is called once per EOT sample per step.
    """
    target_emb = extract(model, target_img)
    return _sign_descent(model, source, target_emb, cfg, defense=defense, plateau_stop=True)


ATTACKS = {
    "fgsm": fgsm,
    "pgd": pgd,
    "bim": bim,
    "sgadv": sgadv,
    "adaptive-sgadv": adaptive_sgadv,
}
