"""Score collection, threshold calibration and the end-to-end verification protocol.

Subjects are synthetic: each one is a smooth seeded base image, and every
capture of a subject is the base plus a small brightness shift and pixel
noise.  Pair ``i`` uses subject ``i`` as the source (probe) and subject
``i + 1`` as the impersonation target.  Probes and attack outputs pass
through the defence; enrollment images are stored clean.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import zoom

from . import attacks as atk
from .core import rng_stream
from .diffusion import DiffusionConfig, IdentityDenoiser, Purifier
from .filters import FilterConfig
from .metrics import auc, crossing, eer, far, frr, roc_curve
from .verifier import ToyExtractor, cosine_similarity, extract, make_extractor

log = logging.getLogger(__name__)

ATTACK_NAMES = tuple(atk.ATTACKS)
CONDITIONS = ("imposter",) + ATTACK_NAMES


@dataclass
class ScoreSet:
    genuine: np.ndarray
    imposter: np.ndarray
    attacks: dict[str, np.ndarray] = field(default_factory=dict)
    # adversarial images scored against their source identity
    attacks_as_source: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64)
        self.imposter = np.asarray(self.imposter, dtype=np.float64)
        self.attacks = {k: np.asarray(v, dtype=np.float64) for k, v in self.attacks.items()}
        self.attacks_as_source = {k: np.asarray(v, dtype=np.float64) for k, v in self.attacks_as_source.items()}
        for name, arr in [("genuine", self.genuine), ("imposter", self.imposter), *self.attacks.items()]:
            if arr.size and (np.nanmin(arr) < -1 - 1e-9 or np.nanmax(arr) > 1 + 1e-9):
                raise ValueError(f"{name} scores must lie in [-1, 1]")

    def condition_scores(self, condition: str) -> np.ndarray:
        if condition == "imposter":
            return self.imposter
        if condition not in self.attacks:
            raise KeyError(f"no {condition!r} scores to calibrate on")
        return self.attacks[condition]


def calibrate_threshold(scores: ScoreSet, condition: str = "sgadv") -> float:
    """Threshold where FRR on genuine pairs meets FAR on the ``condition`` scores.

    ``condition`` is ``"imposter"`` or the name of an attack present in
    ``scores.attacks``.
    """
    return crossing(scores.genuine, scores.condition_scores(condition))[0]


@dataclass
class EvalReport:
    tau: float
    condition: str
    frr_genuine: float
    far_imposter: float
    eer: float
    eer_tau: float
    auc: float
    attack_far: dict[str, float] = field(default_factory=dict)
    attack_frr: dict[str, float] = field(default_factory=dict)
    curve_far: list[float] = field(default_factory=list)
    curve_tar: list[float] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown report keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def write_curve_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["far", "tar"])
            w.writerows(zip(map(repr, self.curve_far), map(repr, self.curve_tar)))

    def table(self) -> str:
        lines = [f"tau = {self.tau:.6f}  (FRR_genuine = FAR_{self.condition})",
                 f"{'rate':<22}{'value':>10}",
                 f"{'FRR genuine':<22}{self.frr_genuine:>10.4f}",
                 f"{'FAR imposter':<22}{self.far_imposter:>10.4f}"]
        for name in self.attack_far:
            lines.append(f"{'FAR ' + name:<22}{self.attack_far[name]:>10.4f}")
            lines.append(f"{'FRR ' + name + ' (src)':<22}{self.attack_frr[name]:>10.4f}")
        lines.append(f"{'EER':<22}{self.eer:>10.4f}")
        lines.append(f"{'AUC':<22}{self.auc:>10.4f}")
        return "\n".join(lines)


def build_report(scores: ScoreSet, condition: str, meta: Optional[dict] = None) -> EvalReport:
    """Calibrate once, then evaluate every score list at that threshold."""
    tau = calibrate_threshold(scores, condition)
    e, e_tau = eer(scores.genuine, scores.imposter)
    cf, ct, _ = roc_curve(scores.genuine, scores.imposter)
    return EvalReport(
        tau=tau, condition=condition,
        frr_genuine=frr(scores.genuine, tau), far_imposter=far(scores.imposter, tau),
        eer=e, eer_tau=e_tau, auc=auc(scores.genuine, scores.imposter),
        attack_far={k: far(v, tau) for k, v in scores.attacks.items()},
        attack_frr={k: frr(v, tau) for k, v in scores.attacks_as_source.items()},
        curve_far=[float(v) for v in cf], curve_tar=[float(v) for v in ct],
        meta=dict(meta or {}),
    )


def _upsample(low: np.ndarray, h: int, w: int) -> np.ndarray:
    g_h, g_w = low.shape[-2:]
    return zoom(low, (1, 1, h / g_h, w / g_w), order=1, mode="nearest")


def make_subjects(n: int, shape=(3, 32, 32), seed=0, scale: float = 0.5,
                  coarse=(4, 8), amplitudes=(0.25, 0.1)) -> np.ndarray:
    """Smooth per-subject base images around mid-gray.

    Each base is 0.5 plus bilinearly upsampled uniform noise fields at the
    ``coarse`` grid sizes, with amplitudes ``scale * amplitudes``.
    """
    rng = rng_stream(seed)
    c, h, w = shape
    out = np.full((n, c, h, w), 0.5)
    for g, a in zip(coarse, amplitudes):
        out += _upsample(rng.uniform(-a * scale, a * scale, size=(n, c, g, g)), h, w)
    return np.clip(out, 0.0, 1.0)


def capture(bases: np.ndarray, seed=0, brightness: float = 0.015, noise: float = 0.01) -> np.ndarray:
    """One capture per subject: base + global brightness shift + pixel noise."""
    rng = rng_stream(seed)
    n = len(bases)
    x = bases + rng.normal(0.0, brightness, size=(n, 1, 1, 1)) + rng.normal(0.0, noise, size=bases.shape)
    return np.clip(x, 0.0, 1.0)


@dataclass(frozen=True)
class ProtocolConfig:
    """One evaluation run: data, model, defence, attacks, calibration."""

    n_pairs: int = 100
    image_size: int = 32
    model_seed: int = 0
    data_seed: int = 0
    attack_seed: int = 0
    defense_seed: int = 0
    identity_scale: float = 0.5
    # defence; lam == 0 and sigma_y None means undefended
    lam: float = 0.0
    window_size: int = 3
    strategy: str = "iwmf"
    noise_param: float = 0.0
    sigma_y: Optional[float] = None
    eta: float = 0.85
    denoiser: str = "identity"
    randomized: bool = True
    attacks: tuple[str, ...] = ("sgadv",)
    condition: str = "sgadv"
    # applied on top of each attack preset when set
    t_max: Optional[int] = None
    epsilon: Optional[float] = None
    eot_samples: int = 1

    def __post_init__(self):
        if self.n_pairs < 2:
            raise ValueError("n_pairs must be >= 2")
        bad = set(self.attacks) - set(ATTACK_NAMES)
        if bad:
            raise ValueError(f"unknown attacks {sorted(bad)}; choose from {list(ATTACK_NAMES)}")
        if self.condition != "imposter" and self.condition not in self.attacks:
            raise ValueError(f"condition {self.condition!r} must be 'imposter' or one of the run's attacks")
        if self.denoiser not in ("identity", "none"):
            raise ValueError("denoiser must be 'identity' or 'none' in protocol runs")
        object.__setattr__(self, "attacks", tuple(self.attacks))
        # validate the defence settings eagerly
        self.filter_config()
        self.diffusion_config()

    def filter_config(self) -> Optional[FilterConfig]:
        if self.strategy == "iwmf" and self.lam == 0:
            return None
        return FilterConfig(lam=self.lam, window_size=self.window_size, strategy=self.strategy,
                            seed=self.defense_seed, noise_param=self.noise_param)

    def diffusion_config(self) -> Optional[DiffusionConfig]:
        if self.sigma_y is None:
            return None
        return DiffusionConfig(sigma_y=self.sigma_y, eta=self.eta, seed=self.defense_seed)

    def purifier(self) -> Purifier:
        den = IdentityDenoiser() if self.denoiser == "identity" else None
        return Purifier(self.filter_config(), self.diffusion_config(), den, randomized=self.randomized)


def _attack_config(cfg: ProtocolConfig, name: str) -> atk.AttackConfig:
    over = {"seed": cfg.attack_seed, "eot_samples": cfg.eot_samples}
    if cfg.t_max is not None:
        over["t_max"] = cfg.t_max
    if cfg.epsilon is not None:
        over["epsilon"] = cfg.epsilon
    return atk.preset(name, **over)


def run_attack(name: str, model: ToyExtractor, source, target_img, acfg: atk.AttackConfig,
               defense: Optional[Purifier] = None, surrogate: Optional[ToyExtractor] = None):
    """Dispatch one named attack.

    ``bim`` is the transfer setting and needs ``surrogate``; ``adaptive-sgadv``
    needs ``defense``.
    """
    if name == "fgsm":
        return atk.fgsm(model, source, extract(model, target_img), acfg)
    if name == "pgd":
        return atk.pgd(model, source, extract(model, target_img), acfg)
    if name == "bim":
        if surrogate is None:
            raise ValueError("bim runs against a surrogate model")
        return atk.bim(surrogate, source, extract(surrogate, target_img), acfg)
    if name == "sgadv":
        return atk.sgadv(model, source, target_img, acfg)
    if name == "adaptive-sgadv":
        if defense is None:
            raise ValueError("adaptive-sgadv needs a defence")
        return atk.adaptive_sgadv(model, source, target_img, acfg, defense)
    raise ValueError(f"unknown attack {name!r}")


def collect_scores(cfg: ProtocolConfig, model: Optional[ToyExtractor] = None) -> tuple[ScoreSet, dict]:
    """Generate data, run every attack and score everything through the defence."""
    shape = (3, cfg.image_size, cfg.image_size)
    model = model or make_extractor(cfg.model_seed, input_shape=shape)
    n = cfg.n_pairs
    data_rng = rng_stream([cfg.data_seed, 0])
    bases = make_subjects(n, shape, data_rng, cfg.identity_scale)
    enroll = capture(bases, data_rng)
    probe = capture(bases, data_rng)
    target_of = np.roll(np.arange(n), -1)

    defense = cfg.purifier()
    eval_rng = rng_stream([cfg.defense_seed, 2])

    def scored(x):
        return extract(model, defense(x, eval_rng))

    enroll_emb = extract(model, enroll)
    probe_emb = scored(probe)
    genuine = cosine_similarity(probe_emb, enroll_emb)
    imposter = cosine_similarity(probe_emb, enroll_emb[target_of])

    surrogate = None
    if "bim" in cfg.attacks:
        surrogate = make_extractor(cfg.model_seed + 1, input_shape=shape)
    attack_scores, as_source, iters = {}, {}, {}
    for name in cfg.attacks:
        res = run_attack(name, model, probe, enroll[target_of], _attack_config(cfg, name),
                         defense=defense, surrogate=surrogate)
        emb = scored(res.adversarial)
        attack_scores[name] = cosine_similarity(emb, enroll_emb[target_of])
        as_source[name] = cosine_similarity(emb, enroll_emb)
        iters[name] = float(np.mean(res.iterations_used))
        log.info("%s: mean iterations %.1f", name, iters[name])
    return ScoreSet(genuine, imposter, attack_scores, as_source), {"mean_iterations": iters}


def run_protocol(cfg: ProtocolConfig, model: Optional[ToyExtractor] = None) -> EvalReport:
    """Collect scores, calibrate ``tau`` once on ``cfg.condition`` and report every rate there."""
    scores, extra = collect_scores(cfg, model)
    meta = {"config": protocol_to_dict(cfg), **extra}
    return build_report(scores, cfg.condition, meta)


def protocol_to_dict(cfg: ProtocolConfig) -> dict:
    d = asdict(cfg)
    d["attacks"] = list(cfg.attacks)
    return d

