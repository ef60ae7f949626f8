"""Command-line entry point: ``purify``, ``attack``, ``eval``, ``sweep`` and ``bench``.

Every subcommand writes into a run directory holding its outputs, the fully
resolved settings as ``config.ini`` (replayable with ``--config``) and a
``manifest.json`` with the settings hash and seeds.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import attacks as atk
from . import bench as bench_mod
from .core import load_image, rng_stream, save_image, write_raw
from .diffusion import DiffusionConfig, ExternalDenoiser, IdentityDenoiser, Purifier
from .evaluation import ATTACK_NAMES, ProtocolConfig, run_attack, run_protocol
from .filters import STRATEGIES, FilterConfig
from .verifier import ToyExtractor, make_extractor

log = logging.getLogger("iwmfdiff")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

# reference defence systems
DEFENSE_PRESETS = {
    "none": {"lam": 0.0, "sigma_y": None},
    "diffpure": {"lam": 0.0, "sigma_y": 0.15},
    "iwmf": {"lam": 0.40, "sigma_y": None},
    "iwmf-diff": {"lam": 0.25, "sigma_y": 0.15},
}
DEFAULT_LAMBDA = 0.25
COMMANDS = ("purify", "attack", "eval", "sweep", "bench")
# settings that never change results, left out of the hash
_UNHASHED = {"config", "out", "threads", "verbose", "command"}


class UsageError(Exception):
    pass


@contextmanager
def _config_errors():
    """Report invalid settings (out-of-range values, unknown names) as usage errors."""
    try:
        yield
    except ValueError as exc:
        raise UsageError(str(exc)) from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _opt_float(text):
    if str(text).strip().lower() in ("none", ""):
        return None
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'none', got {text!r}") from None


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _name_list(choices):
    def parse(text):
        items = [t.strip() for t in str(text).split(",") if t.strip()]
        bad = [t for t in items if t not in choices]
        if bad:
            raise argparse.ArgumentTypeError(f"unknown names {bad}; choose from {list(choices)}")
        return items
    return parse


def _grid(parse_one):
    def parse(text):
        return [parse_one(t.strip()) for t in str(text).split(",") if t.strip()]
    return parse


# ---------------------------------------------------------------- arguments

def _add_run_args(p):
    p.add_argument("--config", help="INI file; the section named after the subcommand supplies defaults")
    p.add_argument("--out", help="run directory (default: runs/<subcommand>-<settings hash>)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker count for independent images or runs (default: CPU count; 1 = sequential)")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_defense_args(p, with_seed=True):
    g = p.add_argument_group("defence")
    g.add_argument("--defense", choices=sorted(DEFENSE_PRESETS),
                   help="reference system: none; diffpure (sigma_y 0.15); iwmf (lambda 0.40); "
                        "iwmf-diff (lambda 0.25, sigma_y 0.15). Explicit flags override it")
    g.add_argument("--lambda", dest="lam", type=float,
                   help=f"window amount (default {DEFAULT_LAMBDA}; presets: iwmf 0.40, iwmf-diff 0.25)")
    g.add_argument("--window-size", type=int, default=3, help="window side in pixels (default 3)")
    g.add_argument("--sigma-y", type=_opt_float,
                   help="corruption std of the diffusion stage; 'none' disables it "
                        "(default none; presets: iwmf-diff and diffpure 0.15)")
    g.add_argument("--strategy", choices=STRATEGIES, default="iwmf", help="blurring strategy (default iwmf)")
    g.add_argument("--noise-param", type=float, default=0.0,
                   help="sigma or fraction for the gaussian_noise / pepper_noise strategies (default 0)")
    g.add_argument("--eta", type=float, default=0.85, help="reverse-chain variance control (default 0.85)")
    g.add_argument("--denoiser", default="identity",
                   help="'identity', 'none', or 'cmd:<command line>' for an out-of-process denoiser "
                        "(default identity)")
    if with_seed:
        g.add_argument("--seed", type=int, default=0, help="defence seed (default 0)")


def _add_protocol_args(p):
    g = p.add_argument_group("protocol")
    g.add_argument("--pairs", type=int, default=100, help="attack pairs / subjects (default 100)")
    g.add_argument("--image-size", type=int, default=32, help="square image side (default 32)")
    g.add_argument("--model-seed", type=int, default=0, help="toy extractor seed (default 0)")
    g.add_argument("--data-seed", type=int, default=0, help="synthetic subject seed (default 0)")
    g.add_argument("--attack-seed", type=int, default=0, help="attack random-start seed (default 0)")
    g.add_argument("--identity-scale", type=float, default=0.5,
                   help="contrast of the synthetic subjects (default 0.5)")
    g.add_argument("--attacks", type=_name_list(ATTACK_NAMES), default=["sgadv"],
                   help=f"comma list from {','.join(ATTACK_NAMES)} (default sgadv)")
    g.add_argument("--condition", default="auto",
                   help="calibration list: 'imposter' or an attack name; 'auto' picks per system "
                        "(imposter when undefended, sgadv otherwise)")
    g.add_argument("--derandomize", type=_bool, nargs="?", const=True, default=False,
                   help="reuse the defence seed on every call instead of fresh randomness")
    g.add_argument("--t-max", type=int, help="override every attack's iteration cap")
    g.add_argument("--epsilon", type=float, help="override every attack's budget")
    g.add_argument("--eot-samples", type=int, default=1, help="EOT draws per adaptive step (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="iwmfdiff", description="Window-mean purification defence toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("purify", help="blur and restore image files")
    p.add_argument("inputs", nargs="*", help="PNG or raw-tensor images")
    _add_defense_args(p)
    _add_run_args(p)

    p = sub.add_parser("attack", help="craft an impersonation example with a named preset")
    p.add_argument("--attack", required=True, choices=list(ATTACK_NAMES),
                   help="presets: fgsm (eps 0.03); pgd (eps 0.03, alpha 0.001, t_max 40); "
                        "bim (eps 4/255, alpha 0.001, t_max 20); sgadv and adaptive-sgadv "
                        "(eps 0.03, alpha 0.001, t_max 1000, tau_conv 0.0001)")
    p.add_argument("--source", required=True, help="image to perturb")
    p.add_argument("--target", required=True, help="image of the identity to impersonate")
    p.add_argument("--epsilon", type=float, help="L-inf budget (preset: 0.03; bim 4/255)")
    p.add_argument("--alpha", type=float, help="step size (preset: 0.001; fgsm takes one step of eps)")
    p.add_argument("--t-max", type=int, help="iteration cap (preset: pgd 40, bim 20, sgadv 1000)")
    p.add_argument("--tau-conv", type=float, help="sgadv plateau tolerance (preset: 0.0001)")
    p.add_argument("--eot-samples", type=int, help="EOT draws per step (default 1)")
    p.add_argument("--attack-seed", type=int, default=0, help="random-start seed (default 0)")
    p.add_argument("--model-seed", type=int, default=0, help="toy extractor seed (default 0)")
    p.add_argument("--model", help="directory with dumped extractor weights (overrides --model-seed)")
    p.add_argument("--derandomize", type=_bool, nargs="?", const=True, default=False,
                   help="adaptive-sgadv only: fixed-seed defence")
    p.add_argument("--format", choices=("raw", "png"), default="raw", help="output image format (default raw)")
    _add_defense_args(p)
    _add_run_args(p)

    p = sub.add_parser("eval", help="run the verification protocol and report FRR/FAR/EER/AUC")
    _add_protocol_args(p)
    _add_defense_args(p)
    _add_run_args(p)

    p = sub.add_parser("sweep", help="evaluate a lambda x sigma_y grid")
    p.add_argument("--lambdas", type=_grid(float), default=[0.0, 0.25], help="comma list (default 0,0.25)")
    p.add_argument("--sigma-ys", type=_grid(_opt_float), default=[None, 0.15],
                   help="comma list, 'none' disables diffusion (default none,0.15)")
    _add_protocol_args(p)
    _add_defense_args(p)
    _add_run_args(p)

    p = sub.add_parser("bench", help="time the purification pipelines")
    p.add_argument("--strategies", type=_name_list(tuple(bench_mod.PIPELINES)),
                   default=list(bench_mod.PIPELINES), help="comma list (default: all six rows)")
    p.add_argument("--size", type=int, default=112, help="image side (default 112)")
    p.add_argument("--batch", type=int, default=500, help="batch size (default 500)")
    p.add_argument("--repeats", type=int, default=3, help="timed repetitions (default 3)")
    p.add_argument("--seed", type=int, default=0, help="input and pipeline seed (default 0)")
    _add_run_args(p)
    return parser


# ----------------------------------------------------------- config files

def _subparser(parser, name) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _config_defaults(sp: argparse.ArgumentParser, section: configparser.SectionProxy) -> dict:
    actions = {a.dest: a for a in sp._actions if a.dest not in ("help", "config")}
    out = {}
    for key, raw in section.items():
        dest = key.replace("-", "_")
        if dest == "lambda":
            dest = "lam"
        if dest not in actions:
            raise UsageError(f"unknown key {key!r} in [{section.name}]")
        action = actions[dest]
        try:
            if isinstance(action, argparse._StoreTrueAction):
                val = _bool(raw)
            elif action.nargs in ("+", "*"):
                val = raw.split()
            elif action.type is not None:
                val = action.type(raw)
            else:
                val = raw
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"bad value for {key!r} in [{section.name}]: {exc}") from None
        if action.choices is not None and not isinstance(val, list) and val not in action.choices:
            raise UsageError(f"bad value for {key!r}: {val!r} not in {list(action.choices)}")
        out[dest] = val
    return out


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    command = next((a for a in argv if a in COMMANDS), None)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config and command:
        cp = configparser.ConfigParser(interpolation=None)
        if not cp.read(known.config):
            raise UsageError(f"cannot read config file {known.config}")
        extra = set(cp.sections()) - set(COMMANDS)
        if extra:
            raise UsageError(f"unknown config sections {sorted(extra)}")
        if cp.has_section(command):
            sp = _subparser(parser, command)
            defaults = _config_defaults(sp, cp[command])
            # values from the file satisfy required flags
            for a in sp._actions:
                if a.dest in defaults:
                    a.required = False
            sp.set_defaults(**defaults)
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("iwmfdiff: error: a subcommand is required " + f"({', '.join(COMMANDS)})")
    return args


# ------------------------------------------------------------- run records

def _settings(args) -> dict:
    d = {k: v for k, v in vars(args).items() if k not in _UNHASHED}
    return dict(sorted(d.items()))


def settings_hash(args) -> str:
    return hashlib.sha256(json.dumps(_settings(args), sort_keys=True, default=str).encode()).hexdigest()


def _ini_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (list, tuple)):
        return ",".join(_ini_value(x) for x in v)
    return str(v)


def _run_dir(args) -> Path:
    d = Path(args.out) if args.out else Path("runs") / f"{args.command}-{settings_hash(args)[:10]}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_records(run_dir: Path, args, outputs: list[str], extra: dict | None = None) -> None:
    settings = _settings(args)
    cp = configparser.ConfigParser(interpolation=None)
    # unset keys are left out so a replay falls back to the same defaults
    section = {k: _ini_value(v) for k, v in settings.items() if v is not None}
    if args.command == "purify":
        section["inputs"] = " ".join(args.inputs)
    cp[args.command] = section
    with open(run_dir / "config.ini", "w") as fh:
        cp.write(fh)
    manifest = {
        "command": args.command,
        "version": __version__,
        "config_sha256": settings_hash(args),
        "seeds": {k: v for k, v in settings.items() if k.endswith("seed")},
        "settings": settings,
        "outputs": outputs,
        **(extra or {}),
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")


# ------------------------------------------------------------- defence glue

def _resolve_defense(args) -> tuple[float, float | None]:
    preset = DEFENSE_PRESETS[args.defense] if args.defense else {}
    lam = args.lam if args.lam is not None else preset.get("lam", DEFAULT_LAMBDA)
    sigma_y = args.sigma_y if args.sigma_y is not None else preset.get("sigma_y")
    return lam, sigma_y


def _denoiser(spec: str):
    if spec == "identity":
        return IdentityDenoiser()
    if spec == "none":
        return None
    if spec.startswith("cmd:") and spec[4:].strip():
        import shlex
        return ExternalDenoiser(shlex.split(spec[4:]))
    raise UsageError(f"bad --denoiser {spec!r}; use identity, none or cmd:<command>")


def _purifier(args, randomized: bool) -> Purifier:
    lam, sigma_y = _resolve_defense(args)
    fcfg = None
    if not (args.strategy == "iwmf" and lam == 0):
        fcfg = FilterConfig(lam=lam, window_size=args.window_size, strategy=args.strategy,
                            seed=args.seed, noise_param=args.noise_param)
    dcfg = None if sigma_y is None else DiffusionConfig(sigma_y=sigma_y, eta=args.eta, seed=args.seed)
    return Purifier(fcfg, dcfg, _denoiser(args.denoiser), randomized=randomized)


def _protocol(args, lam=None, sigma_y=None, grid=False) -> ProtocolConfig:
    dlam, dsig = _resolve_defense(args)
    lam = dlam if not grid else lam
    sigma_y = dsig if not grid else sigma_y
    if args.denoiser not in ("identity", "none"):
        raise UsageError("eval and sweep support --denoiser identity or none")
    defended = not (args.strategy == "iwmf" and lam == 0) or sigma_y is not None
    cond = args.condition
    if cond == "auto":
        cond = "sgadv" if defended else "imposter"
        if cond == "sgadv" and "sgadv" not in args.attacks:
            cond = args.attacks[0] if args.attacks else "imposter"
    return ProtocolConfig(
        n_pairs=args.pairs, image_size=args.image_size, model_seed=args.model_seed,
        data_seed=args.data_seed, attack_seed=args.attack_seed, defense_seed=args.seed,
        identity_scale=args.identity_scale, lam=lam, window_size=args.window_size,
        strategy=args.strategy, noise_param=args.noise_param, sigma_y=sigma_y, eta=args.eta,
        denoiser=args.denoiser, randomized=not args.derandomize, attacks=tuple(args.attacks),
        condition=cond, t_max=args.t_max, epsilon=args.epsilon, eot_samples=args.eot_samples)


# ------------------------------------------------------------- subcommands

def cmd_purify(args) -> int:
    if not args.inputs:
        raise UsageError("purify needs at least one input image")
    with _config_errors():
        pur = _purifier(args, randomized=True)
    for path in args.inputs:
        if not Path(path).is_file():
            raise FileNotFoundError(path)
    run_dir = _run_dir(args)
    names = [Path(p).name for p in args.inputs]
    if len(set(names)) != len(names):
        raise UsageError("input file names must be distinct")

    def one(i_path):
        i, path = i_path
        dest = run_dir / Path(path).name
        if pur.is_identity:
            shutil.copyfile(path, dest)
        else:
            save_image(pur(load_image(path), rng_stream([args.seed, i])), dest)
        return str(dest)

    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        outputs = list(pool.map(one, enumerate(args.inputs)))
    _write_records(run_dir, args, outputs)
    for o in outputs:
        print(o)
    return EXIT_OK


def cmd_attack(args) -> int:
    over = {k: getattr(args, k) for k in ("epsilon", "alpha", "t_max", "tau_conv", "eot_samples")
            if getattr(args, k) is not None}
    with _config_errors():
        acfg = atk.preset(args.attack, seed=args.attack_seed, **over)
        defense = _purifier(args, randomized=not args.derandomize) if args.attack == "adaptive-sgadv" else None
    src = load_image(args.source)
    tgt = load_image(args.target)
    if src.shape != tgt.shape:
        raise ValueError(f"source shape {src.shape} differs from target shape {tgt.shape}")
    if args.model:
        model = ToyExtractor.load(args.model)
    else:
        model = make_extractor(args.model_seed, input_shape=src.shape)
    surrogate = make_extractor(args.model_seed + 1, input_shape=src.shape) if args.attack == "bim" else None
    res = run_attack(args.attack, model, src, tgt, acfg, defense=defense, surrogate=surrogate)
    run_dir = _run_dir(args)
    out = run_dir / ("adversarial.png" if args.format == "png" else "adversarial.rten")
    if args.format == "png":
        save_image(res.adversarial, out)
    else:
        with open(out, "wb") as fh:
            write_raw(res.adversarial, fh)
    meta = {
        "attack": args.attack,
        "attack_config": asdict(acfg),
        "iterations_used": int(res.iterations_used),
        "final_loss": float(res.final_loss),
        "converged": bool(res.converged),
        "degenerate": bool(res.degenerate),
        "linf": float(np.max(np.abs(res.adversarial - src))),
    }
    (run_dir / "result.json").write_text(json.dumps(meta, indent=2) + "\n")
    _write_records(run_dir, args, [str(out), str(run_dir / "result.json")])
    print(json.dumps(meta))
    return EXIT_OK


def cmd_eval(args) -> int:
    with _config_errors():
        cfg = _protocol(args)
    report = run_protocol(cfg)
    run_dir = _run_dir(args)
    report.save(run_dir / "report.json")
    report.write_curve_csv(run_dir / "curve.csv")
    _write_records(run_dir, args, [str(run_dir / "report.json"), str(run_dir / "curve.csv")])
    print(report.table())
    return EXIT_OK


SWEEP_COLUMNS = ("lambda", "sigma_y", "tau", "eer", "eer_attack", "frr_genuine", "far_imposter")


def _sweep_point(cfg: ProtocolConfig) -> dict:
    from .metrics import eer as eer_fn
    from .evaluation import build_report, collect_scores
    scores, _ = collect_scores(cfg)
    rep = build_report(scores, cfg.condition)
    row = {"lambda": cfg.lam, "sigma_y": cfg.sigma_y, "tau": rep.tau, "eer": rep.eer,
           "eer_attack": eer_fn(scores.genuine, scores.condition_scores(cfg.condition))[0],
           "frr_genuine": rep.frr_genuine, "far_imposter": rep.far_imposter}
    row.update({f"far_{k}": v for k, v in rep.attack_far.items()})
    return row


def cmd_sweep(args) -> int:
    if not args.lambdas or not args.sigma_ys:
        raise UsageError("sweep grid is empty")
    if args.condition == "auto":
        # one calibration rule across the grid so points are comparable
        args.condition = "sgadv" if "sgadv" in args.attacks else "imposter"
    with _config_errors():
        cfgs = [_protocol(args, lam, sy, grid=True) for lam in args.lambdas for sy in args.sigma_ys]
    if args.threads > 1 and len(cfgs) > 1:
        with ProcessPoolExecutor(max_workers=min(args.threads, len(cfgs))) as pool:
            rows = list(pool.map(_sweep_point, cfgs))
    else:
        rows = [_sweep_point(c) for c in cfgs]
    run_dir = _run_dir(args)
    cols = list(SWEEP_COLUMNS) + sorted({k for r in rows for k in r} - set(SWEEP_COLUMNS))
    path = run_dir / "sweep.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: _ini_value(r.get(k)) for k in cols})
    _write_records(run_dir, args, [str(path)])
    print(path.read_text(), end="")
    return EXIT_OK


def cmd_bench(args) -> int:
    if not args.strategies:
        raise UsageError("no strategies to time")
    if args.size < 1 or args.batch < 1 or args.repeats < 1:
        raise UsageError("size, batch and repeats must be positive")
    rows = bench_mod.run_bench(args.strategies, size=args.size, batch=args.batch, repeats=args.repeats,
                               threads=max(1, args.threads), seed=args.seed)
    run_dir = _run_dir(args)
    path = run_dir / "bench.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "single_mean_s", "single_std_s", "batch_mean_s", "batch_std_s"])
        for r in rows:
            w.writerow([r.name, r.single_mean, r.single_std, r.batch_mean, r.batch_std])
    _write_records(run_dir, args, [str(path)])
    print(bench_mod.format_table(rows, args.batch))
    return EXIT_OK


HANDLERS = {"purify": cmd_purify, "attack": cmd_attack, "eval": cmd_eval, "sweep": cmd_sweep,
            "bench": cmd_bench}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return HANDLERS[args.command](args)
    except UsageError as exc:
        print(f"iwmfdiff {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - surface any runtime failure as exit 2
        print(f"iwmfdiff {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
