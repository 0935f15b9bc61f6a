"""Command-line interface for training artifacts and running experiments.

A JSON config file may set every option; command-line flags override it.
Exit codes: 0 success, 2 config error, 3 missing artifact, 4 numerical
divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import diffusion, tpe
from .experiments import (
    ConfigInvalid,
    ExperimentConfig,
    MissingCheckpoint,
    build_world,
    load_or_train_denoiser,
    run_experiment,
    sweep_alpha,
    train_policy_from_config,
)
from .semunits import save_world
from .timeline import LatencyConfig
from .tpe import evaluate_policy, write_training_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DIVERGED = 4


def _base_config(args: argparse.Namespace) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = ExperimentConfig.from_json_file(args.config)
    else:
        cfg = ExperimentConfig()
    overrides = {}
    for name in ("mode", "seed", "replicates", "denoiser_ckpt", "policy_ckpt",
                 "output_dir"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "train_first", False):
        overrides["train_first"] = True
    if getattr(args, "alpha", None) is not None:
        overrides["diffusion"] = replace(cfg.diffusion, alpha=args.alpha)
    latency_overrides = {}
    for name in ("tau_e", "M", "segment"):
        value = getattr(args, name, None)
        if value is not None:
            latency_overrides[name] = value
    if latency_overrides:
        overrides["latency"] = replace(cfg.latency, **latency_overrides)
    if getattr(args, "request_size", None):
        lo, hi = (int(v) for v in args.request_size.split(","))
        overrides["request_size"] = (lo, hi)
    try:
        return replace(cfg, **overrides)
    except ValueError as exc:
        raise ConfigInvalid(str(exc)) from exc


def _cmd_train_denoiser(args: argparse.Namespace) -> int:
    cfg = _base_config(args)
    if not cfg.denoiser_ckpt:
        raise ConfigInvalid("train-denoiser needs --denoiser-ckpt")
    cfg = replace(cfg, train_first=True)
    world = build_world(cfg)
    model = load_or_train_denoiser(cfg, world)
    loss = diffusion.heldout_loss(model, world, np.random.default_rng(2**31))
    print(f"saved denoiser to {cfg.denoiser_ckpt} (held-out loss {loss:.4f})")
    out_dir = Path(cfg.denoiser_ckpt).parent
    save_world(out_dir / "world.json", world.units, world.n_e)
    return EXIT_OK


def _cmd_train_policy(args: argparse.Namespace) -> int:
    cfg = _base_config(args)
    if not cfg.policy_ckpt:
        raise ConfigInvalid("train-policy needs --policy-ckpt")
    if args.unmasked:
        cfg = replace(cfg, rl=replace(cfg.rl, masked=False))
    if args.train_alpha is not None:
        cfg = replace(cfg, rl=replace(cfg.rl, train_alpha=args.train_alpha))
    world = build_world(cfg)
    model = load_or_train_denoiser(cfg, world)
    pc, curve = train_policy_from_config(cfg, world, model)
    Path(cfg.policy_ckpt).parent.mkdir(parents=True, exist_ok=True)
    pc.save(cfg.policy_ckpt, {"masked": cfg.rl.masked,
                              "train_alpha": cfg.rl.train_alpha})
    out_dir = Path(cfg.policy_ckpt).parent
    write_training_csv(out_dir / "training_curve.csv", curve)
    env_cfg = tpe.TpeEnvConfig(
        latency=cfg.latency, guidance_w=cfg.diffusion.guidance_w,
        alpha=cfg.rl.train_alpha, masked=cfg.rl.masked,
        scd_per_segment=cfg.scd_per_segment)
    summary = evaluate_policy(world, model, env_cfg, pc,
                              episodes=args.eval_episodes,
                              size_range=cfg.request_size)
    (out_dir / "eval_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    print(f"saved policy to {cfg.policy_ckpt}; "
          f"mean return {curve[-1].mean_return:.3f}, "
          f"eval mean score {summary['mean_score']:.3f}, "
          f"eval mean residual {summary['mean_residual']:.2f}")
    return EXIT_OK


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = _base_config(args)
    metrics = run_experiment(cfg)
    agg = metrics["aggregate"]
    print(f"mode {cfg.mode}: score {agg['score']['mean']:.4f} "
          f"residual {agg['residual_latency']['mean']:.2f} "
          f"efficiency {agg['efficiency']['mean']:.4f} "
          f"({cfg.replicates} replicates)")
    if cfg.output_dir:
        print(f"bundle written to {cfg.output_dir}")
    return EXIT_OK


def _cmd_sweep_alpha(args: argparse.Namespace) -> int:
    cfg = _base_config(args)
    alphas = [float(a) for a in args.alphas.split(",")]
    tau_e_list = [float(t) for t in args.tau_e_grid.split(",")]
    result = sweep_alpha(cfg, alphas, tau_e_list)
    for tau_e in result["tau_e_list"]:
        row = result["scores"][str(tau_e)]
        best = result["best_alpha"][str(tau_e)]
        cells = " ".join(f"{a}:{row[str(float(a))]:.3f}" for a in alphas)
        print(f"tau_e {tau_e}: best alpha {best} | {cells}")
    return EXIT_OK


def _cmd_report(args: argparse.Namespace) -> int:
    for run_dir in args.run_dirs:
        path = Path(run_dir) / "metrics.json"
        if not path.exists():
            raise MissingCheckpoint(f"no metrics.json under {run_dir}")
        doc = json.loads(path.read_text(encoding="utf-8"))
        agg = doc["aggregate"]
        print(f"{doc['mode']:>14s}  score {agg['score']['mean']:.4f} "
              f"(sd {agg['score']['std']:.4f})  "
              f"residual {agg['residual_latency']['mean']:8.2f}  "
              f"efficiency {agg['efficiency']['mean']:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fastgsc",
        description="Pipeline simulator for parallel semantic extraction "
                    "and diffusion inference.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--denoiser-ckpt", dest="denoiser_ckpt")
        p.add_argument("--policy-ckpt", dest="policy_ckpt")
        p.add_argument("--output-dir", dest="output_dir")
        p.add_argument("--replicates", type=int)
        p.add_argument("--alpha", type=float, help="intervention factor")
        p.add_argument("--tau-e", dest="tau_e", type=float,
                       help="per-unit extraction latency in denoising steps")
        p.add_argument("--total-steps", dest="M", type=int,
                       help="total denoising steps")
        p.add_argument("--segment", type=int, help="denoising steps per phase")
        p.add_argument("--request-size", dest="request_size",
                       help="LO,HI request size range")
        p.add_argument("--train-first", dest="train_first",
                       action="store_true",
                       help="train missing artifacts instead of failing")

    p_den = sub.add_parser("train-denoiser", help="train the noise predictor")
    common(p_den)
    p_den.set_defaults(func=_cmd_train_denoiser)

    p_pol = sub.add_parser("train-policy", help="train the transmission-order policy")
    common(p_pol)
    p_pol.add_argument("--unmasked", action="store_true",
                       help="train without invalid-action masking")
    p_pol.add_argument("--train-alpha", dest="train_alpha", type=float,
                       help="intervention factor of the training environment")
    p_pol.add_argument("--eval-episodes", dest="eval_episodes", type=int,
                       default=500)
    p_pol.set_defaults(func=_cmd_train_policy)

    p_run = sub.add_parser("run", help="run one experiment mode")
    common(p_run)
    p_run.add_argument("--mode", choices=["conventional", "pgsc_random",
                                          "tpe_pgsc", "scd_pgsc", "fast_gsc"])
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep-alpha",
                             help="score table over intervention factors")
    common(p_sweep)
    p_sweep.add_argument("--alphas", default="0,2,4,6,8,10,12,14,16,18,20")
    p_sweep.add_argument("--tau-e-grid", dest="tau_e_grid", default="2.5,5,7.5")
    p_sweep.set_defaults(func=_cmd_sweep_alpha)

    p_rep = sub.add_parser("report", help="summarize run directories")
    p_rep.add_argument("run_dirs", nargs="+")
    p_rep.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingCheckpoint as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (diffusion.NonFiniteLoss, tpe.NonFiniteLoss) as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
