"""Experiment presets, configuration, and result emission.

One self-describing run directory per experiment: a resolved copy of the
configuration, metrics JSON (schema-versioned, byte-stable across re-runs),
and plot-ready CSV traces. The five pipeline modes cover the serial
baseline, the parallel pipeline with and without the order learner, and the
difference-corrected variants.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffusion import (
    DenoiserModel,
    NoiseSchedule,
    run_segmented_sampling,
    train_denoiser,
)
from .semunits import SemanticUnit
from .timeline import ArrivalSchedule, LatencyConfig, conventional_timeline
from .toyworld import WorldSpec, clip_analogue_score, incorporation_ratio
from .tpe import (
    PolicyCritic,
    RandomPolicy,
    TpeEnv,
    TpeEnvConfig,
    action_mask,
    rollout_episode,
    sample_request,
    train_policy,
)

SCHEMA_VERSION = 1

MODES = ("conventional", "pgsc_random", "tpe_pgsc", "scd_pgsc", "fast_gsc")

# the default and the two alternative extraction speeds, each paired with
# the segment length used for learning and correction at that speed
TAU_E_SEGMENTS = {2.5: 5, 5.0: 10, 7.5: 15}


class ConfigInvalid(ValueError):
    """The experiment configuration fails validation."""


class MissingCheckpoint(FileNotFoundError):
    """A required model checkpoint does not exist."""


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    base_noise_sigma: float = 0.25


@dataclass(frozen=True)
class DiffusionConfig:
    guidance_w: float = 2.0
    alpha: float = 4.0
    train_steps: int = 40000
    batch: int = 128
    lr: float = 1e-3
    p_uncond: float = 0.1
    hidden: tuple[int, ...] = (256, 256)
    time_dim: int = 16
    input_scale: float = 4.0
    schedule: dict = field(default_factory=lambda: dict(
        kind="late_ramp", T=1000, beta_end=0.031, exponent=3.5))


@dataclass(frozen=True)
class RlConfig:
    lr: float = 0.009
    gamma: float = 0.99
    lam: float = 0.95
    xi: float = 0.01
    eta: float = 0.2
    batch_episodes: int = 32
    iterations: int = 250
    epochs: int = 4
    hidden: tuple[int, ...] = (64, 64)
    optimizer: str = "adam"
    masked: bool = True
    train_alpha: float = 0.0


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "conventional"
    seed: int = 0
    replicates: int = 100
    request_size: tuple[int, int] = (4, 8)
    world: WorldConfig = field(default_factory=WorldConfig)
    latency: LatencyConfig = field(default_factory=LatencyConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    rl: RlConfig = field(default_factory=RlConfig)
    scd_per_segment: bool = True
    denoiser_ckpt: str | None = None
    policy_ckpt: str | None = None
    train_first: bool = False
    output_dir: str | None = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigInvalid(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.replicates < 1:
            raise ConfigInvalid("replicates must be >= 1")
        lo, hi = self.request_size
        if not (1 <= lo <= hi):
            raise ConfigInvalid(f"invalid request size range {self.request_size}")
        try:
            LatencyConfig(**asdict(self.latency))
        except ValueError as exc:
            raise ConfigInvalid(str(exc)) from exc

    @property
    def effective_alpha(self) -> float:
        """The intervention factor actually used: only the difference-
        corrected modes apply it."""
        return self.diffusion.alpha if self.mode in ("scd_pgsc", "fast_gsc") else 0.0

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["schema_version"] = SCHEMA_VERSION
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        doc.pop("schema_version", None)
        try:
            for key, sub in (("world", WorldConfig), ("latency", LatencyConfig),
                             ("diffusion", DiffusionConfig), ("rl", RlConfig)):
                if key in doc and isinstance(doc[key], dict):
                    sub_doc = dict(doc[key])
                    for tup_key in ("hidden",):
                        if tup_key in sub_doc and isinstance(sub_doc[tup_key], list):
                            sub_doc[tup_key] = tuple(sub_doc[tup_key])
                    doc[key] = sub(**sub_doc)
            if isinstance(doc.get("request_size"), list):
                doc["request_size"] = tuple(doc["request_size"])
            return cls(**doc)
        except TypeError as exc:
            raise ConfigInvalid(f"bad config field: {exc}") from exc

    @classmethod
    def from_json_file(cls, path: str | Path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc)


def build_world(cfg: ExperimentConfig) -> WorldSpec:
    return WorldSpec.default(cfg.world.seed, cfg.world.base_noise_sigma)


def load_or_train_denoiser(cfg: ExperimentConfig, world: WorldSpec) -> DenoiserModel:
    if cfg.denoiser_ckpt and Path(cfg.denoiser_ckpt).exists():
        return DenoiserModel.load(cfg.denoiser_ckpt)
    if not cfg.train_first:
        raise MissingCheckpoint(
            f"denoiser checkpoint {cfg.denoiser_ckpt!r} not found "
            "(pass train_first to train it on the fly)")
    dc = cfg.diffusion
    model, _ = train_denoiser(
        world, steps=dc.train_steps, batch=dc.batch, lr=dc.lr,
        p_uncond=dc.p_uncond, hidden=dc.hidden, time_dim=dc.time_dim,
        input_scale=dc.input_scale,
        schedule=NoiseSchedule.from_desc(dc.schedule), seed=cfg.seed,
    )
    if cfg.denoiser_ckpt:
        Path(cfg.denoiser_ckpt).parent.mkdir(parents=True, exist_ok=True)
        model.save(cfg.denoiser_ckpt)
    return model


def train_policy_from_config(cfg: ExperimentConfig, world: WorldSpec,
                             model: DenoiserModel, seed: int | None = None):
    rl = cfg.rl
    env_cfg = TpeEnvConfig(
        latency=cfg.latency, guidance_w=cfg.diffusion.guidance_w,
        alpha=rl.train_alpha, masked=rl.masked,
        scd_per_segment=cfg.scd_per_segment,
    )
    return train_policy(
        world, model, env_cfg,
        iterations=rl.iterations, batch_episodes=rl.batch_episodes,
        eta=rl.eta, xi=rl.xi, gamma=rl.gamma, lam=rl.lam, lr=rl.lr,
        epochs=rl.epochs, hidden=rl.hidden, size_range=cfg.request_size,
        seed=cfg.seed if seed is None else seed, optimizer=rl.optimizer,
    )


def load_or_train_policy(cfg: ExperimentConfig, world: WorldSpec,
                         model: DenoiserModel) -> PolicyCritic:
    if cfg.policy_ckpt and Path(cfg.policy_ckpt).exists():
        return PolicyCritic.load(cfg.policy_ckpt)
    if not cfg.train_first:
        raise MissingCheckpoint(
            f"policy checkpoint {cfg.policy_ckpt!r} not found "
            "(pass train_first to train it on the fly)")
    pc, _ = train_policy_from_config(cfg, world, model)
    if cfg.policy_ckpt:
        Path(cfg.policy_ckpt).parent.mkdir(parents=True, exist_ok=True)
        pc.save(cfg.policy_ckpt)
    return pc


def _replicate_rngs(seed: int, replicate: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent per-replicate streams: one for the request, one for the
    episode (initial latent plus policy draws). Seeds shared across modes
    pair the draws."""
    req = np.random.default_rng(np.random.SeedSequence([seed, 0xA11CE, replicate]))
    episode = np.random.default_rng(np.random.SeedSequence([seed, 0xEB0B, replicate]))
    return req, episode


def _run_replicate(cfg: ExperimentConfig, world: WorldSpec, model: DenoiserModel,
                   policy, replicate: int) -> dict:
    rng_req, rng_ep = _replicate_rngs(cfg.seed, replicate)
    request = sample_request(world, rng_req, cfg.request_size)
    lat = cfg.latency
    if cfg.mode == "conventional":
        ids = [u.id for u in request.units]
        report, schedule = conventional_timeline(len(ids), lat, ids)
        x0, trace = run_segmented_sampling(
            model, schedule, lat.M, lat.segment, cfg.diffusion.guidance_w,
            0.0, rng_ep, world.units_by_id(), cfg.scd_per_segment)
        score = clip_analogue_score(x0, list(request.units))
        residual = report.residual_latency
        dropped = 0
        selections = [tuple(ids)]
    else:
        env_cfg = TpeEnvConfig(
            latency=lat, guidance_w=cfg.diffusion.guidance_w,
            alpha=cfg.effective_alpha, masked=True,
            scd_per_segment=cfg.scd_per_segment,
        )
        env = TpeEnv(world, model, env_cfg)
        trace_ep = rollout_episode(env, request, policy, rng_ep)
        score = trace_ep.score
        residual = trace_ep.residual_latency
        dropped = len(trace_ep.undelivered)
        selections = trace_ep.selections
    return {
        "replicate": replicate,
        "n_units": request.n_units,
        "score": score,
        "residual_latency": residual,
        "efficiency": score / residual,
        "undelivered": dropped,
        "selections": [list(map(int, sel)) for sel in selections],
    }


def _aggregate(rows: Sequence[dict]) -> dict:
    def stats(key: str) -> dict:
        vals = np.array([row[key] for row in rows], dtype=float)
        return {"mean": float(vals.mean()),
                "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0}

    return {
        "score": stats("score"),
        "residual_latency": stats("residual_latency"),
        "efficiency": stats("efficiency"),
        "undelivered": stats("undelivered"),
    }


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run one mode over all replicates; emit the result bundle when an
    output directory is configured."""
    world = build_world(cfg)
    model = load_or_train_denoiser(cfg, world)
    policy = None
    if cfg.mode in ("pgsc_random", "scd_pgsc"):
        policy = RandomPolicy()
    elif cfg.mode in ("tpe_pgsc", "fast_gsc"):
        policy = load_or_train_policy(cfg, world, model)
    rows = [_run_replicate(cfg, world, model, policy, r)
            for r in range(cfg.replicates)]
    metrics = {
        "schema_version": SCHEMA_VERSION,
        "mode": cfg.mode,
        "config": cfg.to_dict(),
        "aggregate": _aggregate(rows),
        "replicates": rows,
    }
    if cfg.output_dir:
        _write_bundle(cfg, world, model, policy, metrics)
    return metrics


def _write_bundle(cfg: ExperimentConfig, world: WorldSpec, model: DenoiserModel,
                  policy, metrics: dict) -> None:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(cfg.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    (out / "metrics.json").write_text(
        json.dumps(metrics, indent=2, sort_keys=True), encoding="utf-8")
    with open(out / "replicates.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["replicate", "n_units", "score", "residual_latency",
                         "efficiency", "undelivered"])
        for row in metrics["replicates"]:
            writer.writerow([row["replicate"], row["n_units"], row["score"],
                             row["residual_latency"], row["efficiency"],
                             row["undelivered"]])
    _write_step_trace(cfg, world, model, policy, out / "trace_replicate0.csv")


def _write_step_trace(cfg: ExperimentConfig, world: WorldSpec,
                      model: DenoiserModel, policy, path: Path) -> None:
    """Per-step sampler trace of replicate 0: step, arrivals, guidance mode,
    and the score of the running clean estimate."""
    rng_req, rng_ep = _replicate_rngs(cfg.seed, 0)
    request = sample_request(world, rng_req, cfg.request_size)
    lat = cfg.latency
    if cfg.mode == "conventional":
        ids = [u.id for u in request.units]
        _, schedule = conventional_timeline(len(ids), lat, ids)
        _, trace = run_segmented_sampling(
            model, schedule, lat.M, lat.segment, cfg.diffusion.guidance_w,
            0.0, rng_ep, world.units_by_id(), cfg.scd_per_segment)
    else:
        env_cfg = TpeEnvConfig(
            latency=lat, guidance_w=cfg.diffusion.guidance_w,
            alpha=cfg.effective_alpha, masked=True,
            scd_per_segment=cfg.scd_per_segment,
        )
        env = TpeEnv(world, model, env_cfg)
        state = env.reset(request, rng_ep)
        done = False
        while not done:
            mask = action_mask(state)
            svec = state.flatten(lat.M)
            action, _, _ = policy.act(svec, mask, rng_ep)
            state, _, done, _ = env.step(action)
        trace = env.step_records
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "arrivals", "guidance_mode", "score_of_x0hat"])
        for rec in trace:
            try:
                s = clip_analogue_score(rec.x0_hat, list(request.units))
            except ValueError:
                s = 0.0
            writer.writerow([rec.step, " ".join(map(str, rec.arrivals)),
                             rec.guidance_mode, s])


def late_arrival_run(
    world: WorldSpec,
    model: DenoiserModel,
    late_unit_id: int,
    arrival_step: int,
    alpha: float,
    w: float,
    lat: LatencyConfig,
    rng: np.random.Generator,
    scd_per_segment: bool = True,
) -> tuple[float, float]:
    """Everything arrives at step 0 except one unit that arrives later.

    Returns (score of the final sample, incorporation ratio of the late
    unit). ``arrival_step`` 0 collapses to single-batch conditioning.
    """
    all_ids = frozenset(u.id for u in world.units)
    if arrival_step == 0:
        arrivals = {0: all_ids}
    else:
        arrivals = {0: all_ids - {late_unit_id},
                    arrival_step: frozenset([late_unit_id])}
    schedule = ArrivalSchedule(arrivals=arrivals, segment=lat.segment, M=lat.M)
    x0, _ = run_segmented_sampling(model, schedule, lat.M, lat.segment, w,
                                   alpha, rng, world.units_by_id(),
                                   scd_per_segment)
    late_unit = world.units_by_id()[late_unit_id]
    return (clip_analogue_score(x0, list(world.units)),
            incorporation_ratio(x0, late_unit))


def sweep_alpha(
    cfg: ExperimentConfig,
    alphas: Sequence[float] = (0, 2, 4, 6, 8, 10, 12, 14, 16, 18, 20),
    tau_e_list: Sequence[float] = (2.5, 5.0, 7.5),
) -> dict:
    """Mean score of the random-order parallel pipeline per (alpha, tau_e).

    Each extraction speed runs with its matched segment length; replicate
    seeds are shared across every cell so comparisons are paired. The
    alpha = 0 column is the uncorrected control.
    """
    if not alphas or not tau_e_list:
        raise ConfigInvalid("alpha and tau_e grids must be non-empty")
    world = build_world(cfg)
    model = load_or_train_denoiser(cfg, world)
    table: dict[float, dict[float, float]] = {}
    best: dict[float, float] = {}
    for tau_e in tau_e_list:
        if tau_e not in TAU_E_SEGMENTS:
            raise ConfigInvalid(
                f"tau_e {tau_e} has no matched segment (choose from "
                f"{sorted(TAU_E_SEGMENTS)})")
        lat = replace(cfg.latency, tau_e=tau_e, segment=TAU_E_SEGMENTS[tau_e])
        table[tau_e] = {}
        for alpha in alphas:
            env_cfg = TpeEnvConfig(
                latency=lat, guidance_w=cfg.diffusion.guidance_w,
                alpha=float(alpha), masked=True,
                scd_per_segment=cfg.scd_per_segment,
            )
            env = TpeEnv(world, model, env_cfg)
            policy = RandomPolicy()
            scores = []
            for r in range(cfg.replicates):
                rng_req, rng_ep = _replicate_rngs(cfg.seed, r)
                request = sample_request(world, rng_req, cfg.request_size)
                trace = rollout_episode(env, request, policy, rng_ep)
                scores.append(trace.score)
            table[tau_e][float(alpha)] = float(np.mean(scores))
        best[tau_e] = max(table[tau_e], key=table[tau_e].get)
    result = {
        "schema_version": SCHEMA_VERSION,
        "replicates": cfg.replicates,
        "alphas": [float(a) for a in alphas],
        "tau_e_list": [float(t) for t in tau_e_list],
        "scores": {str(t): {str(a): s for a, s in table[t].items()}
                   for t in table},
        "best_alpha": {str(t): float(a) for t, a in best.items()},
    }
    if cfg.output_dir:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep_alpha.json").write_text(
            json.dumps(result, indent=2, sort_keys=True), encoding="utf-8")
        with open(out / "sweep_alpha.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["tau_e", "alpha", "mean_score"])
            for tau_e in table:
                for alpha, score in table[tau_e].items():
                    writer.writerow([tau_e, alpha, score])
    return result
