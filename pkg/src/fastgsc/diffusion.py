"""Conditional denoising-diffusion core.

Covers noise-schedule bookkeeping, noise-prediction training with condition
dropout, classifier-free guidance, deterministic skip-step sampling, and the
sequential conditional denoising rule that boosts late-arriving condition
units by injecting the difference between the noise predictions conditioned
on the new and the previously received units.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .ckpt import load_checkpoint, save_checkpoint
from .nnet import MLP, Adam, sinusoidal_embedding
from .semunits import SemanticUnit, condition_sum
from .timeline import ArrivalSchedule
from .toyworld import WorldSpec


class StepOutOfRange(ValueError):
    """Latent step index outside [1, T]."""


class StepOrderViolation(ValueError):
    """Sampling must move to a strictly earlier latent step."""


class InconsistentConditionSets(ValueError):
    """Combined condition set is not the union of previous and new."""


class EmptySchedule(ValueError):
    """No unit ever arrives, so sampling can never be conditioned."""


class NonFiniteLoss(FloatingPointError):
    """Training loss diverged to NaN/Inf."""


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Variance schedule beta_1..beta_T with cached alpha products."""

    beta: np.ndarray

    def __post_init__(self) -> None:
        beta = np.asarray(self.beta, dtype=float)
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("beta must be a non-empty vector")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("beta entries must lie in (0, 1)")
        object.__setattr__(self, "beta", beta)
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        object.__setattr__(self, "_alpha", alpha)
        object.__setattr__(self, "_alpha_bar", alpha_bar)
        object.__setattr__(self, "desc", {"kind": "custom"})
        if np.any(np.diff(alpha_bar) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4,
               beta_end: float = 0.02) -> "NoiseSchedule":
        sched = cls(np.linspace(beta_start, beta_end, T))
        object.__setattr__(sched, "desc", {
            "kind": "linear", "T": T, "beta_start": beta_start,
            "beta_end": beta_end,
        })
        return sched

    @classmethod
    def late_ramp(cls, T: int = 1000, beta_end: float = 0.031,
                  exponent: float = 3.5) -> "NoiseSchedule":
        """Variance concentrated at the end of the forward process.

        Compared to the linear ramp this keeps the signal present longer in
        latent time, which moves the sampler's content-commitment point to
        the middle of the denoising run: condition units arriving around a
        third of the way in land on partially committed content, the regime
        the late-arrival experiments probe.
        """
        t = np.arange(1, T + 1) / T
        beta = np.maximum(beta_end * t**exponent, 1e-8)
        sched = cls(beta)
        object.__setattr__(sched, "desc", {
            "kind": "late_ramp", "T": T, "beta_end": beta_end,
            "exponent": exponent,
        })
        return sched

    @classmethod
    def from_desc(cls, desc: dict) -> "NoiseSchedule":
        kind = desc.get("kind")
        if kind == "linear":
            return cls.linear(desc["T"], desc["beta_start"], desc["beta_end"])
        if kind == "late_ramp":
            return cls.late_ramp(desc["T"], desc["beta_end"], desc["exponent"])
        raise ValueError(f"unknown schedule kind: {kind!r}")

    @property
    def T(self) -> int:
        return self.beta.size

    @property
    def alpha(self) -> np.ndarray:
        return self._alpha

    @property
    def alpha_bar(self) -> np.ndarray:
        return self._alpha_bar

    def abar(self, t: int | np.ndarray) -> float | np.ndarray:
        """Cumulative alpha product at latent step t, with abar(0) = 1."""
        t_arr = np.asarray(t)
        if np.any(t_arr < 0) or np.any(t_arr > self.T):
            raise StepOutOfRange(f"latent step {t} outside [0, {self.T}]")
        padded = np.concatenate([[1.0], self._alpha_bar])
        out = padded[t_arr]
        return float(out) if np.isscalar(t) else out


def forward_noise(x0: np.ndarray, t: int, noise: np.ndarray,
                  sched: NoiseSchedule) -> np.ndarray:
    """Noise a clean sample to latent step t:
    x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise."""
    if not (1 <= t <= sched.T):
        raise StepOutOfRange(f"t={t} outside [1, {sched.T}]")
    abar = sched.abar(t)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise


class DenoiserModel:
    """Noise predictor eps(x_t, t, y): tanh MLP over [x_t, time emb, y].

    The condition y is the sum of the received units' offsets; the zero
    vector is the null condition of the unconditional branch.
    """

    def __init__(self, net: MLP, schedule: NoiseSchedule, dim: int,
                 time_dim: int = 16, input_scale: float = 4.0,
                 meta: dict | None = None):
        self.net = net
        self.schedule = schedule
        self.dim = dim
        self.time_dim = time_dim
        self.input_scale = input_scale
        self.meta = dict(meta or {})

    @classmethod
    def create(cls, dim: int, schedule: NoiseSchedule,
               hidden: Sequence[int] = (128, 128), time_dim: int = 16,
               input_scale: float = 4.0, seed: int = 0) -> "DenoiserModel":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD1FF]))
        sizes = [2 * dim + time_dim, *hidden, dim]
        net = MLP.create(sizes, rng)
        meta = {"hidden": list(hidden), "seed": seed}
        return cls(net, schedule, dim, time_dim, input_scale, meta)

    def _inputs(self, x: np.ndarray, t: np.ndarray, y: np.ndarray) -> np.ndarray:
        # sample and condition share one fixed scale so the tanh stack stays
        # in range even for off-distribution latents met during sampling
        emb = sinusoidal_embedding(t, self.time_dim)
        s = self.input_scale
        return np.concatenate([x / s, emb, y / s], axis=1)

    def predict_batch(self, x: np.ndarray, t: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.net.forward(self._inputs(x, t, y))

    def predict(self, x: np.ndarray, t: int, y: np.ndarray) -> np.ndarray:
        return self.predict_batch(x[None, :], np.array([t]), y[None, :])[0]

    def save(self, path: str | Path) -> None:
        meta = {
            "kind": "denoiser",
            "dim": self.dim,
            "time_dim": self.time_dim,
            "input_scale": self.input_scale,
            "schedule": self.schedule.desc,
            **self.meta,
        }
        save_checkpoint(path, self.net.param_arrays(), meta)

    @classmethod
    def load(cls, path: str | Path) -> "DenoiserModel":
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != "denoiser":
            raise ValueError(f"{path}: not a denoiser checkpoint")
        net = MLP.from_param_arrays(arrays)
        sched = NoiseSchedule.from_desc(meta["schedule"])
        return cls(net, sched, meta["dim"], meta["time_dim"],
                   meta["input_scale"], meta)


def noise_loss_and_grads(
    model: DenoiserModel, x0: np.ndarray, t: np.ndarray, eps: np.ndarray,
    y: np.ndarray
) -> tuple[float, list[np.ndarray]]:
    """Per-coordinate MSE between true and predicted noise, plus parameter
    gradients. Deterministic given its inputs, so it can be checked against
    finite differences."""
    abar = model.schedule.abar(t)
    x_t = np.sqrt(abar)[:, None] * x0 + np.sqrt(1.0 - abar)[:, None] * eps
    inputs = model._inputs(x_t, t, y)
    pred, cache = model.net.forward_cached(inputs)
    resid = pred - eps
    loss = float(np.mean(resid**2))
    dout = 2.0 * resid / resid.size
    grads = model.net.backward(cache, dout)
    return loss, grads


def train_step(
    model: DenoiserModel, opt: Adam, x0: np.ndarray, y: np.ndarray,
    rng: np.random.Generator, p_uncond: float = 0.1
) -> float:
    """One gradient step on a batch of (clean sample, condition) pairs.

    With probability ``p_uncond`` a row's condition is replaced by the null
    condition so the unconditional branch gets trained too.
    """
    batch = x0.shape[0]
    if batch == 0:
        raise ValueError("empty batch")
    t = rng.integers(1, model.schedule.T + 1, size=batch)
    eps = rng.normal(size=x0.shape)
    y_used = y.copy()
    y_used[rng.random(batch) < p_uncond] = 0.0
    loss, grads = noise_loss_and_grads(model, x0, t, eps, y_used)
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"training loss diverged: {loss}")
    opt.step(model.net, grads)
    return loss


def _training_batch(spec: WorldSpec, rng: np.random.Generator,
                    batch: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized draw of (x0, condition) pairs: uniform non-empty unit
    subsets, Gaussians around the subset mean."""
    k = spec.k_max
    offsets = np.stack([u.offset for u in spec.units])
    idx = rng.integers(1, 2**k, size=batch)
    bits = ((idx[:, None] >> np.arange(k)[None, :]) & 1).astype(float)
    means = bits @ offsets
    x0 = means + spec.base_noise_sigma * rng.normal(size=(batch, spec.dim))
    return x0, means


def train_denoiser(
    spec: WorldSpec,
    steps: int = 40000,
    batch: int = 128,
    lr: float = 1e-3,
    p_uncond: float = 0.1,
    hidden: Sequence[int] = (256, 256),
    time_dim: int = 16,
    input_scale: float = 4.0,
    schedule: NoiseSchedule | None = None,
    seed: int = 0,
    log_every: int = 0,
) -> tuple[DenoiserModel, list[float]]:
    """Train a noise predictor on the world from scratch.

    The learning rate follows a cosine decay to a tenth of its peak, which
    noticeably tightens the late-step noise fit the deterministic sampler
    depends on.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, seed, 0x7431]))
    sched = schedule if schedule is not None else NoiseSchedule.late_ramp()
    model = DenoiserModel.create(spec.dim, sched, hidden, time_dim, input_scale, seed)
    opt = Adam(lr)
    losses = []
    for step in range(steps):
        opt.lr = lr * (0.1 + 0.45 * (1.0 + np.cos(np.pi * step / steps)))
        x0, y = _training_batch(spec, rng, batch)
        loss = train_step(model, opt, x0, y, rng, p_uncond)
        losses.append(loss)
        if log_every and (step + 1) % log_every == 0:
            window = losses[-log_every:]
            print(f"step {step + 1}: loss {np.mean(window):.4f}")
    return model, losses


def heldout_loss(model: DenoiserModel, spec: WorldSpec,
                 rng: np.random.Generator, n: int = 4096) -> float:
    """Per-coordinate noise-prediction MSE on fresh draws, no update."""
    x0, y = _training_batch(spec, rng, n)
    t = rng.integers(1, model.schedule.T + 1, size=n)
    eps = rng.normal(size=x0.shape)
    loss, _ = noise_loss_and_grads(model, x0, t, eps, y)
    return loss


# ---------------------------------------------------------------------------
# guidance


def cfg_noise(model: DenoiserModel, x_t: np.ndarray, y: np.ndarray, t: int,
              w: float) -> np.ndarray:
    """Classifier-free guided noise estimate:
    eps_cond + w * (eps_cond - eps_uncond)."""
    x2 = np.stack([x_t, x_t])
    y2 = np.stack([y, np.zeros_like(y)])
    t2 = np.array([t, t])
    preds = model.predict_batch(x2, t2, y2)
    eps_cond, eps_uncond = preds[0], preds[1]
    return eps_cond + w * (eps_cond - eps_uncond)


def scd_noise(
    model: DenoiserModel,
    x_t: np.ndarray,
    y_combined: Iterable[SemanticUnit],
    y_new: Iterable[SemanticUnit],
    y_previous: Iterable[SemanticUnit],
    t: int,
    w: float,
    alpha: float,
) -> np.ndarray:
    """Sequential conditional denoising estimate.

    Adds ``alpha`` times the difference between the noise predictions
    conditioned on the newly arrived and the previously received units to
    the guided estimate for the combined set; the difference locates the
    noise-space region the new units target.
    """
    combined = list(y_combined)
    new = list(y_new)
    prev = list(y_previous)
    if not new or not prev:
        raise ValueError("scd_noise needs non-empty new and previous sets; "
                         "use cfg_noise at the first arrival")
    if {u.id for u in combined} != {u.id for u in new} | {u.id for u in prev}:
        raise InconsistentConditionSets(
            "combined condition set must be the union of previous and new")
    dim = model.dim
    eps_guided = cfg_noise(model, x_t, condition_sum(combined, dim), t, w)
    x2 = np.stack([x_t, x_t])
    y2 = np.stack([condition_sum(new, dim), condition_sum(prev, dim)])
    t2 = np.array([t, t])
    preds = model.predict_batch(x2, t2, y2)
    return eps_guided + alpha * (preds[0] - preds[1])


# ---------------------------------------------------------------------------
# deterministic skip-step sampling


@dataclass(frozen=True)
class SamplerState:
    """Current latent, position in the sampling subsequence, and the unit
    ids received so far."""

    x: np.ndarray
    step_index: int
    received: frozenset[int]


def sampling_timesteps(T: int, M: int) -> np.ndarray:
    """Evenly spaced ascending subsequence of latent steps, ending at T."""
    taus = np.round(np.linspace(T / M, T, M)).astype(int)
    if np.any(np.diff(taus) <= 0):
        raise ValueError(f"cannot space {M} sampling steps over {T} latent steps")
    return taus


def predict_x0(x: np.ndarray, eps: np.ndarray, abar: float) -> np.ndarray:
    """Invert the forward noising map given a noise estimate."""
    return (x - np.sqrt(1.0 - abar) * eps) / np.sqrt(abar)


def ddim_transition(x: np.ndarray, eps: np.ndarray, abar_from: float,
                    abar_to: float) -> np.ndarray:
    """Deterministic update between two noise levels:
    x' = sqrt(abar_to) x0_hat + sqrt(1 - abar_to) eps."""
    x0_hat = predict_x0(x, eps, abar_from)
    return np.sqrt(abar_to) * x0_hat + np.sqrt(1.0 - abar_to) * eps


def ddim_step(state: SamplerState, eps: np.ndarray, sched: NoiseSchedule,
              from_t: int, to_t: int) -> SamplerState:
    """Advance the sampler one (possibly skipping) step, from_t -> to_t."""
    if not (1 <= from_t <= sched.T):
        raise StepOutOfRange(f"from_t={from_t} outside [1, {sched.T}]")
    if not (0 <= to_t < from_t):
        raise StepOrderViolation(f"to_t={to_t} must lie in [0, from_t={from_t})")
    x_next = ddim_transition(state.x, eps, sched.abar(from_t), sched.abar(to_t))
    return replace(state, x=x_next, step_index=state.step_index + 1)


@dataclass(frozen=True)
class StepRecord:
    """Per-step sampling trace entry."""

    step: int
    arrivals: tuple[int, ...]
    guidance_mode: str
    x0_hat: np.ndarray


def run_segment(
    model: DenoiserModel,
    x: np.ndarray,
    taus: np.ndarray,
    m_start: int,
    m_end: int,
    received: frozenset[int],
    new_ids: frozenset[int],
    w: float,
    alpha: float,
    units_by_id: Mapping[int, SemanticUnit],
    scd_per_segment: bool = True,
    x0_clamp: float | None = None,
) -> tuple[np.ndarray, list[StepRecord]]:
    """Run denoising steps [m_start, m_end) under a fixed condition set.

    ``new_ids`` are the units that arrived at the m_start boundary; the
    difference correction uses them against the previously received rest.
    When ``scd_per_segment`` is false the correction is applied only on the
    boundary step instead of every step of the segment. ``x0_clamp`` bounds
    the norm of the clean estimate before re-noising (thresholded sampling);
    without it, approximation error at high noise levels occasionally drives
    the trajectory out of the data region for good.
    """
    M = taus.size
    prev_ids = received - new_ids
    y_combined = condition_sum([units_by_id[i] for i in sorted(received)], model.dim)
    records = []
    for m in range(m_start, m_end):
        from_t = int(taus[M - 1 - m])
        to_t = int(taus[M - 2 - m]) if m < M - 1 else 0
        use_scd = (
            alpha != 0.0
            and len(new_ids) > 0
            and len(prev_ids) > 0
            and (scd_per_segment or m == m_start)
        )
        if use_scd:
            eps = scd_noise(
                model, x,
                [units_by_id[i] for i in sorted(received)],
                [units_by_id[i] for i in sorted(new_ids)],
                [units_by_id[i] for i in sorted(prev_ids)],
                from_t, w, alpha,
            )
            mode = "scd"
        else:
            eps = cfg_noise(model, x, y_combined, from_t, w)
            mode = "cfg"
        abar_from = model.schedule.abar(from_t)
        x0_hat = predict_x0(x, eps, abar_from)
        if x0_clamp is not None:
            norm = float(np.linalg.norm(x0_hat))
            if norm > x0_clamp:
                x0_hat = x0_hat * (x0_clamp / norm)
                eps = (x - np.sqrt(abar_from) * x0_hat) / np.sqrt(1.0 - abar_from)
        records.append(StepRecord(
            step=m,
            arrivals=tuple(sorted(new_ids)) if m == m_start else (),
            guidance_mode=mode,
            x0_hat=x0_hat,
        ))
        x = ddim_transition(x, eps, abar_from, model.schedule.abar(to_t))
    return x, records


def default_x0_clamp(units_by_id: Mapping[int, SemanticUnit]) -> float:
    """Norm bound of the world's data region: the largest prompt mean plus
    generous headroom for the conditional spread."""
    total = np.sum([u.offset for u in units_by_id.values()], axis=0)
    return float(np.linalg.norm(total)) + 3.0


def run_segmented_sampling(
    model: DenoiserModel,
    schedule: ArrivalSchedule,
    M: int,
    segment: int,
    w: float,
    alpha: float,
    rng: np.random.Generator,
    units_by_id: Mapping[int, SemanticUnit],
    scd_per_segment: bool = True,
    x0_clamp: float | None = None,
) -> tuple[np.ndarray, list[StepRecord]]:
    """Sample with condition units arriving at segment boundaries.

    Starts from pure noise once the first units have arrived; at each
    boundary with arrivals the difference correction is applied for that
    segment (when ``alpha`` > 0), otherwise plain guidance on everything
    received is used. Units in ``schedule.dropped`` are never incorporated.
    """
    if M % segment != 0:
        raise ValueError("M must be divisible by segment")
    if schedule.M != M or schedule.segment != segment:
        raise ValueError("schedule was built for different M/segment")
    if not schedule.arrivals or not schedule.arrivals.get(0):
        raise EmptySchedule("no units arrive at the start of sampling")
    taus = sampling_timesteps(model.schedule.T, M)
    if x0_clamp is None:
        x0_clamp = default_x0_clamp(units_by_id)
    x = rng.normal(size=model.dim)
    received: frozenset[int] = frozenset()
    trace: list[StepRecord] = []
    for boundary in range(0, M, segment):
        new_ids = frozenset(schedule.arrivals.get(boundary, frozenset()))
        received = received | new_ids
        x, records = run_segment(
            model, x, taus, boundary, boundary + segment, received, new_ids,
            w, alpha, units_by_id, scd_per_segment, x0_clamp,
        )
        trace.extend(records)
    return x, trace
