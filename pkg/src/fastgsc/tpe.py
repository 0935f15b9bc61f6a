"""Learning the extraction/transmission order of semantic units.

The environment exposes one decision per inference segment: which pending
units to extract next. Joint actions over the slot set are masked so that
selections of empty or already-sent slots are never sampled, and a clipped
policy-gradient learner with generalized advantage estimation trades the
final inference score against the residual latency of the pipeline.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .ckpt import load_checkpoint, save_checkpoint
from .diffusion import (
    DenoiserModel,
    default_x0_clamp,
    run_segment,
    sampling_timesteps,
)
from .nnet import MLP, Adam, Sgd
from .semunits import SemanticUnit, TaskRequest, encode_request
from .timeline import LatencyConfig
from .toyworld import WorldSpec, ZeroSample, clip_analogue_score


class NoValidAction(ValueError):
    """Every action is masked; the request is malformed."""


class AllMasked(ValueError):
    """A distribution was requested over an all-masked logit vector."""


class InvalidAction(ValueError):
    """A masked action was passed to the environment."""


class NonFiniteLoss(FloatingPointError):
    """A policy or critic loss diverged to NaN/Inf."""


@lru_cache(maxsize=8)
def _bits_table(k_max: int) -> np.ndarray:
    """(2^k, k) table: row a holds the slot-selection bits of action a."""
    indices = np.arange(2**k_max)
    return ((indices[:, None] >> np.arange(k_max)[None, :]) & 1).astype(np.int8)


@dataclass(frozen=True)
class MdpState:
    """Agent observation: request encoding, pending indicator, and the
    denoising step from which units selected now can start guiding."""

    encoding: np.ndarray  # (k_max, n_e) one-hot rows
    pending: np.ndarray   # (k_max,) binary indicator
    d: int

    def flatten(self, m_total: int) -> np.ndarray:
        return np.concatenate([
            self.encoding.ravel(),
            self.pending.astype(float),
            [self.d / m_total],
        ])


@dataclass(frozen=True)
class JointAction:
    """Per-slot selection bits and their integer encoding (bit k = slot k)."""

    bits: tuple[int, ...]
    index: int

    def __post_init__(self) -> None:
        if self.index != sum(b << k for k, b in enumerate(self.bits)):
            raise ValueError("index does not encode bits")

    @classmethod
    def from_index(cls, index: int, k_max: int) -> "JointAction":
        bits = tuple(int((index >> k) & 1) for k in range(k_max))
        return cls(bits, index)

    @classmethod
    def from_bits(cls, bits: Sequence[int]) -> "JointAction":
        bits = tuple(int(b) for b in bits)
        return cls(bits, sum(b << k for k, b in enumerate(bits)))

    @property
    def n_selected(self) -> int:
        return sum(self.bits)


def action_mask(state: MdpState) -> np.ndarray:
    """Valid-action indicator over the 2^k joint actions.

    An action is valid iff it selects no empty or already-sent slot. The
    empty action is additionally masked before denoising has started
    (nothing received means nothing to denoise against).
    """
    k_max = state.pending.size
    bits = _bits_table(k_max)
    invalid_slots = (state.pending == 0).astype(np.int8)
    mask = ((bits * invalid_slots[None, :]).sum(axis=1) == 0).astype(float)
    if state.d == 0:
        mask[0] = 0.0
    if mask.sum() == 0:
        raise NoValidAction("no valid action: empty request at the first phase")
    return mask


def masked_policy_distribution(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over unmasked logits; masked entries get probability 0."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise AllMasked("all actions are masked")
    z = np.where(mask, logits, -np.inf)
    z_max = z.max()
    expz = np.exp(z - z_max)
    probs = expz / expz.sum()
    return probs


def masked_log_softmax(logits: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Row-wise log-probabilities with masked entries at -inf. Batched."""
    z = np.where(masks > 0, logits, -np.inf)
    z_max = z.max(axis=1, keepdims=True)
    expz = np.exp(z - z_max)
    log_norm = np.log(expz.sum(axis=1, keepdims=True)) + z_max
    return z - log_norm


# ---------------------------------------------------------------------------
# environment


@dataclass(frozen=True)
class TpeEnvConfig:
    latency: LatencyConfig = field(default_factory=LatencyConfig)
    guidance_w: float = 2.0
    alpha: float = 0.0
    masked: bool = True
    score_coeff: float = 1.0
    scd_per_segment: bool = True
    # unmasked agents may select nothing useful before denoising starts;
    # after this many wasted first-phase attempts the episode ends scoreless
    phase0_attempt_cap: int = 8


class TpeEnv:
    """One decision per inference segment; terminal reward is the score of
    the final sample minus nothing (latency is charged per phase).

    Slot selections made at phase t arrive at boundary d = t * segment and
    guide from there; selections made at d = M can no longer guide and are
    dropped. With masking disabled, selections of empty or already-sent
    slots still pay extraction latency but deliver nothing.
    """

    def __init__(self, world: WorldSpec, model: DenoiserModel,
                 cfg: TpeEnvConfig):
        self.world = world
        self.model = model
        self.cfg = cfg
        self.units_by_id = world.units_by_id()
        self._taus = sampling_timesteps(model.schedule.T, cfg.latency.M)
        self._x0_clamp = default_x0_clamp(self.units_by_id)

    @property
    def k_max(self) -> int:
        return self.world.k_max

    @property
    def n_actions(self) -> int:
        return 2**self.k_max

    @property
    def state_dim(self) -> int:
        return self.k_max * self.world.n_e + self.k_max + 1

    def reset(self, request: TaskRequest, rng: np.random.Generator) -> MdpState:
        self.request = request
        self.rng = rng
        self._encoding = encode_request(request)
        self._pending = np.zeros(self.k_max, dtype=int)
        self._pending[: request.n_units] = 1
        self._x = rng.normal(size=self.world.dim)
        self._received: frozenset[int] = frozenset()
        self._incoming: frozenset[int] = frozenset()
        self._phase = 0
        self._started = False
        self._phase0_attempts = 0
        self._residual = 0.0
        self._selections: list[tuple[int, ...]] = []
        self._unit_rounds: dict[int, int] = {}
        self._dropped: set[int] = set()
        self._records: list = []
        self._score: float | None = None
        self._done = False
        return self._state()

    def _state(self) -> MdpState:
        d = self._phase * self.cfg.latency.segment if self._started else 0
        return MdpState(self._encoding, self._pending.copy(), d)

    def _slot_ids(self, slots: Sequence[int]) -> frozenset[int]:
        return frozenset(self.request.units[k].id for k in slots)

    def step(self, action: int) -> tuple[MdpState, float, bool, dict]:
        if self._done:
            raise RuntimeError("episode is over; call reset")
        lat = self.cfg.latency
        state = self._state()
        if self.cfg.masked:
            mask = action_mask(state)
            if mask[action] == 0:
                raise InvalidAction(f"action {action} is masked in this state")
        bits = _bits_table(self.k_max)[action]
        selected = np.nonzero(bits)[0]
        valid = [k for k in selected if self._pending[k] == 1]
        n_charged = len(selected)
        info: dict = {"charged": n_charged, "selected": tuple(valid)}

        if not self._started:
            # before denoising starts; only a valid non-empty selection
            # kicks off the pipeline
            reward = -lat.tau_e * n_charged
            self._residual += lat.tau_e * n_charged
            if valid:
                for k in valid:
                    self._pending[k] = 0
                    self._unit_rounds[self.request.units[k].id] = self._phase
                self._incoming = self._slot_ids(valid)
                self._selections.append(tuple(sorted(self._incoming)))
                self._started = True
                self._phase = 1
                return self._state(), reward, False, info
            self._phase0_attempts += 1
            self._selections.append(())
            if self._phase0_attempts >= self.cfg.phase0_attempt_cap:
                self._done = True
                self._score = 0.0
                info["score"] = 0.0
                return self._state(), reward, True, info
            return self._state(), reward, False, info

        # denoising runs one segment, conditioned on everything received,
        # with the units that arrived at its opening boundary as the new set
        seg = lat.segment
        m_start = (self._phase - 1) * seg
        new_ids = self._incoming
        self._received = self._received | new_ids
        self._x, records = run_segment(
            self.model, self._x, self._taus, m_start, m_start + seg,
            self._received, new_ids, self.cfg.guidance_w, self.cfg.alpha,
            self.units_by_id, self.cfg.scd_per_segment, self._x0_clamp,
        )
        self._records.extend(records)
        info["segment"] = (m_start, m_start + seg)
        info["arrived"] = tuple(sorted(new_ids))

        d = self._phase * seg
        final_phase = d >= lat.M
        for k in valid:
            self._pending[k] = 0
            self._unit_rounds[self.request.units[k].id] = self._phase
        ids = self._slot_ids(valid)
        self._selections.append(tuple(sorted(ids)))
        if final_phase:
            # doomed selections: extracted but never delivered in time; the
            # receiver does not wait for them, so no latency is charged
            self._dropped |= set(ids)
            self._incoming = frozenset()
            reward = 0.0
        else:
            self._incoming = ids
            overshoot = max(lat.tau_e * n_charged - lat.tau_s, 0.0)
            reward = -overshoot
            self._residual += overshoot

        if final_phase:
            try:
                score = clip_analogue_score(self._x, list(self.request.units))
            except ZeroSample:
                score = 0.0
            self._score = score
            reward += self.cfg.score_coeff * score
            self._done = True
            info["score"] = score
            return self._state(), reward, True, info

        self._phase += 1
        return self._state(), reward, False, info

    # episode summary accessors (valid after the episode ends)

    @property
    def score(self) -> float:
        if self._score is None:
            raise RuntimeError("episode not finished")
        return self._score

    @property
    def residual_latency(self) -> float:
        return self._residual

    @property
    def selections(self) -> list[tuple[int, ...]]:
        return list(self._selections)

    @property
    def unit_rounds(self) -> dict[int, int]:
        return dict(self._unit_rounds)

    @property
    def undelivered(self) -> frozenset[int]:
        """Requested unit ids that never reached the sampler in time."""
        requested = {u.id for u in self.request.units}
        return frozenset(requested - set(self._received))

    @property
    def final_sample(self) -> np.ndarray:
        return self._x.copy()

    @property
    def step_records(self) -> list:
        """Per-step sampler trace accumulated over the episode."""
        return list(self._records)


def sample_request(world: WorldSpec, rng: np.random.Generator,
                   size_range: tuple[int, int] = (4, 8)) -> TaskRequest:
    """Uniform request size in ``size_range``, units drawn without
    replacement in random slot order."""
    lo, hi = size_range
    hi = min(hi, world.k_max)
    n = int(rng.integers(lo, hi + 1))
    picks = rng.choice(world.k_max, size=n, replace=False)
    units = tuple(world.units[i] for i in picks)
    return TaskRequest(units, k_max=world.k_max, n_e=world.n_e)


# ---------------------------------------------------------------------------
# traces, advantages, learner


@dataclass
class EpisodeTrace:
    """Per-phase rollout record plus episode-level outcomes."""

    states: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)
    actions: list[int] = field(default_factory=list)
    logprobs: list[float] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    score: float = 0.0
    residual_latency: float = 0.0
    selections: list[tuple[int, ...]] = field(default_factory=list)
    unit_rounds: dict[int, int] = field(default_factory=dict)
    undelivered: frozenset[int] = frozenset()
    request_ids: tuple[int, ...] = ()

    @property
    def length(self) -> int:
        return len(self.rewards)

    def discounted_return(self, gamma: float) -> float:
        return float(sum(gamma**t * r for t, r in enumerate(self.rewards)))

    def returns_to_go(self, gamma: float) -> np.ndarray:
        out = np.zeros(self.length)
        acc = 0.0
        for t in range(self.length - 1, -1, -1):
            acc = self.rewards[t] + gamma * acc
            out[t] = acc
        return out


def gae_advantages(trace: EpisodeTrace, gamma: float, lam: float) -> np.ndarray:
    """Generalized advantage estimates by backward recursion; the value of
    the terminal state is 0."""
    rewards = np.asarray(trace.rewards)
    values = np.asarray(trace.values)
    next_values = np.concatenate([values[1:], [0.0]])
    deltas = rewards + gamma * next_values - values
    adv = np.zeros_like(deltas)
    acc = 0.0
    for t in range(deltas.size - 1, -1, -1):
        acc = deltas[t] + gamma * lam * acc
        adv[t] = acc
    return adv


@dataclass
class PolicyCritic:
    """Current policy, the frozen rollout-time copy, and the value net."""

    policy: MLP
    old_policy: MLP
    critic: MLP
    state_dim: int
    n_actions: int

    @classmethod
    def create(cls, state_dim: int, n_actions: int,
               hidden: Sequence[int] = (64, 64), seed: int = 0) -> "PolicyCritic":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9019]))
        policy = MLP.create([state_dim, *hidden, n_actions], rng)
        critic = MLP.create([state_dim, *hidden, 1], rng)
        return cls(policy, policy.copy(), critic, state_dim, n_actions)

    def snapshot_old(self) -> None:
        self.old_policy = self.policy.copy()

    def distribution(self, state_vec: np.ndarray, mask: np.ndarray) -> np.ndarray:
        logits = self.policy.forward(state_vec[None, :])[0]
        return masked_policy_distribution(logits, mask)

    def act(self, state_vec: np.ndarray, mask: np.ndarray,
            rng: np.random.Generator) -> tuple[int, float, float]:
        probs = self.distribution(state_vec, mask)
        action = int(rng.choice(probs.size, p=probs))
        value = float(self.critic.forward(state_vec[None, :])[0, 0])
        return action, float(np.log(probs[action])), value

    def save(self, path: str | Path, extra_meta: dict | None = None) -> None:
        arrays = {}
        for name, arr in self.policy.param_arrays().items():
            arrays[f"policy_{name}"] = arr
        for name, arr in self.critic.param_arrays().items():
            arrays[f"critic_{name}"] = arr
        meta = {"kind": "policy", "state_dim": self.state_dim,
                "n_actions": self.n_actions, **(extra_meta or {})}
        save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path: str | Path) -> "PolicyCritic":
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != "policy":
            raise ValueError(f"{path}: not a policy checkpoint")
        policy = MLP.from_param_arrays(
            {k[len("policy_"):]: v for k, v in arrays.items() if k.startswith("policy_")})
        critic = MLP.from_param_arrays(
            {k[len("critic_"):]: v for k, v in arrays.items() if k.startswith("critic_")})
        return cls(policy, policy.copy(), critic, meta["state_dim"], meta["n_actions"])


class RandomPolicy:
    """Uniform over valid actions (or over the raw joint space)."""

    def __init__(self, respect_mask: bool = True):
        self.respect_mask = respect_mask

    def act(self, state_vec: np.ndarray, mask: np.ndarray,
            rng: np.random.Generator) -> tuple[int, float, float]:
        if self.respect_mask:
            valid = np.nonzero(mask)[0]
            action = int(rng.choice(valid))
            return action, float(-np.log(valid.size)), 0.0
        action = int(rng.integers(mask.size))
        return action, float(-np.log(mask.size)), 0.0


def rollout_episode(env: TpeEnv, request: TaskRequest, policy,
                    rng: np.random.Generator) -> EpisodeTrace:
    state = env.reset(request, rng)
    m_total = env.cfg.latency.M
    trace = EpisodeTrace(request_ids=tuple(u.id for u in request.units))
    done = False
    while not done:
        mask = action_mask(state) if env.cfg.masked else np.ones(env.n_actions)
        svec = state.flatten(m_total)
        action, logp, value = policy.act(svec, mask, rng)
        state, reward, done, _ = env.step(action)
        trace.states.append(svec)
        trace.masks.append(mask)
        trace.actions.append(action)
        trace.logprobs.append(logp)
        trace.rewards.append(reward)
        trace.values.append(value)
    trace.score = env.score
    trace.residual_latency = env.residual_latency
    trace.selections = env.selections
    trace.unit_rounds = env.unit_rounds
    trace.undelivered = env.undelivered
    return trace


def policy_objective_and_grads(
    policy: MLP,
    states: np.ndarray,
    masks: np.ndarray,
    actions: np.ndarray,
    old_logp: np.ndarray,
    advantages: np.ndarray,
    eta: float,
    xi: float,
) -> tuple[float, list[np.ndarray], dict]:
    """Clipped surrogate plus entropy bonus, with analytic parameter
    gradients of the objective (ascent direction).

    Samples whose min picks the clipped branch with a saturated ratio
    contribute no surrogate gradient; the entropy bonus always flows.
    """
    n = states.shape[0]
    logits, cache = policy.forward_cached(states)
    logp_all = masked_log_softmax(logits, masks)
    probs = np.exp(logp_all)
    logp_a = logp_all[np.arange(n), actions]
    ratio = np.exp(logp_a - old_logp)
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - eta, 1.0 + eta) * advantages
    safe_logp = np.where(probs > 0, logp_all, 0.0)
    entropy = -(probs * safe_logp).sum(axis=1)
    objective = float(np.minimum(unclipped, clipped).mean() + xi * entropy.mean())

    one_hot = np.zeros_like(probs)
    one_hot[np.arange(n), actions] = 1.0
    active = (unclipped <= clipped).astype(float) * ratio * advantages
    d_surrogate = active[:, None] * (one_hot - probs)
    d_entropy = -probs * (safe_logp + entropy[:, None])
    d_logits = (d_surrogate + xi * d_entropy) / n
    grads = policy.backward(cache, -d_logits)  # gradients of -objective
    diag = {
        "entropy": float(entropy.mean()),
        "clip_fraction": float(np.mean(unclipped > clipped)),
        "approx_kl": float(np.mean(old_logp - logp_a)),
    }
    return objective, grads, diag


def critic_loss_and_grads(
    critic: MLP, states: np.ndarray, returns: np.ndarray
) -> tuple[float, list[np.ndarray]]:
    """Mean squared error of the value net against discounted returns."""
    values, cache = critic.forward_cached(states)
    err = values[:, 0] - returns
    loss = float(np.mean(err**2))
    grads = critic.backward(cache, (2.0 * err / err.size)[:, None])
    return loss, grads


def ppo_update(
    traces: Sequence[EpisodeTrace],
    pc: PolicyCritic,
    eta: float = 0.2,
    xi: float = 0.01,
    gamma: float = 0.99,
    lam: float = 0.95,
    lr: float = 0.009,
    epochs: int = 4,
    normalize_advantages: bool = True,
    opt_policy=None,
    opt_critic=None,
) -> dict:
    """Maximize the clipped surrogate with entropy bonus; regress the critic
    to the discounted returns. ``epochs`` full-batch passes per call."""
    if not traces:
        raise ValueError("need at least one trace")
    states = np.concatenate([np.stack(tr.states) for tr in traces])
    masks = np.concatenate([np.stack(tr.masks) for tr in traces])
    actions = np.concatenate([np.array(tr.actions) for tr in traces])
    old_logp = np.concatenate([np.array(tr.logprobs) for tr in traces])
    advantages = np.concatenate([gae_advantages(tr, gamma, lam) for tr in traces])
    returns = np.concatenate([tr.returns_to_go(gamma) for tr in traces])

    # rollout consistency: the stored log-prob must match the frozen copy
    check_logits = pc.old_policy.forward(states[:1])
    check_logp = masked_log_softmax(check_logits, masks[:1])[0, actions[0]]
    if not np.isclose(check_logp, old_logp[0], atol=1e-8):
        raise ValueError("old-policy snapshot inconsistent with collected log-probs")

    if normalize_advantages:
        advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)

    if opt_policy is None:
        opt_policy = Sgd(lr)
    if opt_critic is None:
        opt_critic = Sgd(lr)
    diag: dict = {}
    for _ in range(epochs):
        objective, grads, pdiag = policy_objective_and_grads(
            pc.policy, states, masks, actions, old_logp, advantages, eta, xi)
        if not np.isfinite(objective):
            raise NonFiniteLoss(f"policy objective diverged: {objective}")
        opt_policy.step(pc.policy, grads)

        value_loss, vgrads = critic_loss_and_grads(pc.critic, states, returns)
        if not np.isfinite(value_loss):
            raise NonFiniteLoss(f"critic loss diverged: {value_loss}")
        opt_critic.step(pc.critic, vgrads)

        diag = {"policy_objective": objective, "value_loss": value_loss, **pdiag}
    return diag


@dataclass
class TrainingRow:
    iteration: int
    mean_return: float
    mean_score: float
    mean_residual: float
    entropy: float


def train_policy(
    world: WorldSpec,
    model: DenoiserModel,
    env_cfg: TpeEnvConfig,
    iterations: int = 300,
    batch_episodes: int = 32,
    eta: float = 0.2,
    xi: float = 0.01,
    gamma: float = 0.99,
    lam: float = 0.95,
    lr: float = 0.009,
    epochs: int = 4,
    hidden: Sequence[int] = (64, 64),
    size_range: tuple[int, int] = (4, 8),
    seed: int = 0,
    optimizer: str = "adam",
    log_every: int = 0,
) -> tuple[PolicyCritic, list[TrainingRow]]:
    env = TpeEnv(world, model, env_cfg)
    pc = PolicyCritic.create(env.state_dim, env.n_actions, hidden, seed)
    if optimizer == "adam":
        opt_policy, opt_critic = Adam(lr), Adam(lr)
    elif optimizer == "sgd":
        opt_policy, opt_critic = Sgd(lr), Sgd(lr)
    else:
        raise ValueError(f"unknown optimizer {optimizer!r}")
    curve: list[TrainingRow] = []
    for it in range(iterations):
        pc.snapshot_old()
        traces = []
        for ep in range(batch_episodes):
            rng = np.random.default_rng(
                np.random.SeedSequence([world.seed, seed, it, ep]))
            request = sample_request(world, rng, size_range)
            traces.append(rollout_episode(env, request, pc, rng))
        diag = ppo_update(traces, pc, eta, xi, gamma, lam, lr, epochs,
                          opt_policy=opt_policy, opt_critic=opt_critic)
        row = TrainingRow(
            iteration=it,
            mean_return=float(np.mean([tr.discounted_return(gamma) for tr in traces])),
            mean_score=float(np.mean([tr.score for tr in traces])),
            mean_residual=float(np.mean([tr.residual_latency for tr in traces])),
            entropy=diag["entropy"],
        )
        curve.append(row)
        if log_every and (it + 1) % log_every == 0:
            print(f"iter {it + 1}: return {row.mean_return:.3f} "
                  f"score {row.mean_score:.3f} residual {row.mean_residual:.1f} "
                  f"entropy {row.entropy:.3f}")
    return pc, curve


def write_training_csv(path: str | Path, curve: Sequence[TrainingRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "mean_return", "mean_score",
                         "mean_residual", "entropy"])
        for row in curve:
            writer.writerow([row.iteration, row.mean_return, row.mean_score,
                             row.mean_residual, row.entropy])


def evaluate_policy(
    world: WorldSpec,
    model: DenoiserModel,
    env_cfg: TpeEnvConfig,
    policy,
    episodes: int = 500,
    size_range: tuple[int, int] = (4, 8),
    seed: int = 12345,
    gamma: float = 0.99,
) -> dict:
    """Behavior statistics of a policy: per-category transmission rounds,
    discard composition, units-per-round histogram, and outcome means."""
    env = TpeEnv(world, model, env_cfg)
    cat_of = {u.id: u.category.name for u in world.units}
    rounds_by_cat: dict[str, list[int]] = {}
    discard_by_cat: dict[str, int] = {}
    units_per_round: dict[int, list[int]] = {}
    scores, residuals, returns = [], [], []
    n_discarding = 0
    for ep in range(episodes):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1, ep]))
        request = sample_request(world, rng, size_range)
        trace = rollout_episode(env, request, policy, rng)
        scores.append(trace.score)
        residuals.append(trace.residual_latency)
        returns.append(trace.discounted_return(gamma))
        for uid, rnd in trace.unit_rounds.items():
            rounds_by_cat.setdefault(cat_of[uid], []).append(rnd)
        for uid in trace.undelivered:
            discard_by_cat[cat_of[uid]] = discard_by_cat.get(cat_of[uid], 0) + 1
        if trace.undelivered:
            n_discarding += 1
        for rnd, ids in enumerate(trace.selections):
            units_per_round.setdefault(rnd, []).append(len(ids))
    mean_round = {cat: float(np.mean(v)) for cat, v in rounds_by_cat.items()}
    round_hist = {
        cat: {int(r): int(np.sum(np.array(v) == r)) for r in sorted(set(v))}
        for cat, v in rounds_by_cat.items()
    }
    return {
        "episodes": episodes,
        "mean_score": float(np.mean(scores)),
        "mean_residual": float(np.mean(residuals)),
        "mean_return": float(np.mean(returns)),
        "mean_round_by_category": mean_round,
        "round_histogram": round_hist,
        "discard_composition": discard_by_cat,
        "discard_rate": n_discarding / episodes,
        "mean_units_per_round": {
            int(r): float(np.mean(v)) for r, v in sorted(units_per_round.items())
        },
    }
