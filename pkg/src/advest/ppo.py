"""PPO losses and the training loop with partial GAE.

Each iteration every actor tops its segment up to ``sample_length`` steps,
truncated GAE is computed per segment, and only the first ``partial_coef``
advantages of an unfinished segment are trained on. The rest of the segment
is carried into the actor's next segment, where it gets a fresh (less
truncated) advantage estimate. ``partial_coef == sample_length`` is plain PPO.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Sequence

import numpy as np

from advest import estimators
from advest.envs import Continuous, Discrete, Env
from advest.estimators import BootstrapMode, EstimatorParams
from advest.nn import AdamState, CategoricalPolicy, GaussianPolicy, Mlp, adam_step
from advest.trajectory import AdvantageBatch, RolloutBuffer, Transition, check_partial_coef, split_partial

RUNLOG_COLUMNS = (
    "iteration", "env_steps", "wall_clock_s", "mean_return_100", "success_rate_100",
    "policy_loss", "value_loss", "entropy", "adv_mean", "adv_std", "kept_fraction",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainerConfig:
    gamma: float = 0.99
    lam: float = 0.95
    sample_length: int = 128
    partial_coef: int = 64
    clip_coef: float = 0.2
    value_coef: float = 1.0
    entropy_coef: float = 0.01
    learning_rate: float = 2.5e-4
    n_actors: int = 64
    epochs: int = 2
    minibatch_size: int = 256
    total_env_steps: int = 1_000_000
    bootstrap_mode: BootstrapMode = BootstrapMode.ZERO_AT_TRUNCATION
    normalize_advantages: bool = False
    value_clip: bool = False
    seed: int = 0
    hidden_sizes: tuple = (64, 64)
    activation: str = "tanh"
    partial_gae: bool = True

    def __post_init__(self):
        object.__setattr__(self, "bootstrap_mode", BootstrapMode(self.bootstrap_mode))
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        self.validate()

    def validate(self):
        if self.sample_length < 1:
            raise ConfigError(f"sample_length T={self.sample_length} must be >= 1")
        try:
            check_partial_coef(self.partial_coef, self.sample_length)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        for name in ("n_actors", "epochs", "minibatch_size", "total_env_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.clip_coef <= 0 or self.learning_rate <= 0:
            raise ConfigError("clip_coef and learning_rate must be positive")
        try:
            self.estimator_params()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def estimator_params(self) -> EstimatorParams:
        return EstimatorParams(self.gamma, self.lam, self.bootstrap_mode)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["bootstrap_mode"] = self.bootstrap_mode.value
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


def clipped_surrogate(logp_new, logp_old, advantage, clip_coef: float):
    """Mean clipped PPO surrogate loss and its gradient w.r.t. ``logp_new``."""
    logp_new = np.asarray(logp_new, dtype=np.float64)
    advantage = np.asarray(advantage, dtype=np.float64)
    ratio = np.exp(logp_new - np.asarray(logp_old, dtype=np.float64))
    unclipped = ratio * advantage
    clipped = np.clip(ratio, 1.0 - clip_coef, 1.0 + clip_coef) * advantage
    n = max(advantage.size, 1)
    loss = -np.minimum(unclipped, clipped).sum() / n
    grad = np.where(unclipped <= clipped, -unclipped, 0.0) / n
    return float(loss), grad


def value_loss(v_new, v_old, target, clip_coef: float, value_clip: bool):
    """Mean squared value error (optionally clipped around ``v_old``) and its gradient."""
    v_new = np.asarray(v_new, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    n = max(v_new.size, 1)
    err = v_new - target
    if not value_clip:
        return float((err**2).sum() / n), 2.0 * err / n
    v_old = np.asarray(v_old, dtype=np.float64)
    delta = v_new - v_old
    inside = np.abs(delta) < clip_coef
    err_clipped = v_old + np.clip(delta, -clip_coef, clip_coef) - target
    use_plain = err**2 >= err_clipped**2
    grad = np.where(use_plain, 2.0 * err, np.where(inside, 2.0 * err_clipped, 0.0)) / n
    return float(np.maximum(err**2, err_clipped**2).sum() / n), grad


@dataclass
class Minibatch:
    observations: np.ndarray
    actions: np.ndarray
    behavior_logprobs: np.ndarray
    advantages: np.ndarray  # possibly normalised
    value_targets: np.ndarray
    old_values: np.ndarray

    def subset(self, idx) -> "Minibatch":
        return Minibatch(*(getattr(self, f.name)[idx] for f in dataclasses.fields(self)))


def loss_and_grads(policy, value_net: Mlp, batch: Minibatch, config: TrainerConfig):
    """Total loss ``surrogate + c_v * value_loss - c_e * entropy`` and gradients for both nets."""
    logp, entropy = policy.logprob_entropy(batch.observations, batch.actions)
    pl, dlogp = clipped_surrogate(logp, batch.behavior_logprobs, batch.advantages, config.clip_coef)
    n = max(entropy.size, 1)
    ent = float(entropy.mean())
    policy_grads = policy.backward(dlogp, np.full(entropy.size, -config.entropy_coef / n))
    v = value_net.forward(batch.observations)[:, 0]
    vl, dv = value_loss(v, batch.old_values, batch.value_targets, config.clip_coef, config.value_clip)
    value_grads = value_net.backward(config.value_coef * dv[:, None])
    total = pl + config.value_coef * vl - config.entropy_coef * ent
    return total, {"policy_loss": pl, "value_loss": vl, "entropy": ent}, policy_grads, value_grads


@dataclass
class RunLog:
    rows: List[dict] = field(default_factory=list)

    def append(self, row: dict):
        if self.rows and row["env_steps"] <= self.rows[-1]["env_steps"]:
            raise ValueError("env-step counter must increase monotonically")
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def deterministic_rows(self):
        """Rows without the wall-clock column, which is the only non-reproducible field."""
        return [{k: v for k, v in r.items() if k != "wall_clock_s"} for r in self.rows]

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    @staticmethod
    def format_row(row: dict) -> List[str]:
        out = []
        for c in RUNLOG_COLUMNS:
            v = row[c]
            out.append(str(v) if isinstance(v, (int, np.integer)) else repr(float(v)))
        return out

    def write_csv(self, path, append_from: int = 0):
        mode = "a" if append_from else "w"
        with open(path, mode, newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            if not append_from:
                writer.writerow(RUNLOG_COLUMNS)
            for row in self.rows[append_from:]:
                writer.writerow(self.format_row(row))

    @classmethod
    def read_csv(cls, path) -> "RunLog":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != RUNLOG_COLUMNS:
                raise ValueError(f"unexpected run log header {reader.fieldnames}")
            rows = [{k: (int(v) if k in ("iteration", "env_steps") else float(v)) for k, v in r.items()}
                    for r in reader]
        log = cls()
        log.rows = rows
        return log


def build_policy(spec, config: TrainerConfig, rng: np.random.Generator):
    space = spec.action_space
    if isinstance(space, Discrete):
        return CategoricalPolicy(spec.observation_dim, space.n, config.hidden_sizes, config.activation, rng)
    if isinstance(space, Continuous):
        return GaussianPolicy(spec.observation_dim, space.dim, config.hidden_sizes, config.activation, rng)
    raise TypeError(f"unsupported action space {space!r}")


def _mean_or_nan(values) -> float:
    return float(np.mean(values)) if len(values) else math.nan


def _zero_clock() -> float:
    return 0.0


class Trainer:
    """Algorithm state for one training run; :meth:`iterate` runs one collect/update cycle."""

    def __init__(self, config: TrainerConfig, env_factory: Callable[[], Env]):
        config.validate()
        self.config = config
        root = np.random.SeedSequence(config.seed)
        init_ss, update_ss, actor_ss, env_ss = root.spawn(4)
        self.update_rng = np.random.default_rng(update_ss)
        self.actor_rngs = [np.random.default_rng(s) for s in actor_ss.spawn(config.n_actors)]
        env_seeds = [int(s.generate_state(1)[0]) for s in env_ss.spawn(config.n_actors)]

        self.envs = [env_factory() for _ in range(config.n_actors)]
        self.spec = self.envs[0].spec
        init_rng = np.random.default_rng(init_ss)
        self.policy = build_policy(self.spec, config, init_rng)
        self.value_net = Mlp((self.spec.observation_dim, *config.hidden_sizes, 1), config.activation, init_rng)
        self.policy_opt = AdamState.like(self.policy.params, learning_rate=config.learning_rate)
        self.value_opt = AdamState.like(self.value_net.params, learning_rate=config.learning_rate)

        self.buffer = RolloutBuffer(config.n_actors, config.sample_length)
        self.obs = [env.reset(seed=s) for env, s in zip(self.envs, env_seeds)]
        self.episode_return = [0.0] * config.n_actors
        self.recent_returns: deque = deque(maxlen=100)
        self.recent_success: deque = deque(maxlen=100)
        self.env_steps = 0
        self.iteration = 0
        self.log = RunLog()
        self.clock = time.perf_counter  # swap for a constant to make wall_clock_s reproducible
        self._start = self.clock()
        self._elapsed_before = 0.0
        self.advantage_hook = None  # test seam: f(actor_id, advantages, keep_mask) -> advantages

    def freeze_clock(self):
        """Record wall_clock_s as 0 so whole run logs compare byte for byte."""
        self.clock = _zero_clock
        self._start = self._elapsed_before = 0.0

    # -- rollout ---------------------------------------------------------
    def values(self, observations: np.ndarray) -> np.ndarray:
        return self.value_net.forward(np.asarray(observations, dtype=np.float64))[:, 0]

    def _refresh_carried_values(self):
        for a in range(self.config.n_actors):
            steps = self.buffer.pending(a)
            if steps:
                self.buffer.set_value_preds(a, self.values(np.stack([tr.observation for tr in steps])))

    def _env_action(self, action):
        space = self.spec.action_space
        if isinstance(space, Continuous):
            return np.clip(action, space.low, space.high)
        return int(action)

    def collect(self):
        """Fill every actor's segment to length T; returns steps taken per actor."""
        cfg = self.config
        self._refresh_carried_values()
        taken = [0] * cfg.n_actors
        while True:
            active = [a for a in range(cfg.n_actors) if not self.buffer.is_full(a)]
            if not active:
                break
            obs_batch = np.stack([self.obs[a] for a in active])
            actions, logps = self.policy.sample(obs_batch, [self.actor_rngs[a] for a in active])
            values = self.values(obs_batch)
            for j, a in enumerate(active):
                env = self.envs[a]
                action = actions[j] if not self.policy.discrete else int(actions[j])
                try:
                    next_obs, reward, done = env.step(self._env_action(action))
                except Exception as exc:
                    raise RuntimeError(f"environment error in iteration {self.iteration + 1}, actor {a}: {exc}") from exc
                self.buffer.push(a, Transition(obs_batch[j], action, reward, done, float(values[j]), float(logps[j])))
                taken[a] += 1
                self.episode_return[a] += reward
                if done:
                    self.recent_returns.append(self.episode_return[a])
                    self.recent_success.append(float(env.success))
                    self.episode_return[a] = 0.0
                    next_obs = env.reset()
                self.obs[a] = next_obs
        return taken

    def build_batch(self):
        """Finalize segments, estimate advantages, split, carry over; return the kept minibatch source."""
        cfg = self.config
        params = cfg.estimator_params()
        boot_values = self.values(np.stack(self.obs))
        parts, adv_parts = [], []
        for a in range(cfg.n_actors):
            seg = self.buffer.finalize(a, float(boot_values[a]))
            dones = seg.dones
            value_preds = seg.value_preds
            adv = estimators.gae_truncated(seg.rewards, value_preds, dones, params, seg.bootstrap_value)
            if cfg.partial_gae:
                keep, tail = split_partial(seg, cfg.partial_coef)
                self.buffer.carryover(a, tail)
            else:
                keep, tail = np.ones(len(seg), dtype=bool), []
            if self.advantage_hook is not None:
                adv = self.advantage_hook(a, adv, keep)
            targets = estimators.value_targets(adv, value_preds)
            adv_parts.append(AdvantageBatch(adv[keep], targets[keep], np.ones(int(keep.sum()), bool),
                                            np.flatnonzero(keep) + 1))
            parts.append(Minibatch(
                seg.observations[keep], seg.actions[keep], seg.behavior_logprobs[keep],
                adv[keep], targets[keep], value_preds[keep],
            ))
        adv_batch = AdvantageBatch.concatenate(adv_parts)
        data = Minibatch(*(np.concatenate([getattr(p, f.name) for p in parts])
                           for f in dataclasses.fields(Minibatch)))
        return data, adv_batch

    # -- update ----------------------------------------------------------
    def update(self, data: Minibatch, adv_batch: AdvantageBatch):
        cfg = self.config
        if cfg.normalize_advantages and len(adv_batch.advantages) >= 2:
            data = dataclasses.replace(data, advantages=estimators.normalize_advantages(adv_batch).advantages)
        n = len(data.advantages)
        stats = {"policy_loss": [], "value_loss": [], "entropy": []}
        for _ in range(cfg.epochs):
            perm = self.update_rng.permutation(n)
            for start in range(0, n, cfg.minibatch_size):
                mb = data.subset(perm[start:start + cfg.minibatch_size])
                _, parts, pg, vg = loss_and_grads(self.policy, self.value_net, mb, cfg)
                adam_step(self.policy_opt, self.policy.params, pg)
                adam_step(self.value_opt, self.value_net.params, vg)
                for k, v in parts.items():
                    stats[k].append(v)
        return {k: _mean_or_nan(v) for k, v in stats.items()}

    def iterate(self) -> dict:
        cfg = self.config
        taken = self.collect()
        data, adv_batch = self.build_batch()
        stats = self.update(data, adv_batch)
        self.iteration += 1
        self.env_steps += sum(taken)
        raw = adv_batch.advantages
        row = {
            "iteration": self.iteration,
            "env_steps": self.env_steps,
            "wall_clock_s": self._elapsed_before + self.clock() - self._start,
            "mean_return_100": _mean_or_nan(self.recent_returns),
            "success_rate_100": _mean_or_nan(self.recent_success),
            "policy_loss": stats["policy_loss"],
            "value_loss": stats["value_loss"],
            "entropy": stats["entropy"],
            "adv_mean": float(raw.mean()),
            "adv_std": float(raw.std()),
            "kept_fraction": len(raw) / (cfg.n_actors * cfg.sample_length),
            "steps_per_actor": taken,
        }
        self.log.append({k: v for k, v in row.items() if k in RUNLOG_COLUMNS})
        return row

    def run(self, total_env_steps: int | None = None, on_iteration=None) -> RunLog:
        budget = self.config.total_env_steps if total_env_steps is None else total_env_steps
        while self.env_steps < budget:
            row = self.iterate()
            if on_iteration is not None:
                on_iteration(self, row)
        return self.log

    # -- persistence -----------------------------------------------------
    def state_dict(self) -> dict:
        return {
            "policy": [p.copy() for p in self.policy.params],
            "value": [p.copy() for p in self.value_net.params],
            "policy_opt": dataclasses.replace(self.policy_opt, m=[m.copy() for m in self.policy_opt.m],
                                              v=[v.copy() for v in self.policy_opt.v]),
            "value_opt": dataclasses.replace(self.value_opt, m=[m.copy() for m in self.value_opt.m],
                                             v=[v.copy() for v in self.value_opt.v]),
            "update_rng": self.update_rng.bit_generator.state,
            "actor_rngs": [r.bit_generator.state for r in self.actor_rngs],
            "envs": self.envs,
            "buffer": self.buffer.state_dict(),
            "obs": [o.copy() for o in self.obs],
            "episode_return": list(self.episode_return),
            "recent_returns": list(self.recent_returns),
            "recent_success": list(self.recent_success),
            "env_steps": self.env_steps,
            "iteration": self.iteration,
            "log_rows": [dict(r) for r in self.log.rows],
            "elapsed": self._elapsed_before + self.clock() - self._start,
        }

    def load_state_dict(self, state: dict):
        for dst, src in zip(self.policy.params, state["policy"]):
            dst[...] = src
        for dst, src in zip(self.value_net.params, state["value"]):
            dst[...] = src
        self.policy_opt = state["policy_opt"]
        self.value_opt = state["value_opt"]
        self.update_rng.bit_generator.state = state["update_rng"]
        for rng, st in zip(self.actor_rngs, state["actor_rngs"]):
            rng.bit_generator.state = st
        self.envs = state["envs"]
        self.buffer.load_state_dict(state["buffer"])
        self.obs = [o.copy() for o in state["obs"]]
        self.episode_return = list(state["episode_return"])
        self.recent_returns = deque(state["recent_returns"], maxlen=100)
        self.recent_success = deque(state["recent_success"], maxlen=100)
        self.env_steps = state["env_steps"]
        self.iteration = state["iteration"]
        self.log = RunLog([dict(r) for r in state["log_rows"]])
        self._elapsed_before = state["elapsed"]
        self._start = self.clock()


def train(config: TrainerConfig, env_factory: Callable[[], Env], on_iteration=None) -> RunLog:
    """Run PPO (with partial GAE unless ``config.partial_gae`` is off) to the env-step budget."""
    return Trainer(config, env_factory).run(on_iteration=on_iteration)


def evaluate(policy, env: Env, n_episodes: int, seed: int, greedy: bool = True):
    """Mean episode return and success rate of ``policy`` over ``n_episodes`` fresh episodes."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    rng = np.random.default_rng(seed)
    returns, successes = [], []
    obs = env.reset(seed=seed)
    for _ in range(n_episodes):
        total, done = 0.0, False
        while not done:
            actions, _ = policy.sample(np.atleast_2d(obs), [rng], greedy=greedy)
            action = int(actions[0]) if policy.discrete else np.clip(actions[0], env.spec.action_space.low,
                                                                     env.spec.action_space.high)
            obs, reward, done = env.step(action)
            total += reward
        returns.append(total)
        successes.append(float(env.success))
        obs = env.reset()
    return float(np.mean(returns)), float(np.mean(successes))
