"""Exact tabular MDP machinery used as ground truth for estimator bias and variance."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, FrozenSet, Iterable, Union

import numpy as np

from advest import estimators
from advest.estimators import EstimatorParams

PROB_TOL = 1e-12
DENSE_SOLVE_MAX_STATES = 64

STUDY_COLUMNS = ("t", "n", "mean_adv", "std_adv", "bias", "std_reward_part", "std_value_part")


class SingularSystemError(ValueError):
    pass


@dataclass
class TabularMDP:
    transition: np.ndarray  # [state, action, next_state]
    reward: np.ndarray  # [state, action]
    gamma: float
    terminal_states: FrozenSet[int] = frozenset()
    initial_distribution: np.ndarray | None = None

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        self.terminal_states = frozenset(int(s) for s in self.terminal_states)
        n_s, n_a, n_next = self.transition.shape
        if n_next != n_s or self.reward.shape != (n_s, n_a):
            raise ValueError(f"inconsistent shapes: transition {self.transition.shape}, reward {self.reward.shape}")
        if (self.transition < 0).any() or np.abs(self.transition.sum(axis=2) - 1.0).max() > PROB_TOL:
            raise ValueError("each transition row must be a probability distribution")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        for s in self.terminal_states:
            if not (self.transition[s, :, s] == 1.0).all() or (self.reward[s] != 0.0).any():
                raise ValueError(f"terminal state {s} must self-loop with zero reward")
        if self.initial_distribution is None:
            init = np.zeros(n_s)
            init[0] = 1.0
            self.initial_distribution = init
        self.initial_distribution = np.asarray(self.initial_distribution, dtype=np.float64)
        if abs(self.initial_distribution.sum() - 1.0) > PROB_TOL or (self.initial_distribution < 0).any():
            raise ValueError("initial_distribution must be a probability vector")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def terminal_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_states, dtype=bool)
        mask[list(self.terminal_states)] = True
        return mask


@dataclass
class TabularPolicy:
    action_probs: np.ndarray  # [state, action]

    def __post_init__(self):
        self.action_probs = np.asarray(self.action_probs, dtype=np.float64)
        if (self.action_probs < 0).any() or np.abs(self.action_probs.sum(axis=1) - 1.0).max() > PROB_TOL:
            raise ValueError("policy rows must be probability distributions")

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions: Iterable[int], n_actions: int) -> "TabularPolicy":
        actions = np.asarray(list(actions), dtype=int)
        probs = np.zeros((actions.size, n_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs)


def chain_mdp(n_states: int = 5, gamma: float = 0.99, p_forward: float = 0.8, p_terminate: float = 0.01,
              rewards: np.ndarray | None = None, exit_right: bool = True) -> TabularMDP:
    """Noisy two-action chain with an absorbing terminal state appended at index ``n_states``.

    Action 1 moves right and action 0 left with probability ``p_forward``
    (otherwise the agent stays); every step ends the episode with probability
    ``p_terminate``. With ``exit_right`` stepping right off the last cell
    ends it for sure; otherwise the agent bumps into the wall and stays.
    Default rewards grow along the chain, ``1 + s / (n_states - 1)``.
    """
    n = n_states
    term = n
    P = np.zeros((n + 1, 2, n + 1))
    for s in range(n):
        left, right = max(s - 1, 0), s + 1
        if not exit_right:
            right = min(right, n - 1)
        for a, target in ((0, left), (1, right)):
            if target == n:
                P[s, a, term] = 1.0
                continue
            live = 1.0 - p_terminate
            P[s, a, target] += live * p_forward
            P[s, a, s] += live * (1.0 - p_forward)
            P[s, a, term] += p_terminate
    P[term, :, term] = 1.0
    if rewards is None:
        rewards = 1.0 + np.arange(n) / max(n - 1, 1)
    R = np.zeros((n + 1, 2))
    R[:n] = np.broadcast_to(np.asarray(rewards, dtype=np.float64).reshape(n, -1), (n, 2))
    return TabularMDP(P, R, gamma, frozenset({term}))


def study_chain(gamma: float = 0.99) -> TabularMDP:
    """5-cell chain whose episodes rarely end inside a segment, so truncation dominates."""
    return chain_mdp(5, gamma, p_forward=0.8, p_terminate=0.002, exit_right=False)


def goal_chain(n_states: int = 5, gamma: float = 0.99, p_forward: float = 0.8) -> TabularMDP:
    """Noisy chain with a single reward of 1 for stepping right off the last cell.

    The optimal action is "right" in every cell.
    """
    rewards = np.zeros((n_states, 2))
    rewards[-1, 1] = 1.0
    return chain_mdp(n_states, gamma, p_forward=p_forward, p_terminate=0.0, rewards=rewards)


def deterministic_chain(n_states: int = 5, gamma: float = 0.9) -> TabularMDP:
    """Single-action chain ``0 -> 1 -> ... -> n-1 -> terminal``; reward 1 on the last move only."""
    n = n_states
    P = np.zeros((n + 1, 1, n + 1))
    for s in range(n):
        P[s, 0, s + 1] = 1.0
    P[n, 0, n] = 1.0
    R = np.zeros((n + 1, 1))
    R[n - 1, 0] = 1.0
    return TabularMDP(P, R, gamma, frozenset({n}))


def _policy_matrices(mdp: TabularMDP, policy: TabularPolicy):
    pi = policy.action_probs
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy shape {pi.shape} does not match MDP ({mdp.n_states}, {mdp.n_actions})")
    P_pi = np.einsum("sa,san->sn", pi, mdp.transition)
    R_pi = np.einsum("sa,sa->s", pi, mdp.reward)
    return P_pi, R_pi


def exact_state_values(mdp: TabularMDP, policy: TabularPolicy) -> np.ndarray:
    """Solve ``V = R_pi + gamma P_pi V`` with terminal states pinned to 0."""
    P_pi, R_pi = _policy_matrices(mdp, policy)
    live = ~mdp.terminal_mask
    P_live = P_pi[np.ix_(live, live)]
    R_live = R_pi[live]
    n = int(live.sum())
    V = np.zeros(mdp.n_states)
    if n == 0:
        return V
    if n <= DENSE_SOLVE_MAX_STATES:
        A = np.eye(n) - mdp.gamma * P_live
        if np.linalg.cond(A) > 1e12:
            raise SingularSystemError("Bellman system is singular (gamma = 1 with a non-terminating chain?)")
        V[live] = np.linalg.solve(A, R_live)
    else:
        v = np.zeros(n)
        for _ in range(1_000_000):
            new = R_live + mdp.gamma * P_live @ v
            if np.max(np.abs(new - v)) < 1e-13:
                v = new
                break
            v = new
        else:
            raise SingularSystemError("policy evaluation sweep did not converge")
        V[live] = v
    residual = np.max(np.abs(V - (R_pi + mdp.gamma * P_pi @ V)))
    if residual > 1e-10 * max(1.0, np.max(np.abs(V))):
        raise SingularSystemError(f"Bellman residual {residual:.3g} too large")
    return V


def exact_advantage(mdp: TabularMDP, policy: TabularPolicy, V: np.ndarray) -> np.ndarray:
    """``A(s, a) = r(s, a) + gamma * E[V(s')] - V(s)``."""
    q = mdp.reward + mdp.gamma * mdp.transition @ V
    adv = q - V[:, None]
    adv[mdp.terminal_mask] = 0.0
    return adv


def optimal_policy(mdp: TabularMDP, tol: float = 1e-12, max_iter: int = 100_000):
    """Value iteration; returns ``(greedy_actions, V_star)``."""
    V = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        q = mdp.reward + mdp.gamma * mdp.transition @ V
        new = q.max(axis=1)
        new[mdp.terminal_mask] = 0.0
        if np.max(np.abs(new - V)) < tol:
            V = new
            break
        V = new
    q = mdp.reward + mdp.gamma * mdp.transition @ V
    return q.argmax(axis=1), V


@dataclass
class Rollouts:
    states: np.ndarray  # [n, T] int, -1 where the episode had already ended
    actions: np.ndarray  # [n, T]
    rewards: np.ndarray  # [n, T]
    dones: np.ndarray  # [n, T]
    final_state: np.ndarray  # [n] state after the last recorded step
    lengths: np.ndarray  # [n] recorded steps per rollout


def sample_rollouts(mdp: TabularMDP, policy: TabularPolicy, horizon: int, n_rollouts: int, seed: int) -> Rollouts:
    """Sample the first ``horizon`` steps of ``n_rollouts`` episodes.

    Rollout ``i`` consumes only its own stream ``default_rng([seed, i])`` so
    results do not depend on how rollouts are batched.
    """
    uniforms = np.stack([np.random.default_rng([seed, i]).random(2 * horizon + 1) for i in range(n_rollouts)])
    cdf_init = np.cumsum(mdp.initial_distribution)
    cdf_pi = np.cumsum(policy.action_probs, axis=1)
    cdf_P = np.cumsum(mdp.transition, axis=2)
    terminal = mdp.terminal_mask

    def draw(cdf_rows, u):
        idx = (u[:, None] >= cdf_rows).sum(axis=1)
        return np.minimum(idx, cdf_rows.shape[1] - 1)

    state = draw(np.broadcast_to(cdf_init, (n_rollouts, cdf_init.size)), uniforms[:, 0])
    states = np.full((n_rollouts, horizon), -1, dtype=int)
    actions = np.full((n_rollouts, horizon), -1, dtype=int)
    rewards = np.zeros((n_rollouts, horizon))
    dones = np.zeros((n_rollouts, horizon), dtype=bool)
    alive = ~terminal[state]
    lengths = np.zeros(n_rollouts, dtype=int)
    for t in range(horizon):
        if not alive.any():
            break
        a = draw(cdf_pi[state], uniforms[:, 1 + 2 * t])
        nxt = draw(cdf_P[state, a], uniforms[:, 2 + 2 * t])
        states[alive, t] = state[alive]
        actions[alive, t] = a[alive]
        rewards[alive, t] = mdp.reward[state[alive], a[alive]]
        dones[alive, t] = terminal[nxt[alive]]
        lengths += alive
        state = np.where(alive, nxt, state)
        alive = alive & ~terminal[nxt]
    return Rollouts(states, actions, rewards, dones, state, lengths)


@dataclass
class StudyTable:
    t: np.ndarray
    n: np.ndarray
    mean_adv: np.ndarray
    std_adv: np.ndarray
    bias: np.ndarray
    std_reward_part: np.ndarray
    std_value_part: np.ndarray
    # not serialised: standard error of the bias column
    bias_se: np.ndarray | None = field(default=None, compare=False)

    def __len__(self):
        return len(self.t)

    def rows(self):
        for i in range(len(self)):
            yield [int(self.t[i]), int(self.n[i])] + [float(getattr(self, c)[i]) for c in STUDY_COLUMNS[2:]]

    def to_csv(self, path: Union[str, Path]):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(STUDY_COLUMNS)
            for row in self.rows():
                writer.writerow([row[0], row[1]] + [repr(x) for x in row[2:]])

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "StudyTable":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != STUDY_COLUMNS:
                raise ValueError(f"unexpected study table header {header}")
            rows = list(reader)
        cols = list(zip(*rows)) if rows else [()] * len(STUDY_COLUMNS)
        ints = [np.array([int(x) for x in c], dtype=int) for c in cols[:2]]
        floats = [np.array([float(x) for x in c]) for c in cols[2:]]
        return cls(*ints, *floats)


def _std(x: np.ndarray) -> float:
    return float(np.std(x, ddof=1)) if x.size > 1 else float("nan")


def summarize_positions(adv, reward_part, value_part, present, error=None) -> StudyTable:
    """Per-position statistics over a ``[n_samples, T]`` grid of estimates.

    ``present`` marks which cells hold a sample; ``error`` (estimate minus
    ground truth) fills the bias column, NaN when absent.
    """
    horizon = adv.shape[1]
    cols = {c: np.full(horizon, np.nan) for c in STUDY_COLUMNS[2:]}
    bias_se = np.full(horizon, np.nan)
    counts = present.sum(axis=0)
    for t in range(horizon):
        rows = present[:, t]
        if not rows.any():
            continue
        cols["mean_adv"][t] = adv[rows, t].mean()
        cols["std_adv"][t] = _std(adv[rows, t])
        cols["std_reward_part"][t] = _std(reward_part[rows, t])
        cols["std_value_part"][t] = _std(value_part[rows, t])
        if error is not None:
            cols["bias"][t] = error[rows, t].mean()
            bias_se[t] = _std(error[rows, t]) / np.sqrt(rows.sum())
    return StudyTable(np.arange(1, horizon + 1), counts.astype(int), bias_se=bias_se, **cols)


def estimator_study(mdp: TabularMDP, policy: TabularPolicy, value_fn, params: EstimatorParams, horizon: int,
                    n_rollouts: int, seed: int, exact_values: np.ndarray | None = None) -> StudyTable:
    """Per-position mean, spread and bias of truncated GAE under a fixed policy.

    ``value_fn`` is the critic the estimator uses: an array over states, a
    callable ``state -> value``, or ``None`` for the exact values. Bias is
    measured against the exact advantage of the visited state-action pair.
    """
    if n_rollouts < 100:
        raise ValueError("estimator_study needs n_rollouts >= 100")
    if exact_values is None:
        exact_values = exact_state_values(mdp, policy)
    true_adv = exact_advantage(mdp, policy, exact_values)
    if value_fn is None:
        critic = exact_values
    elif callable(value_fn):
        critic = np.array([value_fn(s) for s in range(mdp.n_states)], dtype=np.float64)
    else:
        critic = np.asarray(value_fn, dtype=np.float64)
    critic = np.where(mdp.terminal_mask, 0.0, critic)

    ro = sample_rollouts(mdp, policy, horizon, n_rollouts, seed)
    adv = np.zeros((n_rollouts, horizon))
    r_part = np.zeros_like(adv)
    v_part = np.zeros_like(adv)
    for i in range(n_rollouts):
        k = int(ro.lengths[i])
        if k == 0:
            continue
        s = ro.states[i, :k]
        boot = float(critic[ro.final_state[i]])
        rew, vals, dn = ro.rewards[i, :k], critic[s], ro.dones[i, :k]
        adv[i, :k] = estimators.gae_truncated(rew, vals, dn, params, boot)
        r_part[i, :k], v_part[i, :k] = estimators.decompose(rew, vals, dn, params, boot)
    present = ro.states >= 0
    safe_s = np.where(present, ro.states, 0)
    safe_a = np.where(present, ro.actions, 0)
    error = adv - true_adv[safe_s, safe_a]
    return summarize_positions(adv, r_part, v_part, present, error)


def spearman_bias_trend(table: StudyTable):
    """Spearman correlation of ``|bias|`` against position over positions with samples."""
    from scipy.stats import spearmanr

    ok = table.n > 0
    res = spearmanr(table.t[ok], np.abs(table.bias[ok]))
    return float(res.statistic), float(res.pvalue)


def log_linear_decay_slope(table: StudyTable, min_count: int = 1) -> float:
    """Least-squares slope of ``log|bias|`` against steps-to-segment-end ``T - t``."""
    ok = (table.n >= min_count) & np.isfinite(table.bias) & (np.abs(table.bias) > 0)
    steps_left = len(table) - table.t[ok]
    slope, _ = np.polyfit(steps_left, np.log(np.abs(table.bias[ok])), 1)
    return float(slope)


ValueFunction = Callable[[int], float]
