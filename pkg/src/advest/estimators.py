"""Return and advantage estimators over fixed-length rollout segments.

All functions take plain arrays for one actor's segment:

    rewards[i], values[i] = r_i, V(s_i)        for i = 0 .. T-1
    dones[i]                                   episode terminated after step i
    bootstrap_value                            V(s_T), the observation after the last step

Indices are 0-based. A ``done`` flag cuts the segment into independent
chunks: nothing is bootstrapped or accumulated across it. The final chunk is
*truncated* unless ``dones[-1]`` is set, and how its last TD residual is
closed depends on :class:`BootstrapMode`.

Everything is computed in float64.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass

import numpy as np

from advest.trajectory import AdvantageBatch

NORM_EPS = 1e-8


class BootstrapMode(str, enum.Enum):
    # delta_T = r_T - V(s_T): the unobserved future is treated as worth 0
    ZERO_AT_TRUNCATION = "zero"
    # delta_T = r_T + gamma * V(s_{T+1}) - V(s_T)
    VALUE_AT_TRUNCATION = "value"


@dataclass(frozen=True)
class EstimatorParams:
    gamma: float = 0.99
    lam: float = 0.95
    bootstrap_mode: BootstrapMode = BootstrapMode.ZERO_AT_TRUNCATION

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        object.__setattr__(self, "bootstrap_mode", BootstrapMode(self.bootstrap_mode))

    @property
    def decay(self) -> float:
        return self.gamma * self.lam


def td_delta(r_t: float, v_t: float, v_next: float, next_is_terminal: bool, gamma: float) -> float:
    """One-step TD residual ``r_t + gamma * V(s_{t+1}) - V(s_t)``."""
    if next_is_terminal:
        v_next = 0.0
    return float(r_t) + gamma * float(v_next) - float(v_t)


def _as_segment(rewards, values, dones):
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if dones is None:
        dones = np.zeros(rewards.shape, dtype=bool)
    dones = np.asarray(dones, dtype=bool)
    if rewards.ndim != 1 or rewards.shape != values.shape or rewards.shape != dones.shape:
        raise ValueError(
            f"rewards/values/dones must be aligned 1-d arrays, got shapes "
            f"{rewards.shape}, {values.shape}, {dones.shape}"
        )
    if rewards.size == 0:
        raise IndexError("empty segment")
    return rewards, values, dones


def next_values(values, dones, params: EstimatorParams, bootstrap_value: float = 0.0) -> np.ndarray:
    """V(s_{i+1}) as seen by the TD residual at step i (0 after terminals)."""
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    nxt = np.empty_like(values)
    nxt[:-1] = values[1:]
    if params.bootstrap_mode is BootstrapMode.VALUE_AT_TRUNCATION:
        nxt[-1] = bootstrap_value
    else:
        nxt[-1] = 0.0
    nxt[dones] = 0.0
    return nxt


def td_residuals(rewards, values, dones, params: EstimatorParams, bootstrap_value: float = 0.0) -> np.ndarray:
    rewards, values, dones = _as_segment(rewards, values, dones)
    return rewards + params.gamma * next_values(values, dones, params, bootstrap_value) - values


def chunk_end(dones, t: int) -> int:
    """Index of the last step of the episode chunk containing step ``t``."""
    dones = np.asarray(dones, dtype=bool)
    hits = np.flatnonzero(dones[t:])
    return t + int(hits[0]) if hits.size else dones.size - 1


def _check_index(t: int, length: int):
    if not 0 <= t < length:
        raise IndexError(f"step index {t} outside segment of length {length}")


def n_step_advantage(rewards, values, dones, t: int, k: int, params: EstimatorParams,
                     bootstrap_value: float = 0.0) -> float:
    """k-step advantage ``-V(s_t) + gamma^k V(s_{t+k}) + sum_l gamma^l r_{t+l}``.

    Equal to the discounted sum of the first ``k`` TD residuals from ``t``.
    The window may end on a terminal step but may not run past one.
    """
    rewards, values, dones = _as_segment(rewards, values, dones)
    _check_index(t, rewards.size)
    if k < 1 or t + k > rewards.size:
        raise IndexError(f"{k}-step window from t={t} overruns segment of length {rewards.size}")
    last = t + k - 1
    if last > chunk_end(dones, t):
        raise ValueError(f"{k}-step window from t={t} crosses an episode boundary")
    nxt = next_values(values, dones, params, bootstrap_value)
    discounts = params.gamma ** np.arange(k)
    return float(-values[t] + params.gamma**k * nxt[last] + discounts @ rewards[t:last + 1])


def lambda_return(rewards, values, dones, t: int, params: EstimatorParams,
                  bootstrap_value: float = 0.0) -> float:
    """Finite-horizon lambda-return from ``t`` to the end of its chunk.

    ``lam**(N-1) * G^(N) + (1 - lam) * sum_{n<N} lam**(n-1) * G^(n)`` where
    ``N`` is the number of steps left in the chunk.
    """
    rewards, values, dones = _as_segment(rewards, values, dones)
    _check_index(t, rewards.size)
    end = chunk_end(dones, t)
    nxt = next_values(values, dones, params, bootstrap_value)
    horizon = end - t + 1
    lam, gamma = params.lam, params.gamma
    total = 0.0
    partial_reward = 0.0
    for n in range(1, horizon + 1):
        partial_reward += gamma ** (n - 1) * rewards[t + n - 1]
        g_n = partial_reward + gamma**n * nxt[t + n - 1]
        weight = lam ** (n - 1) if n == horizon else (1.0 - lam) * lam ** (n - 1)
        total += weight * g_n
    return float(total)


def gae_truncated(rewards, values, dones, params: EstimatorParams, bootstrap_value: float = 0.0) -> np.ndarray:
    """Truncated GAE for every step by the backward recursion ``A_t = delta_t + gamma*lam*A_{t+1}``."""
    rewards, values, dones = _as_segment(rewards, values, dones)
    deltas = td_residuals(rewards, values, dones, params, bootstrap_value)
    decay = params.decay
    adv = np.empty_like(deltas)
    running = 0.0
    for i in range(deltas.size - 1, -1, -1):
        if dones[i]:
            running = 0.0
        running = deltas[i] + decay * running
        adv[i] = running
    return adv


def gae_direct_sum(rewards, values, dones, params: EstimatorParams, bootstrap_value: float = 0.0) -> np.ndarray:
    """Reference double sum ``A_t = sum_{l=0}^{end-t} (gamma*lam)^l delta_{t+l}``; O(T^2)."""
    rewards, values, dones = _as_segment(rewards, values, dones)
    deltas = td_residuals(rewards, values, dones, params, bootstrap_value)
    out = np.empty_like(deltas)
    for t in range(deltas.size):
        end = chunk_end(dones, t)
        out[t] = params.decay ** np.arange(end - t + 1) @ deltas[t:end + 1]
    return out


def gae_exponential_form(rewards, values, dones, t: int, params: EstimatorParams,
                         bootstrap_value: float = 0.0, literal: bool = False) -> float:
    """GAE at ``t`` as an exponentially weighted mix of k-step advantages.

    With ``M`` steps left in the chunk the weights are ``(1-lam) lam^(k-1)``
    for ``k < M`` and ``lam^(M-1)`` on the longest estimator, which makes the
    weights sum to one and the result equal to :func:`gae_truncated`.

    ``literal=True`` uses ``(1-lam) lam^(k-1)`` for every ``k <= M`` with no
    tail weight. That variant is short of the recursion by
    ``lam^M * A^(M)_t`` and is kept only so the discrepancy can be measured.
    """
    rewards, values, dones = _as_segment(rewards, values, dones)
    _check_index(t, rewards.size)
    lam = params.lam
    if literal and lam == 1.0:
        raise ValueError("literal exponential form is degenerate at lambda = 1 (all weights vanish)")
    horizon = chunk_end(dones, t) - t + 1
    k = np.arange(1, horizon + 1)
    weights = (1.0 - lam) * lam ** (k - 1)
    if not literal:
        weights[-1] = lam ** (horizon - 1)
    # every k-step advantage at once: -V(s_t) + sum_{l<k} gamma^l r_{t+l} + gamma^k V_next(t+k-1)
    nxt = next_values(values, dones, params, bootstrap_value)[t:t + horizon]
    discounted = np.cumsum(params.gamma ** (k - 1) * rewards[t:t + horizon])
    k_step = -values[t] + discounted + params.gamma**k * nxt
    return float(weights @ k_step)


def gae_complete(rewards, values, params: EstimatorParams, dones=None) -> np.ndarray:
    """GAE over a whole episode that terminates at its last step.

    Without ``dones`` the input is taken to be a single episode.
    """
    if dones is None:
        dones = np.zeros(len(rewards), dtype=bool)
        if dones.size:
            dones[-1] = True
    rewards, values, dones = _as_segment(rewards, values, dones)
    if not dones[-1]:
        raise ValueError("complete-trajectory GAE needs a trajectory ending in a terminal step")
    return gae_truncated(rewards, values, dones, params)


def bias_term(rewards, values, t: int, horizon: int, params: EstimatorParams) -> float:
    """Complete-minus-truncated GAE at ``t`` when the episode is cut after ``horizon`` steps.

    ``rewards``/``values`` cover one full episode of length D ending in a
    terminal step. The truncated estimator sees steps ``0 .. horizon-1`` and
    closes them according to ``params.bootstrap_mode`` with the true
    ``V(s_horizon)`` as bootstrap. Computed as the explicit tail sum

        sum_{l = horizon-t}^{D-1-t} (gamma*lam)^l delta_{t+l}

    plus, in ZERO mode, the ``(gamma*lam)^(horizon-1-t) * gamma * V(s_horizon)``
    that the zeroed bootstrap dropped.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    length = rewards.size
    if not 0 <= t < horizon <= length:
        raise IndexError(f"need 0 <= t < horizon <= D, got t={t}, horizon={horizon}, D={length}")
    dones = np.zeros(length, dtype=bool)
    dones[-1] = True
    deltas = td_residuals(rewards, values, dones, params)
    decay = params.decay
    lags = np.arange(horizon - t, length - t)
    total = float(decay**lags @ deltas[horizon:]) if lags.size else 0.0
    if params.bootstrap_mode is BootstrapMode.ZERO_AT_TRUNCATION and horizon < length:
        total += decay ** (horizon - 1 - t) * params.gamma * values[horizon]
    return total


def decompose(rewards, values, dones, params: EstimatorParams, bootstrap_value: float = 0.0):
    """Split truncated GAE into a reward part and a value part for every step.

    ``reward_part[t] = sum_l (gamma*lam)^l r_{t+l}``
    ``value_part[t]  = -V(s_t) + gamma(1-lam) sum_{l<m} (gamma*lam)^l V(s_{t+l+1})
                       + (gamma*lam)^m * gamma * V_boot``

    where ``m`` is the number of steps after ``t`` in its chunk and ``V_boot``
    is what the last residual of the chunk bootstraps from (0 after a terminal
    or in ZERO mode). ``reward_part + value_part`` reproduces :func:`gae_truncated`.
    """
    rewards, values, dones = _as_segment(rewards, values, dones)
    gamma, decay = params.gamma, params.decay
    nxt = next_values(values, dones, params, bootstrap_value)
    size = rewards.size
    reward_part = np.empty(size)
    value_part = np.empty(size)
    acc_r = 0.0
    acc_v = 0.0  # sum_{l<m} decay^l V(s_{t+l+1})
    tail = 0.0  # decay^m * gamma * V_boot
    for i in range(size - 1, -1, -1):
        if dones[i] or i == size - 1:
            acc_r, acc_v, tail = 0.0, 0.0, gamma * nxt[i]
        else:
            acc_v = values[i + 1] + decay * acc_v
            tail = decay * tail
        acc_r = rewards[i] + decay * acc_r
        reward_part[i] = acc_r
        value_part[i] = -values[i] + gamma * (1.0 - params.lam) * acc_v + tail
    return reward_part, value_part


def decompose_at(rewards, values, dones, t: int, params: EstimatorParams, bootstrap_value: float = 0.0):
    """Single-step form of :func:`decompose` by direct summation."""
    rewards, values, dones = _as_segment(rewards, values, dones)
    _check_index(t, rewards.size)
    end = chunk_end(dones, t)
    nxt = next_values(values, dones, params, bootstrap_value)
    gamma, decay = params.gamma, params.decay
    m = end - t
    a_reward = float(decay ** np.arange(m + 1) @ rewards[t:end + 1])
    value_sum = float(decay ** np.arange(m) @ values[t + 1:end + 1]) if m else 0.0
    a_value = -values[t] + gamma * (1.0 - params.lam) * value_sum + decay**m * gamma * nxt[end]
    return a_reward, float(a_value)


def normalize_advantages(batch: AdvantageBatch) -> AdvantageBatch:
    """Standardise kept advantages to zero mean and unit (population) std.

    Masked entries are passed through untouched.
    """
    mask = np.asarray(batch.keep_mask, dtype=bool)
    if not mask.any():
        raise ValueError("cannot normalise a batch with no kept entries")
    adv = np.array(batch.advantages, dtype=np.float64, copy=True)
    kept = adv[mask]
    adv[mask] = (kept - kept.mean()) / (kept.std() + NORM_EPS)
    return dataclasses.replace(batch, advantages=adv)


def value_targets(advantages, value_preds) -> np.ndarray:
    advantages = np.asarray(advantages, dtype=np.float64)
    value_preds = np.asarray(value_preds, dtype=np.float64)
    if advantages.shape != value_preds.shape:
        raise ValueError(f"length mismatch: {advantages.shape} vs {value_preds.shape}")
    return advantages + value_preds
