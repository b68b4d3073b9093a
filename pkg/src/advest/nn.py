"""Numpy MLP with hand-written backprop, policy heads and Adam.

Parameters are plain ``float64`` arrays held in lists so the optimizer,
gradient checker and checkpoint code can treat every network the same way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
LOG_2PI = math.log(2.0 * math.pi)

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda pre, post: 1.0 - post**2),
    "relu": (lambda x: np.maximum(x, 0.0), lambda pre, post: (pre > 0).astype(np.float64)),
}


class Mlp:
    """Fully connected net; hidden activation ``tanh`` or ``relu``, linear output.

    Weights start uniform in ``+-1/sqrt(fan_in)`` (biases zero); the output
    layer is further multiplied by ``output_scale``. ``output_scale=0`` gives
    a net that outputs exactly zero until trained.
    """

    def __init__(self, sizes: Sequence[int], activation: str = "tanh",
                 rng: np.random.Generator | None = None, output_scale: float = 1.0):
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"need at least input and output sizes >= 1, got {sizes}")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.sizes = tuple(int(s) for s in sizes)
        self.activation = activation
        self.params: List[np.ndarray] = []
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = 1.0 / math.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            if i == len(self.sizes) - 2:
                w *= output_scale
            self.params += [w, np.zeros(fan_out)]
        self._cache = None

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.sizes[0]:
            raise ValueError(f"expected input of shape (batch, {self.sizes[0]}), got {x.shape}")
        act, _ = _ACTIVATIONS[self.activation]
        pre_acts, posts = [], [x]
        h = x
        for i in range(self.n_layers):
            z = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < self.n_layers - 1:
                pre_acts.append(z)
                h = act(z)
                posts.append(h)
            else:
                h = z
        self._cache = (pre_acts, posts)
        return h

    __call__ = forward

    def backward(self, grad_out: np.ndarray) -> List[np.ndarray]:
        """Parameter gradients for the most recent :meth:`forward` call."""
        if self._cache is None:
            raise RuntimeError("backward() needs a preceding forward()")
        _, dact = _ACTIVATIONS[self.activation]
        pre_acts, posts = self._cache
        grads: List[np.ndarray] = [None] * len(self.params)
        g = np.asarray(grad_out, dtype=np.float64)
        for i in range(self.n_layers - 1, -1, -1):
            h_in = posts[i]
            grads[2 * i] = h_in.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.params[2 * i].T) * dact(pre_acts[i - 1], posts[i])
        return grads


def flatten(arrays: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([a.ravel() for a in arrays])


def unflatten_into(vector: np.ndarray, arrays: Sequence[np.ndarray]):
    offset = 0
    for a in arrays:
        a[...] = vector[offset:offset + a.size].reshape(a.shape)
        offset += a.size


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


class CategoricalPolicy:
    """Discrete actions: the MLP outputs logits."""

    discrete = True

    def __init__(self, obs_dim: int, n_actions: int, hidden=(64, 64), activation="tanh",
                 rng: np.random.Generator | None = None, output_scale: float = 0.01):
        self.n_actions = n_actions
        self.net = Mlp((obs_dim, *hidden, n_actions), activation, rng, output_scale)

    @property
    def params(self) -> List[np.ndarray]:
        return self.net.params

    def distribution(self, obs: np.ndarray) -> np.ndarray:
        """Log-probabilities ``[batch, n_actions]``; caches for :meth:`backward`."""
        return log_softmax(self.net.forward(obs))

    def logprob_entropy(self, obs, actions):
        logp_all = self.distribution(obs)
        probs = np.exp(logp_all)
        actions = np.asarray(actions, dtype=int)
        logp = logp_all[np.arange(actions.size), actions]
        entropy = -(probs * logp_all).sum(axis=1)
        self._head_cache = (probs, logp_all, actions, entropy)
        return logp, entropy

    def backward(self, dlogp: np.ndarray, dentropy: np.ndarray) -> List[np.ndarray]:
        probs, logp_all, actions, entropy = self._head_cache
        onehot = np.zeros_like(probs)
        onehot[np.arange(actions.size), actions] = 1.0
        dlogits = dlogp[:, None] * (onehot - probs)
        dlogits += dentropy[:, None] * (-probs * (logp_all + entropy[:, None]))
        return self.net.backward(dlogits)

    def sample(self, obs: np.ndarray, rngs: Sequence[np.random.Generator], greedy: bool = False):
        """One action per observation row, drawn with that row's generator."""
        logp_all = self.distribution(np.atleast_2d(obs))
        if greedy:
            actions = logp_all.argmax(axis=1)
        else:
            cdf = np.cumsum(np.exp(logp_all), axis=1)
            u = np.array([rng.random() for rng in rngs])
            actions = np.minimum((u[:, None] >= cdf).sum(axis=1), self.n_actions - 1)
        return actions, logp_all[np.arange(actions.size), actions]


class GaussianPolicy:
    """Continuous actions: the MLP outputs means; log-std is a free, state-independent vector."""

    discrete = False

    def __init__(self, obs_dim: int, action_dim: int, hidden=(64, 64), activation="tanh",
                 rng: np.random.Generator | None = None, output_scale: float = 0.01, init_log_std: float = 0.0):
        self.action_dim = action_dim
        self.net = Mlp((obs_dim, *hidden, action_dim), activation, rng, output_scale)
        self.log_std = np.full(action_dim, float(init_log_std))

    @property
    def params(self) -> List[np.ndarray]:
        return self.net.params + [self.log_std]

    def clamped_log_std(self) -> np.ndarray:
        return np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)

    def logprob_entropy(self, obs, actions):
        mean = self.net.forward(obs)
        log_std = self.clamped_log_std()
        std = np.exp(log_std)
        z = (np.asarray(actions, dtype=np.float64) - mean) / std
        logp = (-0.5 * z**2 - log_std - 0.5 * LOG_2PI).sum(axis=1)
        entropy = np.full(mean.shape[0], (log_std + 0.5 * (1.0 + LOG_2PI)).sum())
        self._head_cache = (z, std)
        return logp, entropy

    def backward(self, dlogp: np.ndarray, dentropy: np.ndarray) -> List[np.ndarray]:
        z, std = self._head_cache
        dmean = dlogp[:, None] * z / std
        inside = (self.log_std > LOG_STD_MIN) & (self.log_std < LOG_STD_MAX)
        dlog_std = (dlogp[:, None] * (z**2 - 1.0)).sum(axis=0) + dentropy.sum()
        return self.net.backward(dmean) + [dlog_std * inside]

    def sample(self, obs: np.ndarray, rngs: Sequence[np.random.Generator], greedy: bool = False):
        mean = self.net.forward(np.atleast_2d(obs))
        log_std = self.clamped_log_std()
        if greedy:
            actions = mean
        else:
            noise = np.stack([rng.standard_normal(self.action_dim) for rng in rngs])
            actions = mean + np.exp(log_std) * noise
        z = (actions - mean) / np.exp(log_std)
        logp = (-0.5 * z**2 - log_std - 0.5 * LOG_2PI).sum(axis=1)
        return actions, logp


def sample_action(policy, observation: np.ndarray, rng: np.random.Generator):
    """Draw one action for a single observation; returns ``(action, logprob)``."""
    actions, logp = policy.sample(np.atleast_2d(observation), [rng])
    action = int(actions[0]) if policy.discrete else actions[0]
    return action, float(logp[0])


def action_logprob(policy, observation: np.ndarray, action) -> float:
    actions = [action] if policy.discrete else np.atleast_2d(action)
    logp, _ = policy.logprob_entropy(np.atleast_2d(observation), actions)
    return float(logp[0])


@dataclass
class AdamState:
    learning_rate: float = 2.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def like(cls, params: Sequence[np.ndarray], **kwargs) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **kwargs)


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]):
    """In-place Adam update with bias correction."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer moments must have the same length")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.step
    corr2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
    return params


def gradient_check(loss_fn, params: Sequence[np.ndarray], analytic: Sequence[np.ndarray],
                   h: float = 1e-5, floor: float = 1e-6) -> float:
    """Max elementwise relative error between ``analytic`` and central differences.

    ``loss_fn()`` must read the current contents of ``params``. The relative
    error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    worst = 0.0
    for p, g in zip(params, analytic):
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + h
            up = loss_fn()
            p[idx] = orig - h
            down = loss_fn()
            p[idx] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(g[idx] - numeric) / max(abs(g[idx]), abs(numeric), floor)
            worst = max(worst, err)
    return worst
