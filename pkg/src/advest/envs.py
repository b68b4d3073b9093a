"""Small deterministic environments used in place of MuJoCo and microRTS.

* :class:`ChainEnv` wraps a :class:`~advest.oracle.TabularMDP` so the trainer
  can be checked against exact dynamic programming.
* :class:`SparseGrid` is a 12x12 grid with one rewarding goal and a long
  horizon: sparse reward, long episodes.
* :class:`CartPoleLike` is the classic inverted pendulum with continuous
  observations and +1 reward per step.

Every environment owns a ``numpy`` Generator. ``reset(seed)`` reseeds it;
``reset()`` keeps drawing from the current stream, so a run of episodes is
reproducible from the first seed alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from advest.oracle import TabularMDP


@dataclass(frozen=True)
class Discrete:
    n: int

    def contains(self, action) -> bool:
        return isinstance(action, (int, np.integer)) and 0 <= int(action) < self.n


@dataclass(frozen=True)
class Continuous:
    dim: int
    low: float = -1.0
    high: float = 1.0

    def contains(self, action) -> bool:
        a = np.asarray(action, dtype=np.float64)
        return a.shape == (self.dim,) and bool(np.all(np.isfinite(a))) and bool(np.all((a >= self.low) & (a <= self.high)))


ActionSpace = Union[Discrete, Continuous]


@dataclass(frozen=True)
class EnvSpec:
    observation_dim: int
    action_space: ActionSpace
    max_episode_steps: int

    def __post_init__(self):
        if self.observation_dim < 1 or self.max_episode_steps < 1:
            raise ValueError("observation_dim and max_episode_steps must be >= 1")


class InvalidAction(ValueError):
    pass


class Env:
    spec: EnvSpec

    def __init__(self, seed: int | None = None):
        self.rng = np.random.default_rng(seed)
        self.steps = 0
        self.done = True
        self.success = False

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.steps = 0
        self.done = False
        self.success = False
        self._reset()
        return self._observe()

    def step(self, action):
        if self.done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        if not self.spec.action_space.contains(action):
            raise InvalidAction(f"action {action!r} not in {self.spec.action_space}")
        reward, terminal = self._step(action)
        self.steps += 1
        self.done = terminal or self.steps >= self.spec.max_episode_steps
        return self._observe(), float(reward), self.done

    def _reset(self):
        raise NotImplementedError

    def _step(self, action):
        raise NotImplementedError

    def _observe(self) -> np.ndarray:
        raise NotImplementedError


class ChainEnv(Env):
    """Samples a TabularMDP; observation is the one-hot of the current state.

    ``success`` means the episode reached a terminal state before the step limit.
    """

    def __init__(self, mdp: TabularMDP, max_episode_steps: int = 1000, seed: int | None = None):
        super().__init__(seed)
        self.mdp = mdp
        self.spec = EnvSpec(mdp.n_states, Discrete(mdp.n_actions), max_episode_steps)
        self._cdf = np.cumsum(mdp.transition, axis=2)
        self._init_cdf = np.cumsum(mdp.initial_distribution)
        self.state = 0

    def _draw(self, cdf) -> int:
        return min(int(np.searchsorted(cdf, self.rng.random(), side="right")), cdf.size - 1)

    def _reset(self):
        self.state = self._draw(self._init_cdf)

    def _step(self, action):
        s, a = self.state, int(action)
        reward = self.mdp.reward[s, a]
        self.state = self._draw(self._cdf[s, a])
        terminal = self.state in self.mdp.terminal_states
        self.success = terminal
        return reward, terminal

    def _observe(self):
        obs = np.zeros(self.mdp.n_states)
        obs[self.state] = 1.0
        return obs


class SparseGrid(Env):
    """12x12 grid, start in one corner, reward 1 only on reaching the opposite corner.

    Actions: 0 up, 1 right, 2 down, 3 left; moves into walls leave the agent
    in place. Deterministic dynamics.
    """

    MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))

    def __init__(self, size: int = 12, max_episode_steps: int = 400, seed: int | None = None):
        super().__init__(seed)
        self.size = size
        self.start = (0, 0)
        self.goal = (size - 1, size - 1)
        self.spec = EnvSpec(size * size, Discrete(4), max_episode_steps)
        self.pos = self.start

    def _reset(self):
        self.pos = self.start

    def _step(self, action):
        dr, dc = self.MOVES[int(action)]
        r = min(max(self.pos[0] + dr, 0), self.size - 1)
        c = min(max(self.pos[1] + dc, 0), self.size - 1)
        self.pos = (r, c)
        if self.pos == self.goal:
            self.success = True
            return 1.0, True
        return 0.0, False

    def _observe(self):
        obs = np.zeros(self.size * self.size)
        obs[self.pos[0] * self.size + self.pos[1]] = 1.0
        return obs


class CartPoleLike(Env):
    """Cart-pole balancing with explicit Euler integration.

    State ``(x, x_dot, theta, theta_dot)``. Constants: gravity 9.8, cart mass
    1.0, pole mass 0.1, pole half-length 0.5, push force 10, time step 0.02,
    failure at ``|theta| > 12 deg`` or ``|x| > 2.4``. Reward +1 per step,
    horizon 500. ``success`` means the pole was still up at the horizon.
    """

    GRAVITY = 9.8
    MASS_CART = 1.0
    MASS_POLE = 0.1
    HALF_LENGTH = 0.5
    FORCE = 10.0
    TAU = 0.02
    THETA_LIMIT = 12 * 2 * math.pi / 360
    X_LIMIT = 2.4
    RESET_RANGE = 0.05

    def __init__(self, max_episode_steps: int = 500, seed: int | None = None):
        super().__init__(seed)
        self.spec = EnvSpec(4, Discrete(2), max_episode_steps)
        self.state = np.zeros(4)

    def _reset(self):
        self.state = self.rng.uniform(-self.RESET_RANGE, self.RESET_RANGE, size=4)

    def _step(self, action):
        x, x_dot, theta, theta_dot = self.state
        force = self.FORCE if int(action) == 1 else -self.FORCE
        total_mass = self.MASS_CART + self.MASS_POLE
        pole_moment = self.MASS_POLE * self.HALF_LENGTH
        cos, sin = math.cos(theta), math.sin(theta)
        temp = (force + pole_moment * theta_dot**2 * sin) / total_mass
        theta_acc = (self.GRAVITY * sin - cos * temp) / (
            self.HALF_LENGTH * (4.0 / 3.0 - self.MASS_POLE * cos**2 / total_mass)
        )
        x_acc = temp - pole_moment * theta_acc * cos / total_mass
        x += self.TAU * x_dot
        x_dot += self.TAU * x_acc
        theta += self.TAU * theta_dot
        theta_dot += self.TAU * theta_acc
        self.state = np.array([x, x_dot, theta, theta_dot])
        failed = abs(x) > self.X_LIMIT or abs(theta) > self.THETA_LIMIT
        self.success = not failed and self.steps + 1 >= self.spec.max_episode_steps
        return 1.0, failed

    def _observe(self):
        return self.state.copy()


ENVIRONMENTS = {
    "cartpole": CartPoleLike,
    "sparsegrid": SparseGrid,
}


def make_env(name: str, **kwargs) -> Env:
    """Build an environment by registry name.

    ``chain`` is :func:`~advest.oracle.goal_chain` and ``studychain`` is
    :func:`~advest.oracle.study_chain`, both wrapped in :class:`ChainEnv`
    unless an explicit ``mdp`` is passed.
    """
    if name in ("chain", "studychain"):
        from advest.oracle import goal_chain, study_chain

        mdp = kwargs.pop("mdp", None) or (goal_chain() if name == "chain" else study_chain())
        return ChainEnv(mdp, **kwargs)
    try:
        return ENVIRONMENTS[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from chain, studychain, {', '.join(ENVIRONMENTS)}") from None
