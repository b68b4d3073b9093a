"""Fixed-length rollout segments and partial-GAE keep/carry bookkeeping."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np


class BufferError(RuntimeError):
    """Misuse of a rollout buffer; always a harness bug, never a data condition."""


@dataclass
class Transition:
    observation: np.ndarray
    action: int | np.ndarray
    reward: float
    done: bool
    value_pred: float
    behavior_logprob: float

    def __post_init__(self):
        if not (np.isfinite(self.value_pred) and np.isfinite(self.behavior_logprob)):
            raise ValueError("value_pred and behavior_logprob must be finite")

    def copy(self) -> "Transition":
        action = self.action.copy() if isinstance(self.action, np.ndarray) else self.action
        return dataclasses.replace(self, observation=np.array(self.observation, copy=True), action=action)


@dataclass
class Segment:
    transitions: List[Transition]
    carried_count: int
    actor_id: int
    bootstrap_value: float = 0.0

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def terminal(self) -> bool:
        return bool(self.transitions[-1].done)

    @property
    def observations(self) -> np.ndarray:
        return np.stack([tr.observation for tr in self.transitions])

    @property
    def actions(self) -> np.ndarray:
        return np.array([tr.action for tr in self.transitions])

    @property
    def rewards(self) -> np.ndarray:
        return np.array([tr.reward for tr in self.transitions], dtype=np.float64)

    @property
    def dones(self) -> np.ndarray:
        return np.array([tr.done for tr in self.transitions], dtype=bool)

    @property
    def value_preds(self) -> np.ndarray:
        return np.array([tr.value_pred for tr in self.transitions], dtype=np.float64)

    @property
    def behavior_logprobs(self) -> np.ndarray:
        return np.array([tr.behavior_logprob for tr in self.transitions], dtype=np.float64)


@dataclass
class AdvantageBatch:
    advantages: np.ndarray
    value_targets: np.ndarray
    keep_mask: np.ndarray
    t_index: np.ndarray  # 1-based position inside the source segment

    def __post_init__(self):
        n = len(self.advantages)
        if not (len(self.value_targets) == len(self.keep_mask) == len(self.t_index) == n):
            raise ValueError("AdvantageBatch fields must be aligned")

    @classmethod
    def concatenate(cls, batches: Sequence["AdvantageBatch"]) -> "AdvantageBatch":
        return cls(
            advantages=np.concatenate([b.advantages for b in batches]),
            value_targets=np.concatenate([b.value_targets for b in batches]),
            keep_mask=np.concatenate([b.keep_mask for b in batches]),
            t_index=np.concatenate([b.t_index for b in batches]),
        )


def check_partial_coef(partial_coef: int, sample_length: int):
    if not 1 <= partial_coef <= sample_length:
        raise ValueError(
            f"partial coefficient epsilon={partial_coef} must satisfy 1 <= epsilon <= T={sample_length}"
        )


def keep_cutoff(dones: np.ndarray, partial_coef: int) -> int:
    """Number of leading steps of a segment that are trained on.

    Everything up to the last terminal step is a complete episode and is
    always kept; only the trailing unfinished chunk is cut at ``partial_coef``.
    """
    size = dones.size
    check_partial_coef(partial_coef, size)
    if dones[-1]:
        return size
    finished = np.flatnonzero(dones)
    last_done = int(finished[-1]) + 1 if finished.size else 0
    return max(partial_coef, last_done)


def split_partial(segment: Segment, partial_coef: int):
    """Return ``(keep_mask, carry_tail)`` for one segment.

    ``carry_tail`` holds copies of the discarded transitions, in order, ready to
    seed the actor's next segment.
    """
    cutoff = keep_cutoff(segment.dones, partial_coef)
    keep_mask = np.zeros(len(segment), dtype=bool)
    keep_mask[:cutoff] = True
    carry_tail = [tr.copy() for tr in segment.transitions[cutoff:]]
    return keep_mask, carry_tail


@dataclass
class RolloutBuffer:
    """One in-progress segment per actor, each filled to exactly ``sample_length``."""

    n_actors: int
    sample_length: int
    _pending: List[List[Transition]] = field(init=False, repr=False)
    _carried: List[int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_actors < 1 or self.sample_length < 1:
            raise ValueError("need at least one actor and sample_length >= 1")
        self._pending = [[] for _ in range(self.n_actors)]
        self._carried = [0] * self.n_actors

    def _check_actor(self, actor_id: int):
        if not 0 <= actor_id < self.n_actors:
            raise BufferError(f"actor_id {actor_id} outside [0, {self.n_actors})")

    def __len__(self):
        return sum(len(p) for p in self._pending)

    def filled(self, actor_id: int) -> int:
        self._check_actor(actor_id)
        return len(self._pending[actor_id])

    def carried_count(self, actor_id: int) -> int:
        self._check_actor(actor_id)
        return self._carried[actor_id]

    def is_full(self, actor_id: int) -> bool:
        return self.filled(actor_id) == self.sample_length

    def pending(self, actor_id: int) -> List[Transition]:
        self._check_actor(actor_id)
        return self._pending[actor_id]

    def push(self, actor_id: int, transition: Transition):
        self._check_actor(actor_id)
        if len(self._pending[actor_id]) >= self.sample_length:
            raise BufferError(
                f"actor {actor_id} already holds {self.sample_length} transitions; finalize before pushing"
            )
        self._pending[actor_id].append(transition)

    def finalize(self, actor_id: int, bootstrap_value: float = 0.0) -> Segment:
        self._check_actor(actor_id)
        steps = self._pending[actor_id]
        if len(steps) != self.sample_length:
            raise BufferError(
                f"actor {actor_id} segment has {len(steps)} of {self.sample_length} transitions"
            )
        if steps[-1].done:
            bootstrap_value = 0.0
        segment = Segment(steps, self._carried[actor_id], actor_id, float(bootstrap_value))
        self._pending[actor_id] = []
        self._carried[actor_id] = 0
        return segment

    def carryover(self, actor_id: int, carry_tail: Sequence[Transition]):
        self._check_actor(actor_id)
        if self._pending[actor_id]:
            raise BufferError(f"actor {actor_id} has an in-progress segment; cannot carry over")
        if len(carry_tail) >= self.sample_length:
            raise BufferError("carry tail must be shorter than the segment length")
        self._pending[actor_id] = [tr.copy() for tr in carry_tail]
        self._carried[actor_id] = len(carry_tail)

    def set_value_preds(self, actor_id: int, values: Sequence[float]):
        """Overwrite value_pred on the leading (carried) transitions of an actor."""
        steps = self.pending(actor_id)
        if len(values) > len(steps):
            raise BufferError("more values than pending transitions")
        for tr, v in zip(steps, values):
            tr.value_pred = float(v)

    def state_dict(self) -> dict:
        return {"pending": [[tr.copy() for tr in p] for p in self._pending], "carried": list(self._carried)}

    def load_state_dict(self, state: dict):
        self._pending = [[tr.copy() for tr in p] for p in state["pending"]]
        self._carried = list(state["carried"])
