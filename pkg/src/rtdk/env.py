"""Bayesian-optimization episode mechanics.

A trajectory is the MDP state: the ordered (point, value) pairs observed so
far under one objective variant. Episodes start from uniform random init
samples, rewards are clamped log-regrets, and completed trajectories go into
a replay buffer keyed by variant so replay never mixes objectives.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    DomainViolationError,
    EmptyBufferError,
    InvalidStoreError,
)
from .objectives import ObjectiveVariant


@dataclass
class Trajectory:
    """Ordered (x, y) observations under a single objective variant."""

    variant_id: str
    steps: list = field(default_factory=list)
    complete: bool = False

    def __len__(self) -> int:
        return len(self.steps)

    def append(self, x: np.ndarray, y: float) -> None:
        self.steps.append((np.asarray(x, dtype=np.float64), float(y)))

    def xs(self) -> np.ndarray:
        return np.array([x for x, _ in self.steps], dtype=np.float64)

    def ys(self) -> np.ndarray:
        return np.array([y for _, y in self.steps], dtype=np.float64)

    @property
    def best_y(self) -> float:
        return max(y for _, y in self.steps)

    def prefix(self, length: int) -> "Trajectory":
        """View of the first `length` steps (shares the underlying pairs)."""
        return Trajectory(variant_id=self.variant_id,
                          steps=self.steps[:length], complete=False)

    def to_json(self) -> str:
        return json.dumps({
            "variant_id": self.variant_id,
            "complete": self.complete,
            "steps": [[list(map(float, x)), float(y)] for x, y in self.steps],
        })

    @classmethod
    def from_json(cls, payload: str) -> "Trajectory":
        data = json.loads(payload)
        traj = cls(variant_id=data["variant_id"], complete=data["complete"])
        for x, y in data["steps"]:
            traj.append(np.asarray(x, dtype=np.float64), y)
        return traj


@dataclass(frozen=True)
class EnvironmentConfig:
    """Episode budget and exploration settings.

    `t_max` is the total sample budget of one trajectory (init samples
    included); `subtrajectory_length` additionally ends the episode after
    that many agent queries. The harness sets t_max = subtrajectory_length so
    each (sub-)trajectory holds exactly that many samples in total.
    """

    t_max: int = 50
    subtrajectory_length: int = 50
    n_init: int = 5
    epsilon_clamp: float = 1e-8
    exploration_p0: float = 0.5

    def __post_init__(self):
        if self.n_init < 1:
            raise ConfigError("n_init must be >= 1")
        if self.subtrajectory_length < self.n_init:
            raise ConfigError("subtrajectory_length must be >= n_init")
        if self.epsilon_clamp <= 0:
            raise ConfigError("epsilon_clamp must be positive")
        if not 0.0 <= self.exploration_p0 <= 1.0:
            raise ConfigError("exploration_p0 must be in [0, 1]")


class ReplayBuffer:
    """Completed trajectories grouped per variant, oldest evicted first."""

    def __init__(self, capacity_per_variant: int = 64):
        if capacity_per_variant < 1:
            raise ConfigError("capacity must be >= 1")
        self.capacity_per_variant = capacity_per_variant
        self._store: dict[str, deque] = {}

    def store(self, traj: Trajectory) -> None:
        if not traj.complete:
            raise InvalidStoreError("only complete trajectories can be stored")
        queue = self._store.setdefault(
            traj.variant_id, deque(maxlen=self.capacity_per_variant))
        queue.append(traj)

    def counts(self) -> dict[str, int]:
        return {vid: len(q) for vid, q in self._store.items()}

    def __len__(self) -> int:
        return sum(len(q) for q in self._store.values())

    def sample(self, rng: np.random.Generator) -> Trajectory:
        """Uniform over variants, then uniform within the chosen variant."""
        if not self._store:
            raise EmptyBufferError("replay buffer is empty")
        variants = sorted(self._store)
        vid = variants[int(rng.integers(len(variants)))]
        queue = self._store[vid]
        return queue[int(rng.integers(len(queue)))]


def _random_domain_point(variant: ObjectiveVariant, rng: np.random.Generator):
    if variant.is_discrete:
        return variant.candidates[int(rng.integers(len(variant.candidates)))]
    return variant.bounds.sample(rng)


def reset_episode(variant: ObjectiveVariant, config: EnvironmentConfig,
                  rng: np.random.Generator) -> Trajectory:
    """Fresh trajectory seeded with n_init uniform random evaluated points."""
    traj = Trajectory(variant_id=variant.variant_id)
    if variant.is_discrete and len(variant.candidates) >= config.n_init:
        idx = rng.choice(len(variant.candidates), size=config.n_init, replace=False)
        points = variant.candidates[idx]
    else:
        points = [_random_domain_point(variant, rng) for _ in range(config.n_init)]
    for x in points:
        traj.append(x, variant.value(x))
    return traj


def _in_domain(variant: ObjectiveVariant, action: np.ndarray) -> bool:
    if variant.is_discrete:
        return any(np.array_equal(action, c) for c in variant.candidates)
    return variant.bounds.contains(action)


def step(traj: Trajectory, action, variant: ObjectiveVariant,
         config: EnvironmentConfig) -> tuple[float, bool]:
    """Evaluate the action, append it, and return (reward, done).

    Reward is -ln(max(f_star - y, epsilon_clamp)); hitting or exceeding the
    estimated optimum saturates at -ln(epsilon_clamp).
    """
    if traj.complete:
        raise InvalidStoreError("trajectory is already complete")
    action = np.asarray(action, dtype=np.float64)
    if not _in_domain(variant, action):
        raise DomainViolationError(f"action {action} outside the domain")
    y = variant.value(action)
    traj.append(action, y)
    reward = float(-np.log(max(variant.f_star - y, config.epsilon_clamp)))
    done = (len(traj) - config.n_init >= config.subtrajectory_length
            or len(traj) >= config.t_max)
    if done:
        traj.complete = True
    return reward, done


def exploration_mix(proposed_action, step_index: int, config: EnvironmentConfig,
                    variant: ObjectiveVariant, rng: np.random.Generator):
    """Replace the action with a uniform domain point with probability
    p0 * max(0, 1 - step/L); zero from the second sub-trajectory onward."""
    if step_index < 0:
        raise ConfigError("step_index must be >= 0")
    p = config.exploration_p0 * max(0.0, 1.0 - step_index / config.subtrajectory_length)
    if p > 0.0 and rng.random() < p:
        return _random_domain_point(variant, rng)
    return proposed_action


@dataclass(frozen=True)
class Transition:
    """One off-policy SAC transition derived from a stored trajectory."""

    state: Trajectory
    action: np.ndarray
    reward: float
    next_state: Trajectory
    done: bool


def sample_transition(traj: Trajectory, n_init: int, reward_fn,
                      rng: np.random.Generator) -> Transition:
    """Uniformly pick one agent decision from `traj` and rebuild its
    transition: state = prefix before the decision, next state = prefix
    after. `reward_fn(variant_id, y)` recomputes the clamped log-regret."""
    if len(traj) <= n_init:
        raise InvalidStoreError("trajectory contains no agent decisions")
    k = int(rng.integers(n_init, len(traj)))
    x, y = traj.steps[k]
    return Transition(state=traj.prefix(k), action=x,
                      reward=reward_fn(traj.variant_id, y),
                      next_state=traj.prefix(k + 1),
                      done=k + 1 == len(traj))
