"""Rollout storage, rewards-to-go and generalized advantage estimation."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass
class RolloutBatch:
    """N transitions stored column-wise; each T consecutive rows form one episode."""
    states: np.ndarray          # (N, S)
    raw_actions: np.ndarray     # (N, B)
    clipped_actions: np.ndarray  # (N, B)
    rewards: np.ndarray         # (N,)
    dones: np.ndarray           # (N,) float, 1.0 at episode ends
    next_states: np.ndarray     # (N, S)
    behavior_log_density: np.ndarray  # (N,) log of the mixture density at the raw action
    episode_length: int

    def __post_init__(self):
        n = self.rewards.shape[0]
        if n % self.episode_length != 0:
            raise ValueError(f"batch size {n} is not a multiple of episode length {self.episode_length}")
        for name in ("states", "raw_actions", "clipped_actions", "dones", "next_states",
                     "behavior_log_density"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} has {getattr(self, name).shape[0]} rows, expected {n}")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("non-finite reward in batch")

    @property
    def batch_size(self) -> int:
        return self.rewards.shape[0]

    def episode_returns(self) -> np.ndarray:
        return self.rewards.reshape(-1, self.episode_length).sum(axis=1)


@dataclass
class AdvantageBuffer:
    rewards_to_go: np.ndarray
    advantages: np.ndarray
    values: np.ndarray


def gae(rewards, dones, values, next_values, gamma: float, lam: float):
    """Backward recursion for rewards-to-go and GAE advantages.

    ``dones[t] = 1`` cuts both recursions, so nothing leaks across episodes;
    the slot past the last row is zero.
    """
    n = len(rewards)
    rtg = np.zeros(n)
    adv = np.zeros(n)
    next_r = 0.0
    next_a = 0.0
    for t in range(n - 1, -1, -1):
        live = 1.0 - dones[t]
        next_r = rewards[t] + gamma * live * next_r
        delta = rewards[t] + gamma * live * next_values[t] - values[t]
        next_a = delta + gamma * lam * live * next_a
        rtg[t] = next_r
        adv[t] = next_a
    return rtg, adv


def compute_gae(batch: RolloutBatch, value_fn, gamma: float, lam: float) -> AdvantageBuffer:
    """``value_fn`` maps an (n, S) state array to n values."""
    if not (0 < gamma <= 1 and 0 < lam <= 1):
        raise ValueError(f"gamma and lambda must lie in (0, 1], got {gamma}, {lam}")
    values = np.asarray(value_fn(batch.states), dtype=np.float64).reshape(-1)
    next_values = np.asarray(value_fn(batch.next_states), dtype=np.float64).reshape(-1)
    rtg, adv = gae(batch.rewards, batch.dones, values, next_values, gamma, lam)
    return AdvantageBuffer(rtg, adv, values)


def normalize_advantages(buffer: AdvantageBuffer) -> AdvantageBuffer:
    adv = buffer.advantages
    if adv.shape[0] < 2:
        raise ValueError("advantage normalization needs at least two samples")
    scaled = (adv - adv.mean()) / max(adv.std(), 1e-8)
    return replace(buffer, advantages=scaled)
