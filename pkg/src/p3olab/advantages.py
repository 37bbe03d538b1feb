"""Advantage estimators and value targets over collected experience."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class Rollout:
    """Experience from ``n_actors`` segments of ``horizon`` steps each.

    Arrays are flat with length ``n_actors * horizon`` and actor-major order,
    so segment ``i`` occupies ``[i * horizon, (i + 1) * horizon)``.
    ``bootstrap`` holds ``V(s_T)`` for each segment's final next state.
    """

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminated: np.ndarray
    truncated: np.ndarray
    next_obs: np.ndarray
    old_log_probs: np.ndarray
    values: np.ndarray
    next_values: np.ndarray
    old_dist_params: np.ndarray
    bootstrap: np.ndarray
    n_actors: int
    horizon: int
    old_log_std: Optional[np.ndarray] = None
    episode_returns: list = field(default_factory=list)
    partial_returns: list = field(default_factory=list)
    advantages: Optional[np.ndarray] = None
    value_targets: Optional[np.ndarray] = None

    def __post_init__(self):
        n = self.n_actors * self.horizon
        for name in ("obs", "actions", "rewards", "terminated", "truncated", "next_obs",
                     "old_log_probs", "values", "next_values", "old_dist_params"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"Rollout.{name}: length {len(getattr(self, name))} != {n}")
        if len(self.bootstrap) != self.n_actors:
            raise ValueError("Rollout.bootstrap: one value per actor required")

    def __len__(self) -> int:
        return self.n_actors * self.horizon

    @property
    def dones(self) -> np.ndarray:
        return self.terminated | self.truncated

    def segments(self):
        T = self.horizon
        for i in range(self.n_actors):
            yield i, slice(i * T, (i + 1) * T)


def _check_lengths(op: str, *arrays):
    n = len(arrays[0])
    for a in arrays[1:]:
        if len(a) != n:
            raise ValueError(f"{op}: length mismatch ({n} vs {len(a)})")
    if n == 0:
        raise ValueError(f"{op}: empty segment")


def nstep_advantage(rewards, values, bootstrap: float, gamma: float, dones=None) -> np.ndarray:
    """Discounted reward sum to the segment end plus a discounted bootstrap, minus ``V(s_t)``.

    Without ``dones`` the segment must be terminal-free.  With ``dones`` the
    segment is split after every terminal step, and those pieces bootstrap
    with 0.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    T = len(rewards)
    dones = np.zeros(T, dtype=bool) if dones is None else np.asarray(dones, dtype=bool)
    _check_lengths("nstep_advantage", rewards, values, dones)
    adv = np.empty(T)
    start = 0
    ends = list(np.flatnonzero(dones))
    if not ends or ends[-1] != T - 1:
        ends.append(T - 1)
    for end in ends:
        L = end - start + 1
        k = np.arange(L)
        powers = np.triu(gamma ** np.maximum(k[None, :] - k[:, None], 0))
        tail = 0.0 if dones[end] else bootstrap
        adv[start:end + 1] = (powers @ rewards[start:end + 1]
                              + gamma ** (L - k) * tail - values[start:end + 1])
        start = end + 1
    return adv


def gae(rewards, values, dones, bootstrap: float, gamma: float, lambda_gae: float) -> np.ndarray:
    """Generalized advantage estimate for one segment.

    ``dones[t]`` marks the end of an episode at step ``t``; the next value
    is then taken as 0 and the recursion restarts.
    """
    if not (0.0 <= gamma <= 1.0 and 0.0 <= lambda_gae <= 1.0):
        raise ValueError("gae: gamma and lambda_gae must lie in [0, 1]")
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    _check_lengths("gae", rewards, values, dones)
    T = len(rewards)
    adv = np.empty(T)
    next_value = bootstrap
    running = 0.0
    for t in range(T - 1, -1, -1):
        live = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * live * next_value - values[t]
        running = delta + gamma * lambda_gae * live * running
        adv[t] = running
        next_value = values[t]
    return adv


def td0_target(reward, next_value, gamma_v: float, done=False):
    """One-step bootstrapped target ``r + gamma_v * V(s')``; no bootstrap at terminals."""
    reward = np.asarray(reward, dtype=np.float64)
    live = 1.0 - np.asarray(done, dtype=np.float64)
    out = reward + gamma_v * live * np.asarray(next_value, dtype=np.float64)
    return float(out) if out.ndim == 0 else out


def normalize(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + eps)


def compute_advantages(rollout: Rollout, gamma: float = 0.99, lambda_gae: float = 0.95,
                       estimator: str = "gae", normalize_adv: bool = True) -> Rollout:
    """Fill ``rollout.advantages`` and ``rollout.value_targets`` in place.

    Truncated steps fold ``gamma * V(s')`` into their reward and are then
    treated as episode ends, which reproduces bootstrapping through a time
    limit.  Value targets are the unnormalized advantages plus values.
    """
    if rollout.advantages is not None:
        raise ValueError("compute_advantages: advantages already computed for this rollout")
    rewards = rollout.rewards + gamma * rollout.truncated * rollout.next_values
    dones = rollout.dones
    adv = np.empty(len(rollout))
    for i, seg in rollout.segments():
        if estimator == "gae":
            adv[seg] = gae(rewards[seg], rollout.values[seg], dones[seg], rollout.bootstrap[i],
                           gamma, lambda_gae)
        elif estimator == "nstep":
            adv[seg] = nstep_advantage(rewards[seg], rollout.values[seg], rollout.bootstrap[i],
                                       gamma, dones=dones[seg])
        else:
            raise ValueError(f"unknown advantage estimator {estimator!r}")
    rollout.value_targets = adv + rollout.values
    rollout.advantages = normalize(adv) if normalize_adv else adv
    return rollout
