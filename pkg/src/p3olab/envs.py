"""Desk-scale environments and an exact tabular solver.

Three tasks are available by name through :func:`make_env`:

``chain``
    A tabular chain. States ``0 .. n-2`` are live, state ``n-1`` is terminal.
    Action 1 (RIGHT) moves one state right; action 0 (LEFT) moves one state
    left (or back to state 0 when ``left_resets``).  Entering the terminal
    state pays 1, everything else pays 0.  Observations are one-hot over the
    live states.  Episodes are capped at ``max_steps``.

``pole``
    Cart-pole balancing with the classic constants: gravity 9.8, cart mass
    1.0, pole mass 0.1, pole half-length 0.5, push force +-10, explicit Euler
    with dt 0.02.  Reward 1 per step, failure when ``|x| > 2.4`` or
    ``|theta| > 12 deg``, capped at 500 steps.  Initial state components are
    drawn uniformly from ``[-0.05, 0.05]``.

``pointmass``
    A 2-D double integrator steered towards the origin.  With force ``u``
    clamped to ``[-1, 1]^2``::

        pos' = pos + dt * vel
        vel' = friction * vel + dt * u

    with ``dt = 0.1`` and ``friction = 0.9``.  Reward is ``-|pos|`` before the
    move, capped at 200 steps.  Start position uniform in ``[-1, 1]^2``, zero
    velocity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np


class EnvError(Exception):
    pass


@dataclass(frozen=True)
class EnvState:
    observation: np.ndarray
    step_count: int = 0
    done: bool = False
    # episode hit the step cap rather than a terminal state
    truncated: bool = False


@dataclass
class TabularMDP:
    """Finite MDP with ``transition[s, a, s']`` and ``reward[s, a]``."""

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    terminal: np.ndarray
    start_state: int = 0

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        self.terminal = np.asarray(self.terminal, dtype=bool)
        S, A, S2 = self.transition.shape
        if S != S2 or self.reward.shape != (S, A) or self.terminal.shape != (S,):
            raise ValueError("TabularMDP: inconsistent table shapes")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"TabularMDP: gamma={self.gamma} not in (0, 1)")
        if np.abs(self.transition.sum(axis=2) - 1.0).max() > 1e-12:
            raise ValueError("TabularMDP: transition rows must sum to 1")
        for s in np.flatnonzero(self.terminal):
            if not (np.all(self.transition[s, :, s] == 1.0) and np.all(self.reward[s] == 0.0)):
                raise ValueError(f"TabularMDP: terminal state {s} must self-loop with reward 0")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


LEFT, RIGHT = 0, 1


def chain_mdp(n_states: int = 5, gamma: float = 0.99, left_resets: bool = False,
              slip: float = 0.0) -> TabularMDP:
    """Chain with ``n_states - 1`` live states and one terminal state.

    ``slip`` is the probability that the chosen action is swapped for the
    other one.
    """
    if n_states < 2:
        raise ValueError("chain needs at least 2 states")
    if not 0.0 <= slip <= 1.0:
        raise ValueError("slip must be in [0, 1]")
    S, A = n_states, 2
    term = S - 1
    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    moves = np.zeros((S, A), dtype=int)
    for s in range(term):
        moves[s, RIGHT] = s + 1
        moves[s, LEFT] = 0 if left_resets else max(s - 1, 0)
    for s in range(term):
        for a in range(A):
            for actual, prob in ((a, 1.0 - slip), (1 - a, slip)):
                if prob == 0.0:
                    continue
                nxt = moves[s, actual]
                P[s, a, nxt] += prob
                R[s, a] += prob * (1.0 if nxt == term else 0.0)
    P[term, :, term] = 1.0
    terminal = np.zeros(S, dtype=bool)
    terminal[term] = True
    return TabularMDP(P, R, gamma, terminal)


@dataclass
class ExactSolution:
    V: np.ndarray
    Q: np.ndarray
    A: np.ndarray
    iterations: int = 0


def _check_policy(mdp: TabularMDP, policy: np.ndarray) -> np.ndarray:
    policy = np.asarray(policy, dtype=np.float64)
    if policy.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy shape {policy.shape} != {(mdp.n_states, mdp.n_actions)}")
    if (policy < 0).any() or np.abs(policy.sum(axis=1) - 1.0).max() > 1e-10:
        raise ValueError("policy rows must be probability vectors")
    return policy


def bellman_backup(mdp: TabularMDP, policy: np.ndarray, V: np.ndarray) -> np.ndarray:
    Q = mdp.reward + mdp.gamma * mdp.transition @ V
    Q[mdp.terminal] = 0.0
    return (policy * Q).sum(axis=1)


def exact_solve(mdp: TabularMDP, policy, tol: float = 1e-13, max_iter: int = 1_000_000) -> ExactSolution:
    """Evaluate ``policy`` exactly.

    A direct linear solve seeds value iteration, which then runs until
    successive backups differ by less than ``tol`` in sup-norm.
    """
    policy = _check_policy(mdp, policy)
    S = mdp.n_states
    P_pi = np.einsum("sa,sat->st", policy, mdp.transition)
    r_pi = (policy * mdp.reward).sum(axis=1)
    live = ~mdp.terminal
    P_pi[mdp.terminal] = 0.0
    r_pi[mdp.terminal] = 0.0
    V = np.linalg.solve(np.eye(S) - mdp.gamma * P_pi, r_pi)
    V[~live] = 0.0
    it = 0
    while it < max_iter:
        nxt = bellman_backup(mdp, policy, V)
        it += 1
        delta = np.abs(nxt - V).max()
        V = nxt
        if delta < tol:
            break
    Q = mdp.reward + mdp.gamma * mdp.transition @ V
    Q[mdp.terminal] = 0.0
    return ExactSolution(V=V, Q=Q, A=Q - V[:, None], iterations=it)


def optimal_values(mdp: TabularMDP, tol: float = 1e-12) -> np.ndarray:
    V = np.zeros(mdp.n_states)
    while True:
        Q = mdp.reward + mdp.gamma * mdp.transition @ V
        Q[mdp.terminal] = 0.0
        nxt = Q.max(axis=1)
        if np.abs(nxt - V).max() < tol:
            return nxt
        V = nxt


class Env:
    """Common stepping contract: ``reset(seed)`` then ``step(action)``."""

    name = "env"
    obs_dim: int
    discrete: bool
    n_actions: int = 0
    action_dim: int = 0
    max_steps: int

    def __init__(self):
        self.state: Optional[EnvState] = None
        self.rng: Optional[np.random.Generator] = None

    def reset(self, seed: Optional[int] = None) -> EnvState:
        if seed is not None or self.rng is None:
            self.rng = np.random.default_rng(seed)
        self._reset_internal()
        self.state = EnvState(self._observe(), 0, False)
        return self.state

    def step(self, action):
        if self.state is None:
            raise EnvError(f"{self.name}: step before reset")
        if self.state.done:
            raise EnvError(f"{self.name}: step after episode end")
        action = self._check_action(action)
        reward, terminated = self._advance(action)
        count = self.state.step_count + 1
        truncated = not terminated and count >= self.max_steps
        done = terminated or truncated
        self.state = EnvState(self._observe(), count, done, truncated)
        return self.state, float(reward), done

    def _check_action(self, action):
        if self.discrete:
            a = int(action)
            if a != action or not 0 <= a < self.n_actions:
                raise EnvError(f"{self.name}: action {action!r} outside 0..{self.n_actions - 1}")
            return a
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape != (self.action_dim,) or not np.isfinite(a).all():
            raise EnvError(f"{self.name}: action must be a finite vector of length {self.action_dim}")
        return a

    def _reset_internal(self):
        raise NotImplementedError

    def _observe(self) -> np.ndarray:
        raise NotImplementedError

    def _advance(self, action):
        raise NotImplementedError


class ChainEnv(Env):
    name = "chain"
    discrete = True

    def __init__(self, n_states: int = 5, gamma: float = 0.99, left_resets: bool = False,
                 slip: float = 0.0, max_steps: int = 100):
        super().__init__()
        self.mdp = chain_mdp(n_states, gamma, left_resets, slip)
        self.n_actions = self.mdp.n_actions
        self.obs_dim = n_states - 1
        self.max_steps = max_steps
        self.s = 0

    def _reset_internal(self):
        self.s = self.mdp.start_state

    def _observe(self):
        obs = np.zeros(self.obs_dim)
        if self.s < self.obs_dim:
            obs[self.s] = 1.0
        return obs

    def _advance(self, action):
        row = self.mdp.transition[self.s, action]
        if np.count_nonzero(row) == 1:
            nxt = int(np.argmax(row))
        else:
            nxt = int(self.rng.choice(self.mdp.n_states, p=row))
        reward = 1.0 if self.mdp.terminal[nxt] else 0.0
        self.s = nxt
        return reward, bool(self.mdp.terminal[nxt])


class PoleEnv(Env):
    name = "pole"
    discrete = True
    n_actions = 2
    obs_dim = 4

    gravity = 9.8
    mass_cart = 1.0
    mass_pole = 0.1
    half_length = 0.5
    force_mag = 10.0
    dt = 0.02
    x_limit = 2.4
    theta_limit = 12 * 2 * math.pi / 360

    def __init__(self, max_steps: int = 500):
        super().__init__()
        self.max_steps = max_steps
        self.x = self.x_dot = self.theta = self.theta_dot = 0.0

    def _reset_internal(self):
        self.x, self.x_dot, self.theta, self.theta_dot = (float(v) for v in self.rng.uniform(-0.05, 0.05, 4))

    def _observe(self):
        return np.array([self.x, self.x_dot, self.theta, self.theta_dot])

    def _advance(self, action):
        force = self.force_mag if action == 1 else -self.force_mag
        cos, sin = math.cos(self.theta), math.sin(self.theta)
        total = self.mass_cart + self.mass_pole
        pml = self.mass_pole * self.half_length
        temp = (force + pml * self.theta_dot ** 2 * sin) / total
        theta_acc = (self.gravity * sin - cos * temp) / (
            self.half_length * (4.0 / 3.0 - self.mass_pole * cos ** 2 / total))
        x_acc = temp - pml * theta_acc * cos / total
        self.x += self.dt * self.x_dot
        self.x_dot += self.dt * x_acc
        self.theta += self.dt * self.theta_dot
        self.theta_dot += self.dt * theta_acc
        failed = abs(self.x) > self.x_limit or abs(self.theta) > self.theta_limit
        return 1.0, failed


class PointMassEnv(Env):
    name = "pointmass"
    discrete = False
    action_dim = 2
    obs_dim = 4

    dt = 0.1
    friction = 0.9

    def __init__(self, max_steps: int = 200):
        super().__init__()
        self.max_steps = max_steps
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)

    def _reset_internal(self):
        self.pos = self.rng.uniform(-1.0, 1.0, 2)
        self.vel = np.zeros(2)

    def _observe(self):
        return np.concatenate([self.pos, self.vel])

    def _advance(self, action):
        force = np.clip(action, -1.0, 1.0)
        reward = -float(np.hypot(*self.pos))
        self.pos = self.pos + self.dt * self.vel
        self.vel = self.friction * self.vel + self.dt * force
        return reward, False


ENVIRONMENTS = {"chain": ChainEnv, "pole": PoleEnv, "pointmass": PointMassEnv}


def make_env(name: str, **kwargs) -> Env:
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    return cls(**kwargs)
