"""Rollout collection and the epoch/minibatch update loop."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .advantages import Rollout, compute_advantages, td0_target
from .envs import Env, make_env
from .objectives import ObjectiveConfig, deon, p3o_loss
from .policies import Categorical, DiagGaussian, Policy, ValueNet

# per-env presets; continuous follows the MuJoCo column, discrete the Atari column
CONTINUOUS_DEFAULTS = dict(
    horizon=2048, n_actors=1, epochs=10, minibatch_size=64, lr_policy=1e-4, lr_value=1e-4,
    schedule="fixed", beta_kl=1.0, entropy_coef=0.0,
)
DISCRETE_DEFAULTS = dict(
    horizon=256, n_actors=8, epochs=4, minibatch_size=512, lr_policy=2.5e-4, lr_value=2.5e-4,
    schedule="linear_decay", beta_kl=0.1, entropy_coef=0.01,
)


class TrainingError(RuntimeError):
    def __init__(self, message: str, history: Optional["History"] = None):
        super().__init__(message)
        self.history = history


@dataclass
class TrainConfig:
    env: str = "pole"
    variant: str = "p3o"
    seed: int = 0
    total_steps: int = 300_000
    horizon: int = 256
    n_actors: int = 8
    epochs: int = 4
    minibatch_size: int = 512
    lr_policy: float = 2.5e-4
    lr_value: float = 2.5e-4
    schedule: str = "linear_decay"
    gamma: float = 0.99
    gamma_v: Optional[float] = None
    lambda_gae: float = 0.95
    estimator: str = "gae"
    normalize_adv: bool = True
    tau: float = 4.0
    epsilon: float = 0.2
    beta_kl: float = 0.1
    beta_s: float = 1.0
    entropy_coef: float = 0.01
    vf_coef: float = 1.0
    hidden_sizes: tuple = (64, 64)
    value_target: str = "td0"
    deon_scope: str = "final_epoch"
    max_grad_norm: Optional[float] = None
    eval_episodes: int = 5
    eval_every: int = 1

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        batch = self.horizon * self.n_actors
        if min(self.horizon, self.n_actors, self.minibatch_size) < 1:
            raise ValueError("horizon, n_actors and minibatch_size must be >= 1")
        if batch % self.minibatch_size:
            raise ValueError(f"n_actors*horizon={batch} not divisible by minibatch_size={self.minibatch_size}")
        if self.total_steps < batch:
            raise ValueError(f"total_steps={self.total_steps} < n_actors*horizon={batch}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.schedule not in ("fixed", "linear_decay"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.estimator not in ("gae", "nstep"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.value_target not in ("td0", "lambda_return"):
            raise ValueError(f"unknown value_target {self.value_target!r}")
        if self.deon_scope not in ("final_epoch", "iteration"):
            raise ValueError(f"unknown deon_scope {self.deon_scope!r}")
        self.objective  # validates the objective fields

    @property
    def objective(self) -> ObjectiveConfig:
        return ObjectiveConfig(self.variant, self.tau, self.epsilon, self.beta_kl, self.beta_s,
                               self.entropy_coef, self.vf_coef)

    @property
    def value_gamma(self) -> float:
        return self.gamma if self.gamma_v is None else self.gamma_v

    @property
    def batch_size(self) -> int:
        return self.horizon * self.n_actors

    @property
    def n_iterations(self) -> int:
        return self.total_steps // self.batch_size


def default_config(env: str = "pole", **overrides) -> TrainConfig:
    """Config with the preset matching the environment's action space."""
    preset = CONTINUOUS_DEFAULTS if not make_env(env).discrete else DISCRETE_DEFAULTS
    return TrainConfig(env=env, **{**preset, **overrides})


@dataclass(frozen=True)
class MetricsRow:
    iteration: int
    env_steps: int
    mean_return: float
    eval_return: float
    deon: float
    cpi_value: float
    mean_kl: float
    entropy: float
    lr: float
    frac_above: float
    frac_below: float


METRIC_FIELDS = tuple(f.name for f in dataclasses.fields(MetricsRow))


@dataclass
class History:
    config: TrainConfig
    rows: list = field(default_factory=list)
    nets: Optional["Nets"] = field(default=None, repr=False, compare=False)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])


def lr_schedule(step: float, total: float, base: float, kind: str = "fixed") -> float:
    if kind == "fixed":
        return base
    if kind == "linear_decay":
        if total <= 0:
            raise ValueError("lr_schedule: total must be > 0")
        return max(0.0, base * (1.0 - step / total))
    raise ValueError(f"unknown schedule {kind!r}")


def _actor_streams(seed: int, n: int, salt: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence([seed, salt]).spawn(n)


def _act(dist, noise: np.ndarray, deterministic: bool = False) -> np.ndarray:
    """Map per-actor noise to actions: inverse CDF for softmax, reparameterized Gaussian."""
    if deterministic:
        return dist.mode()
    if isinstance(dist, Categorical):
        cdf = np.cumsum(dist.probs, axis=1)
        return np.minimum((noise[:, :1] > cdf).sum(axis=1), cdf.shape[1] - 1)
    return dist.mean.data + dist.std * noise


class RolloutCollector:
    """Steps ``n_actors`` environments with index-derived random streams.

    Episodes run across iteration boundaries; the collector keeps each
    actor's current observation and running return.
    """

    def __init__(self, env_name: str, n_actors: int, seed: int, env_kwargs: Optional[dict] = None):
        streams = _actor_streams(seed, n_actors, salt=0)
        self.envs: list[Env] = [make_env(env_name, **(env_kwargs or {})) for _ in range(n_actors)]
        self.rngs = [np.random.default_rng(s.spawn(1)[0]) for s in streams]
        self.obs = np.stack([env.reset(seed=int(s.generate_state(1)[0])).observation
                             for env, s in zip(self.envs, streams)])
        self.running = np.zeros(n_actors)

    @property
    def env(self) -> Env:
        return self.envs[0]

    def _noise(self) -> np.ndarray:
        if self.env.discrete:
            return np.stack([rng.random(1) for rng in self.rngs])
        return np.stack([rng.standard_normal(self.env.action_dim) for rng in self.rngs])

    def collect(self, policy: Policy, value: ValueNet, horizon: int) -> Rollout:
        N, T = len(self.envs), horizon
        env = self.env
        obs = np.empty((T, N, env.obs_dim))
        next_obs = np.empty((T, N, env.obs_dim))
        actions = np.empty((T, N)) if env.discrete else np.empty((T, N, env.action_dim))
        logp = np.empty((T, N))
        values = np.empty((T, N))
        rewards = np.zeros((T, N))
        terminated = np.zeros((T, N), dtype=bool)
        truncated = np.zeros((T, N), dtype=bool)
        params = None
        finished: list[float] = []
        for t in range(T):
            dist = policy.snapshot(self.obs)
            a = _act(dist, self._noise())
            if params is None:
                params = np.empty((T, N, dist.params_array().shape[1]))
            obs[t] = self.obs
            actions[t] = a
            logp[t] = dist.log_prob(a).data
            values[t] = value.predict(self.obs)
            params[t] = dist.params_array()
            for i, e in enumerate(self.envs):
                try:
                    state, r, done = e.step(a[i])
                except Exception as exc:
                    raise RuntimeError(f"actor {i}: {exc}") from exc
                rewards[t, i] = r
                next_obs[t, i] = state.observation
                self.running[i] += r
                if done:
                    terminated[t, i] = not state.truncated
                    truncated[t, i] = state.truncated
                    finished.append(self.running[i])
                    self.running[i] = 0.0
                    self.obs[i] = e.reset().observation
                else:
                    self.obs[i] = state.observation
        flat = lambda x: np.swapaxes(x, 0, 1).reshape((N * T,) + x.shape[2:])
        next_values = value.predict(next_obs.reshape(T * N, -1)).reshape(T, N)
        return Rollout(
            obs=flat(obs), actions=flat(actions) if not env.discrete else flat(actions).astype(np.int64),
            rewards=flat(rewards), terminated=flat(terminated), truncated=flat(truncated),
            next_obs=flat(next_obs), old_log_probs=flat(logp), values=flat(values),
            next_values=flat(next_values), old_dist_params=flat(params),
            bootstrap=value.predict(self.obs), n_actors=N, horizon=T,
            old_log_std=None if policy.log_std is None else policy.log_std.data.copy(),
            episode_returns=finished, partial_returns=list(self.running),
        )


def collect_rollouts(policy: Policy, envs: RolloutCollector, T: int, value: ValueNet) -> Rollout:
    return envs.collect(policy, value, T)


def evaluate(policy: Policy, env_name: str, n_episodes: int, seed: int,
             env_kwargs: Optional[dict] = None) -> float:
    """Mean undiscounted return of greedy/mean-action episodes with fixed seeds."""
    streams = _actor_streams(seed, n_episodes, salt=1)
    envs = [make_env(env_name, **(env_kwargs or {})) for _ in range(n_episodes)]
    obs = np.stack([e.reset(seed=int(s.generate_state(1)[0])).observation for e, s in zip(envs, streams)])
    totals = np.zeros(n_episodes)
    live = np.ones(n_episodes, dtype=bool)
    while live.any():
        idx = np.flatnonzero(live)
        actions = policy.snapshot(obs[idx]).mode()
        for j, i in enumerate(idx):
            state, r, done = envs[i].step(actions[j])
            totals[i] += r
            obs[i] = state.observation
            live[i] = not done
    return float(totals.mean())


class Nets:
    """Separate policy and value networks with one Adam optimizer each."""

    def __init__(self, config: TrainConfig, env: Env):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
        if env.discrete:
            self.policy = Policy(env.obs_dim, n_actions=env.n_actions, hidden_sizes=config.hidden_sizes, rng=rng)
        else:
            self.policy = Policy(env.obs_dim, action_dim=env.action_dim, hidden_sizes=config.hidden_sizes, rng=rng)
        self.value = ValueNet(env.obs_dim, config.hidden_sizes, rng=rng)
        self.opt_policy = ad.Adam(self.policy.params, alpha=config.lr_policy)
        self.opt_value = ad.Adam(self.value.params, alpha=config.lr_value)

    def snapshot(self):
        return (self.policy.get_state(), self.value.get_state(),
                self.opt_policy.state_dict(), self.opt_value.state_dict())

    def restore(self, snap) -> None:
        self.policy.set_state(snap[0])
        self.value.set_state(snap[1])
        self.opt_policy.load_state_dict(snap[2])
        self.opt_value.load_state_dict(snap[3])


def _old_dist(rollout: Rollout, idx: np.ndarray):
    if rollout.old_log_std is None:
        return Categorical(rollout.old_dist_params[idx])
    return DiagGaussian(rollout.old_dist_params[idx], rollout.old_log_std)


def _clip_grads(params, max_norm: float) -> None:
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * (max_norm / (total + 1e-12))


def _minibatch_report(nets: Nets, rollout: Rollout, idx: np.ndarray, config: TrainConfig):
    policy, value = nets.policy, nets.value
    obs = rollout.obs[idx]
    if config.value_target == "td0":
        target = td0_target(rollout.rewards[idx], value.predict(rollout.next_obs[idx]),
                            config.value_gamma, rollout.terminated[idx])
    else:
        target = rollout.value_targets[idx]
    v = value(obs)
    value_loss = 0.5 * ad.mean(ad.square(v - target))
    return p3o_loss(policy.dist(obs), _old_dist(rollout, idx), rollout.actions[idx],
                    rollout.old_log_probs[idx], rollout.advantages[idx], config.objective,
                    value_loss=value_loss)


def train_iteration(rollout: Rollout, nets: Nets, config: TrainConfig, rng: np.random.Generator,
                    lr_frac: float = 1.0) -> dict:
    """Compute advantages over the whole buffer, then run the epoch/minibatch updates.

    Returns the ratio-based diagnostics aggregated over the final epoch.  On
    a non-finite loss or gradient all parameters and optimizer moments are
    restored and :class:`TrainingError` is raised.
    """
    compute_advantages(rollout, config.gamma, config.lambda_gae, config.estimator, config.normalize_adv)
    nets.opt_policy.alpha = lr_frac * config.lr_policy
    nets.opt_value.alpha = lr_frac * config.lr_value
    snap = nets.snapshot()
    M, mb = len(rollout), config.minibatch_size
    params = nets.policy.params + nets.value.params
    final: list = []
    all_deon = 0.0
    try:
        for epoch in range(config.epochs):
            perm = rng.permutation(M)
            last = epoch == config.epochs - 1
            for start in range(0, M, mb):
                idx = perm[start:start + mb]
                report = _minibatch_report(nets, rollout, idx, config)
                all_deon = max(all_deon, report.deon)
                if last:
                    final.append(report)
                ad.zero_grads(params)
                ad.backward(report.loss)
                if config.max_grad_norm is not None:
                    _clip_grads(nets.policy.params, config.max_grad_norm)
                    _clip_grads(nets.value.params, config.max_grad_norm)
                nets.opt_policy.step()
                nets.opt_value.step()
        if config.epochs == 0:
            final.append(_minibatch_report(nets, rollout, np.arange(M), config))
    except ad.AutodiffError as exc:
        nets.restore(snap)
        raise TrainingError(f"iteration aborted, parameters rolled back: {exc}") from exc
    ad.zero_grads(params)
    ratios = np.concatenate([r.ratios for r in final])
    weights = np.array([len(r.ratios) for r in final], dtype=float)
    avg = lambda name: float(np.dot([getattr(r, name) for r in final], weights) / weights.sum())
    return dict(
        deon=deon(ratios) if config.deon_scope == "final_epoch" else all_deon,
        cpi_value=avg("cpi_value"), mean_kl=avg("mean_kl"), entropy=avg("mean_entropy"),
        frac_above=avg("frac_above"), frac_below=avg("frac_below"),
    )


def run_training(config: TrainConfig, callback: Optional[Callable[[MetricsRow], None]] = None,
                 env_kwargs: Optional[dict] = None, nets: Optional[Nets] = None) -> History:
    """Alternate collection and updates until ``total_steps`` env steps are used."""
    collector = RolloutCollector(config.env, config.n_actors, config.seed, env_kwargs)
    nets = nets if nets is not None else Nets(config, collector.env)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3]))
    history = History(config)
    eval_return = 0.0
    steps = 0
    n_iter = config.n_iterations
    for it in range(n_iter):
        frac = lr_schedule(steps, n_iter * config.batch_size, 1.0, config.schedule)
        try:
            rollout = collector.collect(nets.policy, nets.value, config.horizon)
            stats = train_iteration(rollout, nets, config, shuffle_rng, frac)
        except TrainingError as exc:
            exc.history = history
            raise
        except Exception as exc:
            raise TrainingError(f"iteration {it}: {exc}", history) from exc
        steps += config.batch_size
        returns = rollout.episode_returns or rollout.partial_returns
        if config.eval_episodes > 0 and (it % config.eval_every == 0 or it == n_iter - 1):
            eval_return = evaluate(nets.policy, config.env, config.eval_episodes, config.seed, env_kwargs)
        row = MetricsRow(iteration=it, env_steps=steps, mean_return=float(np.mean(returns)),
                         eval_return=eval_return, lr=frac * config.lr_policy, **stats)
        history.rows.append(row)
        if callback is not None:
            callback(row)
    history.nets = nets
    return history
