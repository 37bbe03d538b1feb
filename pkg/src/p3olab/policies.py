"""MLP networks and the two action distributions (softmax and diagonal Gaussian)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MLPSpec:
    input_size: int
    hidden_sizes: tuple = (64, 64)
    output_size: int = 1
    activation: str = "tanh"

    def __post_init__(self):
        sizes = (self.input_size, *self.hidden_sizes, self.output_size)
        if any(int(s) < 1 for s in sizes):
            raise ValueError(f"MLPSpec: all sizes must be >= 1, got {sizes}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"MLPSpec: unknown activation {self.activation!r}")


_ACTIVATIONS = {
    "tanh": (ad.tanh, np.tanh),
    "sigmoid": (ad.sigmoid, lambda z: ad._sigmoid(z)),
}


def orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class MLP:
    """Fully connected network; ``forward`` builds a graph, ``predict`` does not."""

    def __init__(self, spec: MLPSpec, rng: np.random.Generator, out_gain: float = 1.0):
        self.spec = spec
        sizes = (spec.input_size, *spec.hidden_sizes, spec.output_size)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            gain = out_gain if i == len(sizes) - 2 else math.sqrt(2.0)
            self.weights.append(Tensor(orthogonal(rng, n_in, n_out, gain), requires_grad=True))
            self.biases.append(Tensor(np.zeros((1, n_out)), requires_grad=True))
        self._act, self._act_np = _ACTIVATIONS[spec.activation]

    @property
    def params(self) -> list[Tensor]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def forward(self, x) -> Tensor:
        h = ad._wrap(x)
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i < last:
                h = self._act(h)
        return h

    __call__ = forward

    def predict(self, x: np.ndarray) -> np.ndarray:
        h = np.atleast_2d(np.asarray(x, dtype=np.float64))
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W.data + b.data
            if i < last:
                h = self._act_np(h)
        return h


class DistributionError(Exception):
    pass


class Categorical:
    """Softmax distribution over ``K`` actions, one row per state."""

    kind = "categorical"

    def __init__(self, logits):
        logits = ad._wrap(logits)
        if logits.data.ndim == 1:
            logits = ad.reshape(logits, (1, -1))
        self.logits = logits
        shift = ad.max_const(logits, axis=1)
        z = logits - shift
        self.log_probs = z - ad.log(ad.reshape(ad.sum_(ad.exp(z), axis=1), (-1, 1)))

    @property
    def n_actions(self) -> int:
        return self.logits.shape[1]

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs.data)

    def _onehot(self, actions) -> np.ndarray:
        a = np.asarray(actions).reshape(-1)
        if a.dtype.kind == "f":
            if not np.all(a == np.round(a)):
                raise DistributionError(f"categorical: non-integer action {actions!r}")
            a = a.astype(np.int64)
        B, K = self.logits.shape
        if a.shape[0] != B or (a < 0).any() or (a >= K).any():
            raise DistributionError(f"categorical: invalid action(s) {actions!r} for {B} rows x {K} actions")
        onehot = np.zeros((B, K))
        onehot[np.arange(B), a] = 1.0
        return onehot

    def log_prob(self, actions) -> Tensor:
        return ad.sum_(self.log_probs * self._onehot(actions), axis=1)

    def entropy(self) -> Tensor:
        p = ad.exp(self.log_probs)
        return ad.negate(ad.sum_(p * self.log_probs, axis=1))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        cdf = np.cumsum(self.probs, axis=1)
        u = rng.random((cdf.shape[0], 1))
        return np.minimum((u > cdf).sum(axis=1), cdf.shape[1] - 1)

    def mode(self) -> np.ndarray:
        return np.argmax(self.logits.data, axis=1)

    def params_array(self) -> np.ndarray:
        return self.logits.data

    def kl_to(self, new: "Categorical") -> Tensor:
        p_old = np.exp(self.log_probs.data)
        return ad.sum_(p_old * (self.log_probs - new.log_probs), axis=1)


class DiagGaussian:
    """Gaussian with per-row means and a shared log standard deviation row."""

    kind = "gaussian"

    def __init__(self, mean, log_std):
        mean = ad._wrap(mean)
        log_std = ad._wrap(log_std)
        if mean.data.ndim == 1:
            mean = ad.reshape(mean, (1, -1))
        if log_std.data.ndim == 1:
            log_std = ad.reshape(log_std, (1, -1))
        if log_std.shape[1] != mean.shape[1]:
            raise DistributionError(f"gaussian: mean dim {mean.shape[1]} != log_std dim {log_std.shape[1]}")
        if not np.isfinite(log_std.data).all():
            raise DistributionError("gaussian: log_std must be finite")
        self.mean = mean
        self.log_std = log_std

    @property
    def dim(self) -> int:
        return self.mean.shape[1]

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std.data)

    def log_prob(self, actions) -> Tensor:
        a = np.asarray(actions, dtype=np.float64)
        if a.ndim < 2:
            a = a.reshape(self.mean.shape[0], -1) if a.size == self.mean.size else a.reshape(1, -1)
        if a.shape[1] != self.dim or a.shape[0] not in (1, self.mean.shape[0]):
            raise DistributionError(f"gaussian: action shape {a.shape} incompatible with dim {self.dim}")
        z = (a - self.mean) * ad.exp(ad.negate(self.log_std))
        per_dim = -0.5 * ad.square(z) - self.log_std - 0.5 * LOG_2PI
        return ad.sum_(per_dim, axis=1)

    def entropy(self) -> Tensor:
        per_row = ad.sum_(self.log_std + 0.5 * (1.0 + LOG_2PI), axis=1)
        return ad.broadcast(per_row, (self.mean.shape[0],))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean.data + self.std * rng.standard_normal(self.mean.shape)

    def mode(self) -> np.ndarray:
        return self.mean.data

    def params_array(self) -> np.ndarray:
        return self.mean.data

    def kl_to(self, new: "DiagGaussian") -> Tensor:
        # summed over action dimensions
        diff = self.mean.data - new.mean
        log_ratio = new.log_std - self.log_std.data
        var_ratio = ad.exp(-2.0 * log_ratio)
        per_dim = (log_ratio + 0.5 * (var_ratio + ad.square(diff) * ad.exp(-2.0 * new.log_std)) - 0.5)
        return ad.sum_(per_dim, axis=1)


PolicyDist = Union[Categorical, DiagGaussian]


def log_prob(dist: PolicyDist, action) -> Tensor:
    return dist.log_prob(action)


def sample(dist: PolicyDist, rng: np.random.Generator) -> np.ndarray:
    return dist.sample(rng)


def entropy(dist: PolicyDist) -> Tensor:
    return dist.entropy()


def kl(old: PolicyDist, new: PolicyDist) -> Tensor:
    """Forward KL(old || new) per row, differentiable in ``new``'s parameters."""
    if old.kind != new.kind:
        raise DistributionError(f"kl: kind mismatch {old.kind} vs {new.kind}")
    if old.kind == "categorical" and old.n_actions != new.n_actions:
        raise DistributionError("kl: action counts differ")
    if old.kind == "gaussian" and old.dim != new.dim:
        raise DistributionError("kl: action dimensions differ")
    return old.kl_to(new)


class Policy:
    """Policy network plus action head.

    Discrete tasks use a softmax head over MLP logits.  Continuous tasks use
    an MLP mean and a state-independent learned ``log_std`` row.
    """

    def __init__(self, obs_dim: int, *, n_actions: int = 0, action_dim: int = 0,
                 hidden_sizes: Sequence[int] = (64, 64), rng: Optional[np.random.Generator] = None,
                 init_log_std: float = 0.0):
        if (n_actions > 0) == (action_dim > 0):
            raise ValueError("Policy: give exactly one of n_actions or action_dim")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.discrete = n_actions > 0
        out = n_actions if self.discrete else action_dim
        self.net = MLP(MLPSpec(obs_dim, tuple(hidden_sizes), out), rng, out_gain=0.01)
        self.log_std = None if self.discrete else Tensor(np.full((1, action_dim), init_log_std),
                                                         requires_grad=True)

    @property
    def params(self) -> list[Tensor]:
        return self.net.params + ([] if self.log_std is None else [self.log_std])

    def dist(self, obs) -> PolicyDist:
        out = self.net.forward(obs)
        if self.discrete:
            return Categorical(out)
        return DiagGaussian(out, self.log_std)

    def snapshot(self, obs: np.ndarray) -> PolicyDist:
        """Graph-free distribution at ``obs`` for acting and for old-policy records."""
        out = self.net.predict(obs)
        if self.discrete:
            return Categorical(out)
        return DiagGaussian(out, self.log_std.data.copy())

    def get_state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params]

    def set_state(self, state: Sequence[np.ndarray]) -> None:
        for p, d in zip(self.params, state):
            p.data = d.copy()


class ValueNet:
    def __init__(self, obs_dim: int, hidden_sizes: Sequence[int] = (64, 64),
                 rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.net = MLP(MLPSpec(obs_dim, tuple(hidden_sizes), 1), rng, out_gain=1.0)

    @property
    def params(self) -> list[Tensor]:
        return self.net.params

    def forward(self, obs) -> Tensor:
        return ad.reshape(self.net.forward(obs), (-1,))

    __call__ = forward

    def predict(self, obs: np.ndarray) -> np.ndarray:
        return self.net.predict(obs)[:, 0]

    def get_state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params]

    def set_state(self, state: Sequence[np.ndarray]) -> None:
        for p, d in zip(self.params, state):
            p.data = d.copy()
