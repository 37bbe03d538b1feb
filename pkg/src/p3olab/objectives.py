"""Surrogate objectives, the sigmoid preconditioner and off-policyness metrics.

All objectives are written to be maximized.  They accept plain arrays or
:class:`~p3olab.autodiff.Tensor` ratios and return a scalar Tensor, so the
same code evaluates values and carries gradients back to the policy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .policies import PolicyDist, kl

VARIANTS = ("cpi", "ppo", "p3o", "p3o_s", "p3o_k", "p3o_sk")


class ObjectiveError(Exception):
    pass


@dataclass(frozen=True)
class ObjectiveConfig:
    variant: str = "p3o"
    tau: float = 4.0
    epsilon: float = 0.2
    beta_kl: float = 1.0
    beta_s: float = 1.0
    entropy_coef: float = 0.0
    vf_coef: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must be in (0, 1)")
        if self.beta_kl < 0 or self.entropy_coef < 0 or self.vf_coef < 0:
            raise ValueError("beta_kl, entropy_coef and vf_coef must be >= 0")

    @property
    def uses_sigmoid(self) -> bool:
        return self.variant in ("p3o", "p3o_k")

    @property
    def effective_beta_kl(self) -> float:
        return self.beta_kl if self.variant in ("p3o", "p3o_s") else 0.0


@dataclass(frozen=True)
class ObjectiveReport:
    loss: Tensor
    cpi_value: float
    mean_kl: float
    mean_entropy: float
    deon: float
    frac_above: float
    frac_below: float
    ratios: Optional[np.ndarray] = None


def _pair(op: str, ratios, advantages) -> tuple[Tensor, Tensor]:
    r = ad._wrap(ratios)
    a = ad._wrap(advantages)
    if r.shape != a.shape:
        raise ObjectiveError(f"{op}: ratios {r.shape} and advantages {a.shape} differ in shape")
    if r.size == 0:
        raise ObjectiveError(f"{op}: empty batch")
    if (r.data <= 0).any():
        raise ObjectiveError(f"{op}: importance ratios must be positive")
    return r, a


def cpi_objective(ratios, advantages) -> Tensor:
    r, a = _pair("cpi_objective", ratios, advantages)
    return ad.mean(r * a)


def ppo_objective(ratios, advantages, epsilon: float = 0.2) -> Tensor:
    if not 0.0 < epsilon < 1.0:
        raise ObjectiveError("ppo_objective: epsilon must be in (0, 1)")
    r, a = _pair("ppo_objective", ratios, advantages)
    clipped = ad.clip(r, 1.0 - epsilon, 1.0 + epsilon)
    return ad.mean(ad.minimum(r * a, clipped * a))


def scopic_terms(ratios, advantages, tau: float) -> Tensor:
    """Per-sample ``sigmoid(tau * (r - 1)) * 4 / tau * A``."""
    if tau <= 0:
        raise ObjectiveError("scopic: tau must be > 0")
    r, a = _pair("scopic_objective", ratios, advantages)
    return ad.sigmoid(tau * (r - 1.0)) * (4.0 / tau) * a


def scopic_objective(ratios, advantages, tau: float = 4.0) -> Tensor:
    return ad.mean(scopic_terms(ratios, advantages, tau))


def precond_factor(r, tau: float):
    """``4 p (1 - p)`` with ``p = sigmoid(tau * (r - 1))``; 1 on-policy, vanishing far off it."""
    if tau <= 0:
        raise ObjectiveError("precond_factor: tau must be > 0")
    r = np.asarray(r, dtype=np.float64)
    p = ad._sigmoid(np.atleast_1d(tau * (r - 1.0))).reshape(r.shape)
    out = 4.0 * p * (1.0 - p)
    return float(out) if out.ndim == 0 else out


def deon(ratios) -> float:
    """Largest deviation ``max |r - 1|`` of raw importance ratios from 1."""
    r = np.asarray(ad._wrap(ratios).data, dtype=np.float64).reshape(-1)
    if r.size == 0:
        raise ObjectiveError("deon: empty batch")
    return float(np.max(np.abs(r - 1.0)))


def clip_space_fraction(ratios, epsilon: float = 0.2) -> tuple[float, float]:
    """Fractions of samples with ``r > 1 + eps`` and ``r < 1 - eps``."""
    if not 0.0 < epsilon < 1.0:
        raise ObjectiveError("clip_space_fraction: epsilon must be in (0, 1)")
    r = np.asarray(ad._wrap(ratios).data, dtype=np.float64).reshape(-1)
    if r.size == 0:
        raise ObjectiveError("clip_space_fraction: empty batch")
    return float(np.count_nonzero(r > 1.0 + epsilon)) / r.size, float(np.count_nonzero(r < 1.0 - epsilon)) / r.size


def policy_objective(ratios: Tensor, advantages, config: ObjectiveConfig) -> Tensor:
    """The advantage-weighted part of the chosen variant, before KL and entropy terms."""
    v = config.variant
    if v == "cpi":
        return cpi_objective(ratios, advantages)
    if v == "ppo":
        return ppo_objective(ratios, advantages, config.epsilon)
    if config.uses_sigmoid:
        return config.beta_s * scopic_objective(ratios, advantages, config.tau)
    # p3o_s and p3o_sk: identity preconditioner
    return config.beta_s * cpi_objective(ratios, advantages)


def p3o_loss(new_dist: PolicyDist, old_dist: PolicyDist, actions, old_log_probs, advantages,
             config: ObjectiveConfig, value_loss: Optional[Tensor] = None) -> ObjectiveReport:
    """Loss to minimize for one minibatch, with diagnostics.

    ``old_log_probs`` are frozen at collection time; ratios are recomputed
    from ``new_dist`` on every call.  The loss is the negated objective of
    ``config.variant`` minus the KL penalty and plus the entropy bonus, plus
    ``vf_coef * value_loss`` when one is supplied.
    """
    if old_dist.kind != new_dist.kind:
        raise ObjectiveError(f"p3o_loss: distribution kind mismatch (old {old_dist.kind}, new {new_dist.kind})")
    old_log_probs = np.asarray(old_log_probs, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    ratios = ad.exp(new_dist.log_prob(actions) - old_log_probs)
    objective = policy_objective(ratios, advantages, config)
    kl_rows = kl(old_dist, new_dist)
    mean_kl = ad.mean(kl_rows)
    mean_ent = ad.mean(new_dist.entropy())
    beta_kl = config.effective_beta_kl
    if beta_kl > 0:
        objective = objective - beta_kl * mean_kl
    if config.entropy_coef > 0:
        objective = objective + config.entropy_coef * mean_ent
    loss = ad.negate(objective)
    if value_loss is not None and config.vf_coef > 0:
        loss = loss + config.vf_coef * value_loss
    above, below = clip_space_fraction(ratios, config.epsilon)
    return ObjectiveReport(
        loss=loss,
        cpi_value=float(np.mean(ratios.data * advantages)),
        mean_kl=mean_kl.item(),
        mean_entropy=mean_ent.item(),
        deon=deon(ratios),
        frac_above=above,
        frac_below=below,
        ratios=ratios.data.copy(),
    )
