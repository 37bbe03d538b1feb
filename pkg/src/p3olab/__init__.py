"""Sigmoid-preconditioned policy optimization on a small numpy autodiff stack.

Submodules:

- ``autodiff``: reverse-mode tensors, Adam and finite-difference checks
- ``envs``: chain MDP with an exact solver, pole balancing, point mass
- ``policies``: MLPs, softmax and diagonal Gaussian heads, KL and entropy
- ``advantages``: GAE, n-step returns, TD(0) targets
- ``objectives``: CPI, PPO-clip, Scopic and the full loss with its ablations
- ``trainer``: rollout collection and the epoch/minibatch update loop
- ``experiment``: config files, experiment grids, CSV logs and SVG plots
"""

from .autodiff import Adam, Tensor, backward, finite_diff_check
from .envs import chain_mdp, exact_solve, make_env
from .objectives import (
    ObjectiveConfig,
    clip_space_fraction,
    cpi_objective,
    deon,
    p3o_loss,
    ppo_objective,
    precond_factor,
    scopic_objective,
)
from .trainer import History, MetricsRow, TrainConfig, default_config, run_training

__version__ = "0.1.0"

__all__ = [
    "Adam", "Tensor", "backward", "finite_diff_check",
    "chain_mdp", "exact_solve", "make_env",
    "ObjectiveConfig", "clip_space_fraction", "cpi_objective", "deon", "p3o_loss", "ppo_objective",
    "precond_factor", "scopic_objective",
    "History", "MetricsRow", "TrainConfig", "default_config", "run_training",
]
