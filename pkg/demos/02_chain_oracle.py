"""Train on the 5-state chain and compare against the exact solution.

Run:  python demos/02_chain_oracle.py

The chain is small enough to solve exactly, so the learned policy and the
value network can be checked state by state.
"""

import numpy as np

from p3olab.envs import chain_mdp, exact_solve, optimal_values
from p3olab.trainer import default_config, run_training

mdp = chain_mdp(5, gamma=0.99)
print("optimal values:", np.round(optimal_values(mdp), 4))

# a uniform policy for reference
uniform = np.full((5, 2), 0.5)
print("uniform-policy values:", np.round(exact_solve(mdp, uniform).V, 4))

config = default_config("chain", variant="p3o", seed=0, total_steps=20_480)
history = run_training(config)
for row in history.rows[::4] + history.rows[-1:]:
    print(f"iter {row.iteration:3d}  steps {row.env_steps:6d}  return {row.mean_return:.3f}  "
          f"eval {row.eval_return:.3f}  deon {row.deon:.3f}  kl {row.mean_kl:.2e}")

# policy probabilities at each live state (one-hot observations) and the terminal
obs = np.vstack([np.eye(4), np.zeros(4)])
probs = history.nets.policy.snapshot(obs).probs
exact = exact_solve(mdp, probs).V
learned = history.nets.value.predict(obs)
print("\nP(right) per state:", np.round(probs[:4, 1], 3))
print("exact V under learned policy:", np.round(exact[:4], 4))
print("value network estimate:      ", np.round(learned[:4], 4))
