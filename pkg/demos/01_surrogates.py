"""How the sigmoid surrogate differs from CPI and PPO-clip.

Run:  python demos/01_surrogates.py [out.svg]

Prints per-sample values and slopes of the three surrogates for a positive
advantage, then draws them against the importance ratio.
"""

import sys

import numpy as np

from p3olab import autodiff as ad
from p3olab.objectives import cpi_objective, ppo_objective, precond_factor, scopic_terms

# one sample with advantage +1, ratio swept from 0.2 to 3
r = np.linspace(0.2, 3.0, 15)
adv = np.ones_like(r)

cpi = r * adv                                      # unbounded, slope 1 everywhere
ppo = np.minimum(r * adv, np.clip(r, 0.8, 1.2) * adv)  # flat once r > 1.2
sc = scopic_terms(r, adv, tau=4.0).data            # bounded in (0, 1) for tau = 4

print(f"{'r':>6} {'cpi':>8} {'ppo':>8} {'scopic':>8} {'precond':>8}")
for row in zip(r, cpi, ppo, sc, precond_factor(r, 4.0)):
    print("{:6.2f} {:8.3f} {:8.3f} {:8.3f} {:8.3f}".format(*row))

# the slope of the scopic term is the CPI slope times the preconditioner;
# check that with the autodiff engine
x = ad.Tensor(r, requires_grad=True)
ad.backward(ad.sum_(scopic_terms(x, adv, 4.0)))
print("\nmax |d scopic/dr - precond| =", np.abs(x.grad - precond_factor(r, 4.0)).max())

# on-policy (all ratios 1) the batch values agree for tau = 2
batch_adv = np.random.default_rng(0).normal(size=32)
ones = np.ones(32)
print("tau=2, r=1:  scopic", scopic_terms(ones, batch_adv, 2.0).data.mean(),
      " cpi", cpi_objective(ones, batch_adv).item(),
      " ppo", ppo_objective(ones, batch_adv).item())

if len(sys.argv) > 1:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    grid = np.linspace(0.05, 3.0, 300)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(grid, grid, label="CPI")
    ax.plot(grid, np.minimum(grid, np.clip(grid, 0.8, 1.2)), label="PPO-clip")
    for tau in (2.0, 4.0, 8.0):
        ax.plot(grid, scopic_terms(grid, np.ones_like(grid), tau).data, label=f"scopic tau={tau:g}")
    ax.set_xlabel("importance ratio r")
    ax.set_ylabel("per-sample objective (A = 1)")
    ax.legend()
    fig.savefig(sys.argv[1], metadata={"Date": None})
    print("wrote", sys.argv[1])
