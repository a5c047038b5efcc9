"""KL-regularized control on tiny trees: the optimal policy is an exponential tilt of the reference.

Run with ``python3 demos/kl_control.py``.
"""

import numpy as np

from motifrl.theory import (
    amplification_bound,
    enumerate_objective,
    gibbs_maximizer,
    random_mdp,
    reference_policy,
    soft_bellman_solve,
)

# One decision: two actions, the first worth one unit more
ref = np.array([0.5, 0.5])
for beta in (0.1, 1.0, 10.0):
    pi, value = gibbs_maximizer(ref, np.array([1.0, 0.0]), beta)
    print(f"beta={beta:5.1f}  pi*={np.round(pi, 4)}  value={value:.4f}")

# A rare good action still gets amplified, never created from nothing
p_good, gap = 0.05, 2.0
for beta in (0.5, 1.0, 4.0):
    print(f"beta={beta:3.1f}  mass on good actions >= {amplification_bound(p_good, gap, beta):.3f} (ref mass {p_good})")

# A three-step tree: backward recursion vs brute-force enumeration
mdp = random_mdp(np.random.default_rng(0), H=3)
V, pi = soft_bellman_solve(mdp, beta=1.0)
print(f"\ntrajectories: {mdp.n_trajectories}")
print(f"recursion value     {V[()]:.12f}")
print(f"enumerated J(pi*)   {enumerate_objective(mdp, pi, 1.0):.12f}")
print(f"enumerated J(ref)   {enumerate_objective(mdp, reference_policy(mdp), 1.0):.12f}")
