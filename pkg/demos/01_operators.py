# coding: utf-8

# # Exact lambda-operators on a small MDP
#
# Everything here is computed in closed form with dense linear algebra, so the
# numbers are exact up to float64 round-off.

import numpy as np

from qlambda import (
    distance_mixture,
    exact_q_pi,
    general_q_fixed_point,
    greedy_policy,
    iterate_operator,
    lambda_max_eval,
    r_general_q,
    r_lambda,
    random_mdp,
)
from qlambda.operators import certify_contraction, eta_eval_bound

rng = np.random.default_rng(0)
mdp = random_mdp(8, 3, branching=3, seed=1, gamma=0.9)
pi = greedy_policy(rng.normal(size=(8, 3)))

# The behaviour is built so that its L1 distance from the target is exactly eps.

eps = 0.5
mu = distance_mixture(pi, eps)
q_pi = exact_q_pi(mdp, pi)
print("lambda_max at eps=0.5:", lambda_max_eval(mdp.gamma, eps))

# Q^pi is a fixed point of the corrected-return operator for every lambda.

for lam in (0.0, 0.5, 1.0):
    residual = np.max(np.abs(r_lambda(mdp, pi, mu, q_pi, lam) - q_pi))
    print(f"lambda={lam}: ||R Q^pi - Q^pi|| = {residual:.1e}")

# Inside the safe region the measured Lipschitz ratio stays under the bound.

lam = 0.2
report = certify_contraction(mdp, pi, mu, lam, n_pairs=200, seed=0)
print(f"eta bound {eta_eval_bound(mdp.gamma, lam, eps):.4f}, measured {report.eta_empirical:.4f}, "
      f"iterations to 1e-8: {report.iterations}")

errors = iterate_operator(lambda q: r_lambda(mdp, pi, mu, q, lam), np.zeros((8, 3)), q_pi)
print("error every 10 iterations:", ", ".join(f"{e:.1e}" for e in errors[::10]))

# Without the off-policy correction the fixed point moves away from Q^pi.

fixed = general_q_fixed_point(mdp, pi, mu, 0.5)
errors = iterate_operator(lambda q: r_general_q(mdp, pi, mu, q, 0.5), np.zeros((8, 3)), fixed, tol=1e-10)
print(f"uncorrected operator converges ({errors[-1]:.0e}) to a point "
      f"{np.max(np.abs(fixed - q_pi)):.3f} away from Q^pi")
