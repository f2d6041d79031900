# coding: utf-8

# # Online learning with eligibility traces
#
# Two tabular testbeds: the two-state chain, where the target always takes the
# second action and the behaviour is uniform, and a slippery 5x5 gridworld.

import numpy as np

from qlambda import (
    AlgorithmKind,
    LearnerConfig,
    Policy,
    StepSchedule,
    episode_update,
    exact_q_pi,
    forward_view_episode,
    gridworld,
    gridworld_path_policy,
    mixture_policy,
    policy_distance,
    sample_episode,
    train,
    two_state_chain,
    uniform_policy,
)

chain = two_state_chain(0.5)
pi = Policy([[0.0, 1.0], [0.0, 1.0]])
mu = uniform_policy(2, 2)
print("chain Q^pi:\n", exact_q_pi(chain, pi))

run = train(chain, "qpi", pi, mu, LearnerConfig(lam=0.5, episodes=5000, max_steps=20, seed=0,
                                                 reference_q=exact_q_pi(chain, pi)))
print("learned:\n", np.round(run.final_q, 3), "\nerror", round(run.final_error, 4))

# The backward view with a frozen table reproduces the forward view exactly.

traj = sample_episode(chain, mu, 0, np.random.default_rng(3), max_steps=30)
q0 = np.zeros((2, 2))
back = episode_update(q0, traj, "tree_backup", pi, mu, lam=0.7, gamma=0.5, alpha=0.1, mode="frozen")
fwd = forward_view_episode(q0, traj, "tree_backup", pi, mu, lam=0.7, gamma=0.5, alpha=0.1)
print("forward/backward gap:", np.max(np.abs(back - fwd)))

# On the gridworld several off-policy rules head for the same Q^pi.

grid = gridworld()
pi = mixture_policy(gridworld_path_policy(), uniform_policy(25, 4), 0.3)
mu = mixture_policy(pi, uniform_policy(25, 4), 0.1)
ref = exact_q_pi(grid, pi)
print(f"gridworld eps = {policy_distance(pi, mu):.3f}")
for kind in (AlgorithmKind.QPI, AlgorithmKind.TREE_BACKUP, AlgorithmKind.GENERAL_Q):
    cfg = LearnerConfig(lam=0.5, episodes=5000, max_steps=100, seed=0, step_size=StepSchedule(0.5, 1e-3))
    q = train(grid, kind, pi, mu, cfg).final_q
    print(f"{kind.value:12s} relative error {np.max(np.abs(q - ref)) / np.max(np.abs(ref)):.3f}")
