# coding: utf-8

# # Riding a simulated bicycle
#
# The desk preset puts the goal 30 m ahead (within 22.5 degrees) so that a
# short run on a coarse grid can learn to reach it. It takes about ten seconds.

import numpy as np

from qlambda.bicycle import ACTIONS, BicycleAction, BicycleConfig, goal_rate, make_grid, reset, step, train_bicycle
from qlambda.td import StepSchedule

config = BicycleConfig.desk()

# With no steering input the bicycle falls over within a couple of seconds.

rng = np.random.default_rng(0)
state, t = reset(rng, config), 0
while not state.terminal:
    state, _, _ = step(state, ACTIONS.index(BicycleAction(0.0, 0.0)), rng, config)
    t += 1
print(f"untouched bicycle fell after {t * config.dt:.2f} s")

print("untrained goal rate:", goal_rate(make_grid(6, config), 50, np.random.default_rng(1), config))
run = train_bicycle(lam=0.3, epsilon=0.03, episodes=8000, grid_res=6, step_size=StepSchedule(0.5, 1e-4),
                    seed=0, config=config, eval_every=2000, eval_episodes=20)
for n, rate in zip(run.eval_episodes, run.eval_rates):
    print(f"after {n:5d} episodes: goal rate {rate:.2f}")
print("final goal rate:", goal_rate(run.grid, 50, np.random.default_rng(1), config))
