# coding: utf-8

# # Where does lambda become unsafe?
#
# A coarse sweep on the gridworld: each cell trains a few learners and records
# whether any of them blew up. The frontier column lists, per eps, the largest
# lambda such that it and every smaller lambda stayed finite.

from qlambda.sweep import SweepConfig, bound_violations, extract_frontier, run_sweep

cfg = SweepConfig(
    lambda_grid=[0.0, 0.5, 0.8, 0.9, 1.0],
    epsilon_grid=[0.5, 1.5, 2.0],
    trials_per_cell=2,
    episodes_per_trial=300,
    gamma=0.9,
    step_a0=1.0,
)
records = run_sweep(cfg)
frontier = extract_frontier(records, cfg.gamma, cfg.epsilon_grid)
print(frontier.to_csv())

# The theoretical limit is conservative: cells below it should never diverge.

print("diverged cells below the bound:", len(bound_violations(records, cfg.gamma)))
print("monotone in eps:", frontier.is_monotone)
