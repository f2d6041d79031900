# coding: utf-8

# # Multilinear interpolation on a uniform grid
#
# A point touches at most 2^d grid nodes; the weights are non-negative and sum
# to one, and any function linear in each coordinate is reproduced exactly.

import numpy as np

from qlambda.grid import GridTrace, UniformGridQ, apply_td_update, q_values, stencil, trace_step

grid = UniformGridQ(low=[0.0, -1.0], high=[1.0, 1.0], resolution=[5, 3], n_actions=2)
st = stencil(grid, np.array([0.3, 0.25]))
print("nodes", st.nodes, "weights", np.round(st.weights, 3), "sum", st.weights.sum())

# Fill the table with f(x, y) = 2x - y + 3xy and read it back off-grid.

for node in range(grid.n_nodes):
    x, y = grid.node_coords(node)
    grid.node_values[node] = 2 * x - y + 3 * x * y
print("interpolated", q_values(grid, np.array([0.3, 0.25])), "exact", 2 * 0.3 - 0.25 + 3 * 0.3 * 0.25)

# Traces live on the touched nodes only; a TD update moves just those values.

trace = GridTrace()
trace_step(trace, st, 1, lam=0.9, gamma=0.9)
before = grid.node_values.copy()
apply_td_update(grid, trace, delta=1.0, alpha=0.5)
print("changed entries:", int(np.count_nonzero(grid.node_values != before)))
