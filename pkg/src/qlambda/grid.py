"""Multilinear interpolation of Q over a uniform grid, with node-level traces.

A point is represented by the ``2^d`` corners of its enclosing cell, weighted by
products of one-dimensional fractions (corners with zero weight are dropped).
Eligibility traces live on ``(node, action)`` pairs and receive the stencil
weights in place of the tabular indicator.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .mdp import ContractError
from .td import TRACE_FLOOR

__all__ = [
    "UniformGridQ",
    "InterpWeights",
    "GridTrace",
    "stencil",
    "q_value",
    "q_values",
    "trace_step",
    "apply_td_update",
    "grid_episode_update",
]


@njit(cache=True)
def _stencil(x, low, inv_h, res, strides, nodes, weights):
    """Fill ``nodes``/``weights`` with the non-zero corners of ``x``'s cell; return their count."""
    d = x.shape[0]
    base = np.empty(d, dtype=np.int64)
    frac = np.empty(d)
    for k in range(d):
        u = (x[k] - low[k]) * inv_h[k]
        top = res[k] - 1
        if u <= 0.0:
            u = 0.0
        elif u >= top:
            u = float(top)
        i = int(np.floor(u))
        if i > top - 1:
            i = top - 1
        base[k] = i
        frac[k] = u - i
    count = 0
    for mask in range(1 << d):
        w = 1.0
        node = 0
        for k in range(d):
            if (mask >> k) & 1:
                f = frac[k]
                node += (base[k] + 1) * strides[k]
            else:
                f = 1.0 - frac[k]
                node += base[k] * strides[k]
            if f == 0.0:
                w = 0.0
                break
            w *= f
        if w > 0.0:
            nodes[count] = node
            weights[count] = w
            count += 1
    return count


@njit(cache=True)
def _interp_row(values, nodes, weights, count, out):
    out[:] = 0.0
    for j in range(count):
        row = values[nodes[j]]
        w = weights[j]
        for a in range(values.shape[1]):
            out[a] += w * row[a]


@dataclass
class InterpWeights:
    nodes: np.ndarray
    weights: np.ndarray


@dataclass
class UniformGridQ:
    """Q-function with values stored at the nodes of a uniform grid."""

    low: np.ndarray
    high: np.ndarray
    resolution: np.ndarray
    n_actions: int
    node_values: np.ndarray | None = None

    def __post_init__(self):
        self.low = np.asarray(self.low, dtype=float)
        self.high = np.asarray(self.high, dtype=float)
        res = np.broadcast_to(np.asarray(self.resolution, dtype=np.int64), self.low.shape)
        self.resolution = res.copy()
        if self.low.shape != self.high.shape or self.low.ndim != 1:
            raise ContractError("bounds must be matching 1-D arrays")
        if np.any(self.high <= self.low):
            raise ContractError("each upper bound must exceed its lower bound")
        if np.any(self.resolution < 2):
            raise ContractError("resolution must be at least 2 in every dimension")
        # row-major node numbering: last dimension varies fastest
        strides = np.ones(self.dims, dtype=np.int64)
        for k in range(self.dims - 2, -1, -1):
            strides[k] = strides[k + 1] * self.resolution[k + 1]
        self.strides = strides
        self.inv_h = (self.resolution - 1) / (self.high - self.low)
        n = int(np.prod(self.resolution))
        if self.node_values is None:
            self.node_values = np.zeros((n, self.n_actions))
        else:
            self.node_values = np.array(self.node_values, dtype=float)
            if self.node_values.shape != (n, self.n_actions):
                raise ContractError(f"node_values must have shape {(n, self.n_actions)}")
        self._nodes = np.empty(1 << self.dims, dtype=np.int64)
        self._weights = np.empty(1 << self.dims)

    @property
    def dims(self) -> int:
        return self.low.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.node_values.shape[0]

    def node_coords(self, node: int) -> np.ndarray:
        idx = np.array([(node // s) % r for s, r in zip(self.strides, self.resolution)])
        return self.low + idx / self.inv_h

    def copy(self) -> "UniformGridQ":
        return UniformGridQ(self.low, self.high, self.resolution, self.n_actions, self.node_values.copy())

    def to_dict(self) -> dict:
        return {
            "low": self.low.tolist(),
            "high": self.high.tolist(),
            "resolution": self.resolution.tolist(),
            "n_actions": self.n_actions,
            "node_values": self.node_values.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UniformGridQ":
        return cls(d["low"], d["high"], d["resolution"], d["n_actions"], d["node_values"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "UniformGridQ":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _point(grid: UniformGridQ, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (grid.dims,):
        raise ContractError(f"point must have {grid.dims} coordinates")
    if np.any(np.isnan(x)):
        raise ContractError("NaN coordinate")
    return x


def stencil(grid: UniformGridQ, x) -> InterpWeights:
    """Enclosing corners of ``x`` (clipped to the grid box) and their weights."""
    x = _point(grid, x)
    n = _stencil(x, grid.low, grid.inv_h, grid.resolution, grid.strides, grid._nodes, grid._weights)
    return InterpWeights(grid._nodes[:n].copy(), grid._weights[:n].copy())


def q_values(grid: UniformGridQ, x) -> np.ndarray:
    st = stencil(grid, x)
    return st.weights @ grid.node_values[st.nodes]


def q_value(grid: UniformGridQ, x, a: int) -> float:
    return float(q_values(grid, x)[a])


class GridTrace(dict):
    """Sparse accumulating trace keyed by ``(node, action)``."""


def trace_step(trace: GridTrace, st: InterpWeights, a: int, lam: float, gamma: float) -> None:
    """Decay every entry by ``lam * gamma`` (pruning tiny ones), then add the stencil weights at ``a``."""
    f = lam * gamma
    for key in list(trace):
        v = trace[key] * f
        if v < TRACE_FLOOR:
            del trace[key]
        else:
            trace[key] = v
    for node, w in zip(st.nodes.tolist(), st.weights.tolist()):
        key = (node, a)
        trace[key] = trace.get(key, 0.0) + w


def apply_td_update(grid: UniformGridQ, trace: GridTrace, delta: float, alpha: float) -> None:
    step = alpha * delta
    vals = grid.node_values
    for (node, a), e in trace.items():
        vals[node, a] += step * e


def grid_episode_update(grid: UniformGridQ, states, actions, rewards, final_state, absorbed: bool,
                        *, lam: float, gamma: float, alpha: float, target=None) -> None:
    """Online Q(lambda) pass over one episode, updating ``grid`` in place.

    ``target`` maps a point to a target action distribution (evaluation); when it
    is None the greedy target of the current interpolated values is used (control).
    Expectations are taken over interpolated action values.
    """
    trace = GridTrace()
    T = len(actions)
    for t in range(T):
        x, a, r = states[t], int(actions[t]), rewards[t]
        xn = states[t + 1] if t + 1 < T else final_state
        st = stencil(grid, x)
        trace_step(trace, st, a, lam, gamma)
        qx = st.weights @ grid.node_values[st.nodes]
        if t + 1 == T and absorbed:
            nxt = 0.0
        else:
            qn = q_values(grid, xn)
            nxt = qn.max() if target is None else target(xn) @ qn
        delta = float(r + gamma * nxt - qx[a])
        apply_td_update(grid, trace, delta, alpha)
