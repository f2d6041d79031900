"""Finite MDPs, policies, exact reference solvers and trajectory sampling.

Q-functions are plain ``(n_states, n_actions)`` float arrays throughout the
package. Policies wrap a row-stochastic ``(n_states, n_actions)`` table.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

__all__ = [
    "ContractError",
    "Mdp",
    "Policy",
    "Trajectory",
    "apply_p_pi",
    "bellman_pi",
    "bellman_opt",
    "exact_q_pi",
    "exact_q_star",
    "greedy_policy",
    "epsilon_greedy",
    "uniform_policy",
    "policy_distance",
    "mixture_policy",
    "random_mdp",
    "sample_episode",
    "transition_matrix",
    "two_state_chain",
    "gridworld",
    "gridworld_path_policy",
    "distance_mixture",
]

_ROW_TOL = 1e-12


class ContractError(ValueError):
    """Raised when an operation's preconditions are violated."""


@dataclass(frozen=True, eq=False)
class Mdp:
    """Finite discounted MDP with state-action rewards.

    ``transition[x, a]`` is the distribution of the next state and
    ``reward[x, a]`` the (deterministic) reward of taking ``a`` in ``x``.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    absorbing: frozenset = frozenset()
    r_max: float | None = None

    def __post_init__(self):
        p = np.array(self.transition, dtype=float)
        r = np.array(self.reward, dtype=float)
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise ContractError(f"transition must have shape (S, A, S), got {p.shape}")
        if r.shape != p.shape[:2]:
            raise ContractError(f"reward shape {r.shape} does not match transition {p.shape}")
        if not 0.0 <= self.gamma < 1.0:
            raise ContractError(f"gamma must lie in [0, 1), got {self.gamma}")
        if np.any(p < 0) or np.max(np.abs(p.sum(axis=2) - 1.0)) > _ROW_TOL:
            raise ContractError("transition rows must be probability vectors")
        if not np.all(np.isfinite(r)):
            raise ContractError("rewards must be finite")
        absorbing = frozenset(int(x) for x in self.absorbing)
        for x in absorbing:
            if not 0 <= x < p.shape[0]:
                raise ContractError(f"absorbing state {x} out of range")
            if np.any(p[x, :, x] != 1.0) or np.any(r[x] != 0.0):
                raise ContractError(f"absorbing state {x} must self-loop with zero reward")
        r_max = float(np.max(np.abs(r))) if self.r_max is None else float(self.r_max)
        if self.r_max is None and r_max == 0.0:
            r_max = 1.0
        if r_max <= 0 or np.max(np.abs(r)) > r_max:
            raise ContractError(f"|reward| exceeds r_max={r_max}")
        p.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "absorbing", absorbing)
        object.__setattr__(self, "r_max", r_max)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def value_bound(self) -> float:
        """Sup-norm bound ``r_max / (1 - gamma)`` on every Q-function of interest."""
        return self.r_max / (1.0 - self.gamma)

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "r_max": self.r_max,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "absorbing": sorted(self.absorbing),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mdp":
        mdp = cls(
            transition=np.asarray(d["transition"], dtype=float),
            reward=np.asarray(d["reward"], dtype=float),
            gamma=d["gamma"],
            absorbing=frozenset(d.get("absorbing", ())),
            r_max=d.get("r_max"),
        )
        if (mdp.n_states, mdp.n_actions) != (d.get("n_states", mdp.n_states), d.get("n_actions", mdp.n_actions)):
            raise ContractError("declared n_states/n_actions disagree with the arrays")
        return mdp

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "Mdp":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_gamma(self, gamma: float) -> "Mdp":
        return Mdp(self.transition, self.reward, gamma, self.absorbing, self.r_max)


@dataclass(frozen=True, eq=False)
class Policy:
    """Stochastic policy as a row-stochastic state x action table."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 2:
            raise ContractError(f"policy table must be 2-D, got shape {p.shape}")
        if np.any(p < 0) or np.max(np.abs(p.sum(axis=1) - 1.0)) > _ROW_TOL:
            raise ContractError("policy rows must be probability vectors")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    def expect(self, q: np.ndarray) -> np.ndarray:
        """Per-state expectation ``sum_a pi(a|x) q(x, a)``."""
        return np.einsum("xa,xa->x", self.probs, q)

    def __eq__(self, other):
        return isinstance(other, Policy) and np.array_equal(self.probs, other.probs)

    __hash__ = None


PolicyLike = Union[Policy, np.ndarray]


def _probs(pi: PolicyLike) -> np.ndarray:
    return pi.probs if isinstance(pi, Policy) else np.asarray(pi, dtype=float)


@dataclass
class Trajectory:
    """One sampled episode.

    ``steps`` holds ``(x_t, a_t, r_t)`` triples. ``terminal_state`` is the state
    reached after the last step; ``terminal_action`` is an action drawn there from
    the behavior policy (needed by sampled-bootstrap methods when the episode was
    cut by the step cap rather than by absorption).
    """

    steps: list
    terminal_state: int
    terminal_action: int = 0
    absorbed: bool = False

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def states(self) -> np.ndarray:
        return np.array([s[0] for s in self.steps], dtype=int)

    @property
    def actions(self) -> np.ndarray:
        return np.array([s[1] for s in self.steps], dtype=int)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([s[2] for s in self.steps], dtype=float)


def _check_q(mdp: Mdp, q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (mdp.n_states, mdp.n_actions):
        raise ContractError(f"Q shape {q.shape} does not match MDP {(mdp.n_states, mdp.n_actions)}")
    return q


def _check_pi(mdp: Mdp, pi: PolicyLike) -> np.ndarray:
    p = _probs(pi)
    if p.shape != (mdp.n_states, mdp.n_actions):
        raise ContractError(f"policy shape {p.shape} does not match MDP {(mdp.n_states, mdp.n_actions)}")
    return p


def apply_p_pi(mdp: Mdp, pi: PolicyLike, q: np.ndarray) -> np.ndarray:
    """``(P^pi q)(x, a) = sum_{x', a'} P(x'|x, a) pi(a'|x') q(x', a')``."""
    q = _check_q(mdp, q)
    p = _check_pi(mdp, pi)
    v = np.einsum("ya,ya->y", p, q)
    return mdp.transition @ v


def bellman_pi(mdp: Mdp, pi: PolicyLike, q: np.ndarray) -> np.ndarray:
    return mdp.reward + mdp.gamma * apply_p_pi(mdp, pi, q)


def bellman_opt(mdp: Mdp, q: np.ndarray) -> np.ndarray:
    q = _check_q(mdp, q)
    return mdp.reward + mdp.gamma * (mdp.transition @ q.max(axis=1))


def transition_matrix(mdp: Mdp, pi: PolicyLike) -> np.ndarray:
    """Dense state-action matrix of ``P^pi`` with row index ``x * A + a``."""
    p = _check_pi(mdp, pi)
    s, a = mdp.n_states, mdp.n_actions
    return np.einsum("xay,yb->xayb", mdp.transition, p).reshape(s * a, s * a)


def exact_q_pi(mdp: Mdp, pi: PolicyLike) -> np.ndarray:
    """Solve ``(I - gamma P^pi) Q = r`` by LU factorisation."""
    n = mdp.n_states * mdp.n_actions
    m = np.eye(n) - mdp.gamma * transition_matrix(mdp, pi)
    q = np.linalg.solve(m, mdp.reward.reshape(n)).reshape(mdp.n_states, mdp.n_actions)
    resid = np.max(np.abs(bellman_pi(mdp, pi, q) - q))
    if not np.isfinite(resid) or resid > 1e-10 * max(1.0, mdp.value_bound):
        raise RuntimeError(f"policy evaluation solve is inaccurate (residual {resid:.3e})")
    return q


def exact_q_star(mdp: Mdp, tol: float = 1e-10, max_iter: int = 1_000_000) -> np.ndarray:
    """Optimal Q-function by value iteration, polished by one policy evaluation.

    Value iteration stops once ``||T Q - Q|| <= tol (1 - gamma) / (2 gamma)``,
    which guarantees ``||Q - Q*|| <= tol``. The greedy policy of that iterate is
    then evaluated exactly; when its value has a smaller Bellman residual it is
    returned instead (it then equals Q* up to round-off).
    """
    q = np.zeros((mdp.n_states, mdp.n_actions))
    if mdp.gamma == 0.0:
        return mdp.reward.copy()
    stop = tol * (1.0 - mdp.gamma) / (2.0 * mdp.gamma)
    for _ in range(max_iter):
        tq = bellman_opt(mdp, q)
        gap = np.max(np.abs(tq - q))
        q = tq
        if gap <= stop:
            break
    polished = exact_q_pi(mdp, greedy_policy(q))
    if np.max(np.abs(bellman_opt(mdp, polished) - polished)) <= np.max(np.abs(bellman_opt(mdp, q) - q)):
        return polished
    return q


def greedy_policy(q: np.ndarray) -> Policy:
    """Deterministic greedy policy; ties go to the lowest action index."""
    q = np.asarray(q, dtype=float)
    probs = np.zeros_like(q)
    probs[np.arange(q.shape[0]), np.argmax(q, axis=1)] = 1.0
    return Policy(probs)


def uniform_policy(n_states: int, n_actions: int) -> Policy:
    return Policy(np.full((n_states, n_actions), 1.0 / n_actions))


def epsilon_greedy(q: np.ndarray, e: float) -> Policy:
    """``1 - e + e/|A|`` on the greedy action, ``e/|A|`` on the others."""
    if not 0.0 <= e <= 1.0:
        raise ContractError(f"exploration rate must lie in [0, 1], got {e}")
    q = np.asarray(q, dtype=float)
    n_actions = q.shape[1]
    probs = np.full(q.shape, e / n_actions)
    probs[np.arange(q.shape[0]), np.argmax(q, axis=1)] += 1.0 - e
    return Policy(probs)


def mixture_policy(pi: PolicyLike, other: PolicyLike, weight: float) -> Policy:
    """``(1 - weight) pi + weight other``."""
    if not 0.0 <= weight <= 1.0:
        raise ContractError(f"mixture weight must lie in [0, 1], got {weight}")
    return Policy((1.0 - weight) * _probs(pi) + weight * _probs(other))


def policy_distance(pi: PolicyLike, mu: PolicyLike) -> float:
    """``max_x ||pi(.|x) - mu(.|x)||_1``, a value in [0, 2]."""
    a, b = _probs(pi), _probs(mu)
    if a.shape != b.shape:
        raise ContractError(f"policy shapes differ: {a.shape} vs {b.shape}")
    return float(np.max(np.sum(np.abs(a - b), axis=1)))


def random_mdp(
    n_states: int,
    n_actions: int,
    branching: int = 2,
    reward_sparsity: float = 0.5,
    seed=None,
    gamma: float = 0.9,
    n_absorbing: int = 0,
) -> Mdp:
    """Garnet-style random MDP.

    Every non-absorbing pair moves to ``branching`` distinct states drawn uniformly,
    with Dirichlet(1, ..., 1) weights. A fraction ``reward_sparsity`` of the pairs
    get zero reward; the rest are uniform on [-1, 1]. The last ``n_absorbing``
    states are absorbing.
    """
    if not 1 <= branching <= n_states:
        raise ContractError(f"branching must lie in [1, n_states={n_states}], got {branching}")
    if not 0.0 <= reward_sparsity <= 1.0:
        raise ContractError("reward_sparsity must lie in [0, 1]")
    if not 0 <= n_absorbing < n_states:
        raise ContractError("need at least one non-absorbing state")
    rng = np.random.default_rng(seed)
    p = np.zeros((n_states, n_actions, n_states))
    for x in range(n_states):
        for a in range(n_actions):
            succ = rng.choice(n_states, size=branching, replace=False)
            p[x, a, succ] = rng.dirichlet(np.ones(branching))
    # renormalise so rows sum to 1 to the last ulp
    p /= p.sum(axis=2, keepdims=True)
    r = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    r[rng.random((n_states, n_actions)) < reward_sparsity] = 0.0
    absorbing = range(n_states - n_absorbing, n_states)
    for x in absorbing:
        p[x] = 0.0
        p[x, :, x] = 1.0
        r[x] = 0.0
    return Mdp(p, r, gamma, frozenset(absorbing), r_max=1.0)


def _categorical(rng: np.random.Generator, probs: np.ndarray) -> int:
    # inverse-CDF draw; much cheaper than Generator.choice for a single sample
    c = np.cumsum(probs)
    return min(int(np.searchsorted(c, rng.random() * c[-1], side="right")), len(probs) - 1)


def sample_episode(
    mdp: Mdp,
    mu: PolicyLike,
    start: int,
    rng: np.random.Generator,
    max_steps: int = 1000,
    start_action: int | None = None,
) -> Trajectory:
    """Roll out ``mu`` from ``start`` until an absorbing state or ``max_steps``.

    ``start_action`` fixes ``a_0`` (exploring starts).
    """
    if max_steps < 1:
        raise ContractError("max_steps must be at least 1")
    p = _check_pi(mdp, mu)
    x = int(start)
    steps = []
    absorbed = False
    a = int(start_action) if start_action is not None else _categorical(rng, p[x])
    for _ in range(max_steps):
        r = float(mdp.reward[x, a])
        nxt = _categorical(rng, mdp.transition[x, a])
        steps.append((x, a, r))
        x = nxt
        a = _categorical(rng, p[x])
        if x in mdp.absorbing:
            absorbed = True
            break
    return Trajectory(steps=steps, terminal_state=x, terminal_action=a, absorbed=absorbed)


def two_state_chain(gamma: float = 0.5) -> Mdp:
    """Action 0 moves to state 0 with reward 0, action 1 to state 1 with reward 1."""
    p = np.zeros((2, 2, 2))
    p[:, 0, 0] = 1.0
    p[:, 1, 1] = 1.0
    r = np.array([[0.0, 1.0], [0.0, 1.0]])
    return Mdp(p, r, gamma, r_max=1.0)


def gridworld(size: int = 5, slip: float = 0.1, gamma: float = 0.9, goal_reward: float = 1.0) -> Mdp:
    """``size x size`` grid; actions up/right/down/left; absorbing goal in the far corner.

    A move succeeds with probability ``1 - slip``; otherwise a uniformly random
    direction is taken. Bumping a wall leaves the agent in place. The reward of a
    pair is the expected reward of entering the goal.
    """
    n = size * size
    goal = n - 1
    moves = [(-1, 0), (0, 1), (1, 0), (0, -1)]

    def target(x, m):
        i, j = divmod(x, size)
        di, dj = moves[m]
        ni, nj = i + di, j + dj
        if 0 <= ni < size and 0 <= nj < size:
            return ni * size + nj
        return x

    p = np.zeros((n, 4, n))
    for x in range(n):
        for a in range(4):
            if x == goal:
                p[x, a, x] = 1.0
                continue
            p[x, a, target(x, a)] += 1.0 - slip
            for m in range(4):
                p[x, a, target(x, m)] += slip / 4
    r = goal_reward * p[:, :, goal].copy()
    r[goal] = 0.0
    return Mdp(p, r, gamma, frozenset({goal}), r_max=abs(goal_reward))


def gridworld_path_policy(size: int = 5) -> Policy:
    """Deterministic route to the goal corner: move right along the upper triangle, else down."""
    probs = np.zeros((size * size, 4))
    for x in range(size * size):
        i, j = divmod(x, size)
        probs[x, 1 if j < size - 1 and (j <= i or i == size - 1) else 2] = 1.0
    return Policy(probs)


def distance_mixture(pi: PolicyLike, epsilon: float) -> Policy:
    """``(1 - eps/2) pi + (eps/2) delta`` with ``delta`` on each state's least likely action.

    For a deterministic ``pi`` the result lies at L1 distance exactly ``eps``.
    """
    if not 0.0 <= epsilon <= 2.0:
        raise ContractError(f"epsilon must lie in [0, 2], got {epsilon}")
    p = _probs(pi)
    other = np.zeros_like(p)
    other[np.arange(p.shape[0]), np.argmin(p, axis=1)] = 1.0
    return mixture_policy(p, other, epsilon / 2)
