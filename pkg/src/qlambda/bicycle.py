"""Randløv–Alstrøm bicycle: balance the bike and ride it to a goal.

The physical state is a packed float vector (tilt, handlebar, heading, wheel
contact points and goal position).  Agents observe six variables
``(omega, omega_dot, theta, theta_dot, psi, dist_goal)`` where ``psi`` is the
signed angle between the bike's heading and the direction of the goal.

Learning runs inside a numba kernel that owns one whole episode: multilinear
Q over a uniform grid, epsilon-greedy behaviour, one-step max targets and
stencil-weighted accumulating traces kept on an active list.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit

from .grid import UniformGridQ, _interp_row, _stencil, q_values
from .mdp import ContractError
from .td import TRACE_FLOOR, StepSchedule

__all__ = [
    "BicycleConfig",
    "BicycleState",
    "BicycleAction",
    "ACTIONS",
    "LIVE",
    "FALLEN",
    "GOAL",
    "reset",
    "step",
    "observation_bounds",
    "make_grid",
    "goal_rate",
    "run_episode",
    "BicycleRun",
    "train_bicycle",
    "write_episode_log",
]

LIVE, FALLEN, GOAL = 0, 1, 2
_STATUS = {LIVE: "live", FALLEN: "fallen", GOAL: "goal"}

# packed state layout
OMEGA, OMEGA_D, THETA, THETA_D, HEADING, XF, YF, XB, YB, GX, GY = range(11)
_N_PHYS = 11


@dataclass(frozen=True)
class BicycleAction:
    torque: float
    displacement: float


ACTIONS = tuple(BicycleAction(t, d) for t in (-2.0, 0.0, 2.0) for d in (-0.02, 0.0, 0.02))


@dataclass(frozen=True)
class BicycleConfig:
    """Physical constants and task settings (SI units)."""

    dt: float = 0.01
    speed: float = 10.0 / 3.6
    g: float = 9.82
    d_cm: float = 0.3
    c: float = 0.66
    h: float = 0.94
    m_cyc: float = 15.0
    m_tyre: float = 1.7
    m_person: float = 60.0
    radius: float = 0.34
    wheelbase: float = 1.11
    theta_limit: float = 1.3963
    noise: float = 0.02
    fall_angle: float = math.pi / 15
    goal_distance: float = 1000.0
    goal_radius: float = 10.0
    max_steps: int = 50_000
    shaping: float = 0.01
    jitter: float = 0.002
    goal_heading_range: float = math.pi

    def __post_init__(self):
        if self.max_steps < 1:
            raise ContractError("max_steps must be positive")
        if self.goal_distance <= self.goal_radius:
            raise ContractError("goal must start outside the goal radius")

    @classmethod
    def desk(cls, **overrides) -> "BicycleConfig":
        """Short task for minute-scale runs: goal 30 m away within +-22.5 degrees of the start heading."""
        return cls(**{"goal_distance": 30.0, "goal_heading_range": math.pi / 8, "max_steps": 3000, **overrides})

    def packed(self) -> np.ndarray:
        m = self.m_cyc + self.m_person
        sigma_dot = self.speed / self.radius
        i_bike = 13.0 / 3.0 * self.m_cyc * self.h**2 + self.m_person * (self.h + self.d_cm) ** 2
        i_dc = self.m_tyre * self.radius**2
        i_dv = 1.5 * self.m_tyre * self.radius**2
        i_dl = 0.5 * self.m_tyre * self.radius**2
        return np.array([
            self.dt, self.speed, self.g, self.c, self.h, m, self.m_tyre, self.radius, self.wheelbase,
            sigma_dot, i_bike, i_dc, i_dv, i_dl, self.theta_limit, self.noise, self.fall_angle,
            self.goal_radius, self.shaping,
        ])


_P_DT, _P_V, _P_G, _P_C, _P_H, _P_M, _P_MD, _P_R, _P_L = range(9)
_P_SIGMA_D, _P_IBIKE, _P_IDC, _P_IDV, _P_IDL, _P_THLIM, _P_NOISE, _P_FALL, _P_GOALR, _P_SHAPE = range(9, 19)


@njit(cache=True)
def _sign(v):
    return 1.0 if v > 0 else (-1.0 if v < 0 else 0.0)


@njit(cache=True)
def _psi_goal(s):
    hx, hy = s[XF] - s[XB], s[YF] - s[YB]
    gx, gy = s[GX] - s[XB], s[GY] - s[YB]
    return math.atan2(hx * gy - hy * gx, hx * gx + hy * gy)


@njit(cache=True)
def _dist_goal(s):
    return math.hypot(s[GX] - s[XF], s[GY] - s[YF])


@njit(cache=True)
def _observe(s, out):
    out[0] = s[OMEGA]
    out[1] = s[OMEGA_D]
    out[2] = s[THETA]
    out[3] = s[THETA_D]
    out[4] = _psi_goal(s)
    out[5] = _dist_goal(s)


@njit(cache=True)
def _physics(s, torque, disp, u_noise, p):
    dt, v, l = p[_P_DT], p[_P_V], p[_P_L]
    d = disp + p[_P_NOISE] * (2.0 * u_noise - 1.0)
    omega, omega_d, theta, theta_d = s[OMEGA], s[OMEGA_D], s[THETA], s[THETA_D]
    if theta == 0.0:
        inv_rf = inv_rb = inv_rcm = 0.0
    else:
        inv_rcm = 1.0 / math.sqrt((l - p[_P_C]) ** 2 + l * l / math.tan(theta) ** 2)
        inv_rf = abs(math.sin(theta)) / l
        inv_rb = abs(math.tan(theta)) / l
    phi = omega + math.atan(d / p[_P_H])
    omega_dd = (p[_P_M] * p[_P_H] * p[_P_G] * math.sin(phi)
                - math.cos(phi) * (p[_P_IDC] * p[_P_SIGMA_D] * theta_d
                                   + _sign(theta) * v * v * (p[_P_MD] * p[_P_R] * (inv_rf + inv_rb)
                                                             + p[_P_M] * p[_P_H] * inv_rcm))) / p[_P_IBIKE]
    theta_dd = (torque - p[_P_IDV] * omega_d * p[_P_SIGMA_D]) / p[_P_IDL]
    omega_d += omega_dd * dt
    omega += omega_d * dt
    theta_d += theta_dd * dt
    theta += theta_d * dt
    if abs(theta) > p[_P_THLIM]:
        theta = _sign(theta) * p[_P_THLIM]
    psi = s[HEADING]
    # front and back contact points move along their own turning circles
    tmp = v * dt * inv_rf / 2.0
    tmp = _sign(psi + theta) * (math.pi / 2 if tmp > 1.0 else math.asin(tmp))
    s[XF] += v * dt * -math.sin(psi + theta + tmp)
    s[YF] += v * dt * math.cos(psi + theta + tmp)
    tmp = v * dt * inv_rb / 2.0
    tmp = _sign(psi) * (math.pi / 2 if tmp > 1.0 else math.asin(tmp))
    s[XB] += v * dt * -math.sin(psi + tmp)
    s[YB] += v * dt * math.cos(psi + tmp)
    # keep the wheelbase from drifting through round-off
    length = math.hypot(s[XF] - s[XB], s[YF] - s[YB])
    if abs(length - l) > 0.01:
        s[XB] += (s[XB] - s[XF]) * (l - length) / length
        s[YB] += (s[YB] - s[YF]) * (l - length) / length
    s[HEADING] = math.atan2(s[XB] - s[XF], s[YF] - s[YB])
    s[OMEGA], s[OMEGA_D], s[THETA], s[THETA_D] = omega, omega_d, theta, theta_d


@njit(cache=True)
def _advance(s, a, u_noise, p):
    """One control step in place; returns (reward, status)."""
    before = abs(_psi_goal(s))
    torque = 2.0 * (a // 3) - 2.0
    disp = 0.02 * (a % 3) - 0.02
    _physics(s, torque, disp, u_noise, p)
    if abs(s[OMEGA]) > p[_P_FALL]:
        return -1.0, FALLEN
    if _dist_goal(s) < p[_P_GOALR]:
        return 1.0, GOAL
    return p[_P_SHAPE] * (before - abs(_psi_goal(s))), LIVE


@njit(cache=True)
def _argmax(q):
    best = 0
    for i in range(1, q.shape[0]):
        if q[i] > q[best]:
            best = i
    return best


@njit(cache=True)
def _episode(values, low, inv_h, res, strides, s, p, rng, max_steps, epsilon, lam, gamma, alpha, learn,
             trace, active, floor):
    """Run one episode from state ``s`` (modified in place).

    Returns (steps, status, max |value| touched).
    """
    n_actions = values.shape[1]
    d = low.shape[0]
    corners = 1 << d
    obs = np.empty(d)
    nodes = np.empty(corners, dtype=np.int64)
    weights = np.empty(corners)
    nodes_n = np.empty(corners, dtype=np.int64)
    weights_n = np.empty(corners)
    qv = np.empty(n_actions)
    qn = np.empty(n_actions)
    flat = values.reshape(-1)
    n_active = 0
    decay = lam * gamma
    peak = 0.0
    _observe(s, obs)
    k = _stencil(obs, low, inv_h, res, strides, nodes, weights)
    status = LIVE
    t = 0
    while t < max_steps:
        _interp_row(values, nodes, weights, k, qv)
        if epsilon > 0.0 and rng.random() < epsilon:
            a = rng.integers(0, n_actions)
        else:
            a = _argmax(qv)
        r, status = _advance(s, a, rng.random(), p)
        t += 1
        if status == LIVE:
            _observe(s, obs)
            kn = _stencil(obs, low, inv_h, res, strides, nodes_n, weights_n)
        else:
            kn = 0
        if learn:
            if status == LIVE:
                _interp_row(values, nodes_n, weights_n, kn, qn)
                nxt = qn.max()
            else:
                nxt = 0.0
            delta = r + gamma * nxt - qv[a]
            # decay, prune, then add stencil weights at the taken action
            i = 0
            while i < n_active:
                idx = active[i]
                e = trace[idx] * decay
                if e < floor:
                    trace[idx] = 0.0
                    n_active -= 1
                    active[i] = active[n_active]
                else:
                    trace[idx] = e
                    i += 1
            for j in range(k):
                idx = nodes[j] * n_actions + a
                if trace[idx] == 0.0:
                    active[n_active] = idx
                    n_active += 1
                trace[idx] += weights[j]
            stp = alpha * delta
            for i in range(n_active):
                idx = active[i]
                flat[idx] += stp * trace[idx]
                m = abs(flat[idx])
                if not m <= peak:
                    peak = m
        if status != LIVE:
            break
        nodes, nodes_n = nodes_n, nodes
        weights, weights_n = weights_n, weights
        k = kn
    for i in range(n_active):
        trace[active[i]] = 0.0
    return t, status, peak


@dataclass
class BicycleState:
    """Full simulator state; the observed variables are exposed as properties."""

    raw: np.ndarray
    status: int = LIVE

    @property
    def omega(self) -> float:
        return float(self.raw[OMEGA])

    @property
    def omega_dot(self) -> float:
        return float(self.raw[OMEGA_D])

    @property
    def theta(self) -> float:
        return float(self.raw[THETA])

    @property
    def theta_dot(self) -> float:
        return float(self.raw[THETA_D])

    @property
    def psi(self) -> float:
        return float(_psi_goal(self.raw))

    @property
    def dist_goal(self) -> float:
        return float(_dist_goal(self.raw))

    @property
    def terminal(self) -> bool:
        return self.status != LIVE

    def observation(self) -> np.ndarray:
        out = np.empty(6)
        _observe(self.raw, out)
        return out


def reset(rng: np.random.Generator, config: BicycleConfig = BicycleConfig()) -> BicycleState:
    """Upright start at the origin heading +y, goal at ``goal_distance`` in a random direction."""
    s = np.zeros(_N_PHYS)
    j = config.jitter
    s[[OMEGA, OMEGA_D, THETA, THETA_D]] = rng.uniform(-j, j, size=4) if j > 0 else 0.0
    s[YF] = config.wheelbase
    phi = rng.uniform(-config.goal_heading_range, config.goal_heading_range)
    s[GX] = -config.goal_distance * math.sin(phi)
    s[GY] = config.goal_distance * math.cos(phi)
    return BicycleState(s)


def step(state: BicycleState, action, rng: np.random.Generator | None,
         config: BicycleConfig = BicycleConfig()) -> tuple[BicycleState, float, bool]:
    """Advance one ``dt``; ``rng=None`` disables the displacement noise."""
    if state.terminal:
        raise ContractError(f"cannot step a {_STATUS[state.status]} state")
    a = ACTIONS.index(action) if isinstance(action, BicycleAction) else int(action)
    if not 0 <= a < len(ACTIONS):
        raise ContractError(f"action index {a} out of range")
    s = state.raw.copy()
    u = 0.5 if rng is None else rng.random()
    r, status = _advance(s, a, u, config.packed())
    return BicycleState(s, status), float(r), status != LIVE


def observation_bounds(config: BicycleConfig = BicycleConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Grid box for the six observed variables (values outside are clipped)."""
    hi = np.array([config.fall_angle, 1.0, config.theta_limit, 4.0, math.pi, config.goal_distance + config.goal_radius])
    lo = -hi
    lo[5] = 0.0
    return lo, hi


def make_grid(resolution=10, config: BicycleConfig = BicycleConfig()) -> UniformGridQ:
    lo, hi = observation_bounds(config)
    return UniformGridQ(lo, hi, resolution, len(ACTIONS))


class _Kernel:
    """Scratch buffers shared by successive episodes on one grid."""

    def __init__(self, grid: UniformGridQ, config: BicycleConfig):
        self.grid, self.config = grid, config
        self.p = config.packed()
        self.trace = np.zeros(grid.node_values.size)
        self.active = np.empty(grid.node_values.size, dtype=np.int64)

    def run(self, state, rng, epsilon, lam=0.0, gamma=0.99, alpha=0.0, learn=False):
        g = self.grid
        return _episode(g.node_values, g.low, g.inv_h, g.resolution, g.strides, state.raw, self.p, rng,
                        self.config.max_steps, epsilon, lam, gamma, alpha, learn, self.trace, self.active, TRACE_FLOOR)


def run_episode(grid: UniformGridQ, rng: np.random.Generator, config: BicycleConfig = BicycleConfig(), *,
                epsilon=0.0, lam=0.0, gamma=0.99, alpha=0.0, learn=False) -> tuple[int, int]:
    """One episode from a fresh reset; returns (steps, status)."""
    state = reset(rng, config)
    t, status, _ = _Kernel(grid, config).run(state, rng, epsilon, lam, gamma, alpha, learn)
    return int(t), int(status)


def goal_rate(policy_q: UniformGridQ, n_episodes: int, rng: np.random.Generator,
              config: BicycleConfig = BicycleConfig()) -> float:
    """Fraction of greedy episodes (no exploration, no learning) that reach the goal."""
    if n_episodes < 1:
        raise ContractError("n_episodes must be positive")
    kern = _Kernel(policy_q, config)
    hits = 0
    for _ in range(n_episodes):
        _, status, _ = kern.run(reset(rng, config), rng, 0.0)
        hits += status == GOAL
    return hits / n_episodes


@dataclass
class BicycleRun:
    grid: UniformGridQ
    episode_steps: np.ndarray
    episode_status: np.ndarray
    eval_episodes: list = field(default_factory=list)
    eval_rates: list = field(default_factory=list)
    diverged: bool = False
    episodes_run: int = 0
    meta: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("# " + ",".join(f"{k}={v!r}" for k, v in self.meta.items()) + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["episodes", "goal_rate"])
            for e, r in zip(self.eval_episodes, self.eval_rates):
                w.writerow([e, repr(float(r))])


def train_bicycle(*, lam: float, epsilon: float, episodes: int, grid_res=10, gamma: float = 0.99,
                  step_size=None, seed: int = 0, config: BicycleConfig = BicycleConfig(),
                  eval_every: int = 0, eval_episodes: int = 20, divergence_factor: float = 100.0,
                  grid: UniformGridQ | None = None) -> BicycleRun:
    """Online Q*(lambda) control with an epsilon-greedy behaviour policy.

    The target is greedy with respect to the current interpolated values at
    every step.  ``step_size`` maps the episode index to alpha.
    """
    if not 0.0 <= lam <= 1.0 or not 0.0 <= epsilon <= 1.0:
        raise ContractError("lambda and epsilon must lie in [0, 1]")
    sched = step_size or StepSchedule(0.1, 1e-3)
    grid = grid or make_grid(grid_res, config)
    rng = np.random.default_rng(seed)
    eval_rng = np.random.default_rng([seed, 1])
    kern = _Kernel(grid, config)
    limit = divergence_factor * 1.0 / (1.0 - gamma)
    steps = np.zeros(episodes, dtype=np.int64)
    status = np.zeros(episodes, dtype=np.int64)
    run = BicycleRun(grid, steps, status, meta={
        "lambda": lam, "epsilon": epsilon, "gamma": gamma, "seed": seed,
        "grid_res": int(np.atleast_1d(grid.resolution)[0]),
        "alpha": sched.describe() if hasattr(sched, "describe") else "custom", **asdict(config)})
    for k in range(episodes):
        t, st, peak = kern.run(reset(rng, config), rng, epsilon, lam, gamma, sched(k), True)
        steps[k], status[k] = t, st
        run.episodes_run = k + 1
        if not peak <= limit:
            run.diverged = True
            break
        if eval_every and (k + 1) % eval_every == 0:
            run.eval_episodes.append(k + 1)
            run.eval_rates.append(goal_rate(grid, eval_episodes, eval_rng, config))
    run.episode_steps, run.episode_status = steps[: run.episodes_run], status[: run.episodes_run]
    return run


def write_episode_log(path, grid: UniformGridQ, rng: np.random.Generator,
                      config: BicycleConfig = BicycleConfig(), epsilon: float = 0.0) -> int:
    """Roll out one epsilon-greedy episode and log every step as CSV; returns its length."""
    state = reset(rng, config)
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "omega", "omega_dot", "theta", "theta_dot", "psi", "dist_goal", "action", "reward"])
        while not state.terminal and n < config.max_steps:
            obs = state.observation()
            if rng.random() < epsilon:
                a = int(rng.integers(len(ACTIONS)))
            else:
                a = int(np.argmax(q_values(grid, obs)))
            state, r, _ = step(state, a, rng, config)
            w.writerow([n, *map(repr, obs.tolist()), a, repr(r)])
            n += 1
    return n
