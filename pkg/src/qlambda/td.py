"""Sample-based eligibility-trace learners for the Q(lambda) family.

One backward-view routine (:func:`episode_update`) covers nine update rules that
differ only in their one-step TD error, their per-step trace coefficient and an
optional first-step correction. :func:`forward_view_episode` computes the same
offline update by explicit double summation and is used to check the backward
view.
"""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .mdp import (
    ContractError,
    Mdp,
    Policy,
    Trajectory,
    epsilon_greedy,
    greedy_policy,
    policy_distance,
    sample_episode,
)

__all__ = [
    "AlgorithmKind",
    "UndefinedRatioError",
    "GREEDY",
    "EpsGreedy",
    "StepSchedule",
    "LearnerConfig",
    "LearnRun",
    "td_error",
    "trace_decay_factor",
    "first_step_correction",
    "episode_update",
    "forward_increments",
    "forward_view_episode",
    "train",
]

TRACE_FLOOR = 1e-12


class AlgorithmKind(str, enum.Enum):
    QPI = "qpi"
    QSTAR = "qstar"
    SARSA = "sarsa"
    EXPECTED_SARSA = "expected_sarsa"
    GENERAL_Q = "general_q"
    PDIS = "pdis"
    TREE_BACKUP = "tree_backup"
    WATKINS_Q = "watkins_q"
    PENG_WILLIAMS_Q = "peng_williams_q"

    @property
    def is_control(self) -> bool:
        return self in _CONTROL

    @property
    def is_on_policy(self) -> bool:
        return self in (AlgorithmKind.SARSA, AlgorithmKind.EXPECTED_SARSA)

    @property
    def needs_target(self) -> bool:
        return self in (AlgorithmKind.QPI, AlgorithmKind.GENERAL_Q, AlgorithmKind.PDIS, AlgorithmKind.TREE_BACKUP)

    @classmethod
    def parse(cls, name) -> "AlgorithmKind":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_")
        aliases = {"qlambda_pi": "qpi", "q_pi": "qpi", "q_star": "qstar", "tb": "tree_backup",
                   "watkins": "watkins_q", "peng": "peng_williams_q", "esarsa": "expected_sarsa"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ContractError(f"unknown algorithm kind {name!r}") from None


_CONTROL = frozenset({AlgorithmKind.QSTAR, AlgorithmKind.WATKINS_Q, AlgorithmKind.PENG_WILLIAMS_Q})


class UndefinedRatioError(ContractError):
    """An importance ratio was requested for an action the behavior policy never takes."""


# markers for train(): target policy greedy w.r.t. the current Q; behavior eps-greedy w.r.t. it
GREEDY = "greedy"


@dataclass(frozen=True)
class EpsGreedy:
    epsilon: float


def _p(pol):
    if pol is None:
        return None
    return pol.probs if isinstance(pol, Policy) else np.asarray(pol, dtype=float)


def _ratio(pi, mu, x, a) -> float:
    m = mu[x, a]
    if m <= 0.0:
        raise UndefinedRatioError(f"behavior probability of action {a} in state {x} is zero")
    return pi[x, a] / m


def _target_value(q, x, pi):
    """``E_pi q(x, .)``, or ``max_a q(x, a)`` when no explicit target is given."""
    if pi is None:
        return q[x].max()
    return pi[x] @ q[x]


def td_error(kind, q, x, a, r, x_next, a_next=None, pi=None, mu=None, gamma=0.99, terminal=False) -> float:
    """One-step TD error of the given update rule.

    For the control kinds ``pi`` is the interim greedy target; ``None`` means the
    max over the current ``q``. ``terminal=True`` marks ``x_next`` as a zero-value
    absorbing state.
    """
    kind = AlgorithmKind.parse(kind)
    pi, mu = _p(pi), _p(mu)
    K = AlgorithmKind
    if kind in (K.SARSA, K.PDIS) and a_next is None and not terminal:
        raise ContractError(f"{kind.value} needs the next action")
    if terminal:
        nxt = 0.0
    elif kind is K.SARSA:
        nxt = q[x_next, a_next]
    elif kind is K.PDIS:
        nxt = _ratio(pi, mu, x_next, a_next) * q[x_next, a_next]
    elif kind is K.EXPECTED_SARSA:
        nxt = mu[x_next] @ q[x_next]
    else:
        nxt = _target_value(q, x_next, pi)
    if kind is K.EXPECTED_SARSA:
        base = mu[x] @ q[x]
    elif kind is K.GENERAL_Q:
        base = pi[x] @ q[x]
    elif kind is K.PENG_WILLIAMS_Q:
        base = _target_value(q, x, pi)
    else:
        base = q[x, a]
    return float(r + gamma * nxt - base)


def first_step_correction(kind, q, x, a, pi=None, mu=None) -> float:
    """Correction added once at each visited pair by the expected-baseline rules."""
    kind = AlgorithmKind.parse(kind)
    K = AlgorithmKind
    if kind is K.EXPECTED_SARSA:
        return float(_p(mu)[x] @ q[x] - q[x, a])
    if kind is K.GENERAL_Q:
        return float(_p(pi)[x] @ q[x] - q[x, a])
    if kind is K.PENG_WILLIAMS_Q:
        return float(_target_value(q, x, _p(pi)) - q[x, a])
    return 0.0


def trace_decay_factor(kind, lam, gamma, x, a, q=None, pi=None, mu=None) -> tuple[float, bool]:
    """Multiplicative trace coefficient applied before visiting ``(x, a)``.

    Returns ``(factor, cut)``; ``cut`` is True when Watkins's rule meets a
    non-greedy action (w.r.t. ``q``), in which case the factor is 0.
    """
    kind = AlgorithmKind.parse(kind)
    K = AlgorithmKind
    base = lam * gamma
    if kind is K.TREE_BACKUP:
        return base * _p(pi)[x, a], False
    if kind is K.PDIS:
        return base * _ratio(_p(pi), _p(mu), x, a), False
    if kind is K.WATKINS_Q:
        if q[x, a] < q[x].max():
            return 0.0, True
        return base, False
    return base, False


def _validate_policies(kind, pi, mu, n_states, n_actions):
    K = AlgorithmKind
    if kind.needs_target and pi is None:
        raise ContractError(f"{kind.value} requires a target policy")
    if kind in (K.EXPECTED_SARSA, K.PDIS) and mu is None:
        raise ContractError(f"{kind.value} requires the behavior policy")
    for pol in (pi, mu):
        if pol is not None and pol.shape != (n_states, n_actions):
            raise ContractError("policy shape does not match Q")


def episode_update(q, traj: Trajectory, kind, pi=None, mu=None, *, lam: float, gamma: float,
                   alpha: float, mode: str = "online", per_step_greedy: bool = False,
                   trace: np.ndarray | None = None, trace_log: list | None = None) -> np.ndarray:
    """Backward-view update of ``q`` along one trajectory; returns the new table.

    ``mode="online"`` updates Q in place step by step (the literal backward view);
    ``mode="frozen"`` evaluates every TD error against the episode-start table and
    applies the summed increment at the end. For control kinds ``pi`` may be None,
    in which case the target is greedy w.r.t. the episode-start table, or w.r.t. the
    current table at every step when ``per_step_greedy`` is set.

    ``trace`` (optional) is zeroed and used as the eligibility buffer; ``trace_log``
    (optional) receives a copy of the trace after each step.
    """
    kind = AlgorithmKind.parse(kind)
    if mode not in ("online", "frozen"):
        raise ContractError(f"unknown update mode {mode!r}")
    q0 = np.array(q, dtype=float)
    pi, mu = _p(pi), _p(mu)
    if kind.is_on_policy and pi is None:
        pi = mu
    _validate_policies(kind, pi, mu, *q0.shape)
    frozen = mode == "frozen"
    greedy_now = kind.is_control and per_step_greedy and not frozen
    if kind.is_control and pi is None and not greedy_now:
        pi = greedy_policy(q0).probs
    target = None if greedy_now else pi
    e = np.zeros_like(q0) if trace is None else trace
    e[...] = 0.0
    cur = q0.copy()
    work = q0 if frozen else cur
    dq = np.zeros_like(q0) if frozen else None
    K = AlgorithmKind
    has_corr = kind in (K.EXPECTED_SARSA, K.GENERAL_Q, K.PENG_WILLIAMS_Q)
    steps = traj.steps
    T = len(steps)
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            x, a, r = steps[t]
            if t + 1 < T:
                xn, an = steps[t + 1][0], steps[t + 1][1]
                term = False
            else:
                xn, an = traj.terminal_state, traj.terminal_action
                term = traj.absorbed
            if t > 0:
                cut_ref = cur if greedy_now else q0
                f, cut = trace_decay_factor(kind, lam, gamma, x, a, cut_ref, pi, mu)
                if cut:
                    e[...] = 0.0
                else:
                    e *= f
                    e[e < TRACE_FLOOR] = 0.0
            e[x, a] += 1.0
            delta = td_error(kind, work, x, a, r, xn, an, target, mu, gamma, term)
            corr = first_step_correction(kind, work, x, a, target, mu) if has_corr else 0.0
            step = alpha * delta
            if frozen:
                dq += step * e
                if has_corr:
                    dq[x, a] += alpha * corr
            else:
                cur += step * e
                if has_corr:
                    cur[x, a] += alpha * corr
            if trace_log is not None:
                trace_log.append(e.copy())
    if frozen:
        return q0 + dq
    return cur


def forward_increments(q, traj: Trajectory, kind, pi=None, mu=None, *, lam: float, gamma: float) -> np.ndarray:
    """Per-visit offline increments ``Delta_s`` against the frozen table ``q``.

    ``Delta_s = sum_{t>=s} (lam gamma)^{t-s} prod_{i=s+1}^t c_i delta_t + corr_s``
    where ``c_i`` is the rule's trace coefficient (1, pi_i, rho_i or a greedy
    indicator) and ``corr_s`` the first-step correction.
    """
    kind = AlgorithmKind.parse(kind)
    q = np.asarray(q, dtype=float)
    pi, mu = _p(pi), _p(mu)
    if kind.is_on_policy and pi is None:
        pi = mu
    _validate_policies(kind, pi, mu, *q.shape)
    if kind.is_control and pi is None:
        pi = greedy_policy(q).probs
    steps = traj.steps
    T = len(steps)
    deltas = np.empty(T)
    coef = np.ones(T)
    corr = np.zeros(T)
    K = AlgorithmKind
    for t, (x, a, r) in enumerate(steps):
        if t + 1 < T:
            xn, an, term = steps[t + 1][0], steps[t + 1][1], False
        else:
            xn, an, term = traj.terminal_state, traj.terminal_action, traj.absorbed
        deltas[t] = td_error(kind, q, x, a, r, xn, an, pi, mu, gamma, term)
        corr[t] = first_step_correction(kind, q, x, a, pi, mu)
        if kind is K.TREE_BACKUP:
            coef[t] = pi[x, a]
        elif kind is K.PDIS and t > 0:
            coef[t] = _ratio(pi, mu, x, a)
        elif kind is K.WATKINS_Q:
            coef[t] = 1.0 if q[x, a] >= q[x].max() else 0.0
    out = np.empty(T)
    for s in range(T):
        total = 0.0
        w = 1.0
        for t in range(s, T):
            if t > s:
                w *= lam * gamma * coef[t]
            total += w * deltas[t]
        out[s] = total + corr[s]
    return out


def forward_view_episode(q, traj: Trajectory, kind=AlgorithmKind.QPI, pi=None, mu=None, *,
                         lam: float, gamma: float, alpha: float) -> np.ndarray:
    """Every-visit offline update: add ``alpha * Delta_s`` at every visited ``(x_s, a_s)``."""
    q = np.asarray(q, dtype=float)
    inc = forward_increments(q, traj, kind, pi, mu, lam=lam, gamma=gamma)
    out = q.copy()
    for (x, a, _), d in zip(traj.steps, inc):
        out[x, a] += alpha * d
    return out


@dataclass(frozen=True)
class StepSchedule:
    """``alpha_k = a0 / (1 + k * decay)``; ``decay = 0`` gives a constant step."""

    a0: float = 0.5
    decay: float = 1e-3

    def __post_init__(self):
        if self.a0 <= 0 or self.decay < 0:
            raise ContractError("step-size parameters must be positive")

    def __call__(self, k: int) -> float:
        return self.a0 / (1.0 + k * self.decay)

    def describe(self) -> str:
        return f"{self.a0!r}/(1+k*{self.decay!r})"


@dataclass
class LearnerConfig:
    lam: float
    step_size: StepSchedule = field(default_factory=StepSchedule)
    episodes: int = 10_000
    max_steps: int = 1000
    update_mode: str = "online"
    seed: int | None = 0
    reference_q: np.ndarray | None = None
    per_step_greedy: bool = False
    exploring_starts: bool = True
    start_state: int | None = None
    divergence_factor: float = 100.0
    q0: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ContractError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.episodes < 0 or self.max_steps < 1:
            raise ContractError("episodes must be >= 0 and max_steps >= 1")
        if self.update_mode not in ("online", "frozen"):
            raise ContractError(f"unknown update mode {self.update_mode!r}")


@dataclass
class LearnRun:
    final_q: np.ndarray
    error_curve: list
    q_norm_curve: list
    diverged: bool
    episodes_run: int
    meta: dict = field(default_factory=dict)

    @property
    def final_error(self) -> float:
        return self.error_curve[-1] if self.error_curve else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# " + ",".join(f"{k}={v}" for k, v in self.meta.items()) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["episode", "error", "q_norm", "diverged"])
        n = len(self.q_norm_curve)
        for i in range(n):
            err = repr(self.error_curve[i]) if self.error_curve else ""
            last = self.diverged and i == n - 1
            w.writerow([i + 1, err, repr(self.q_norm_curve[i]), str(last).lower()])
        return buf.getvalue()


def _start(mdp: Mdp, cfg: LearnerConfig, live: np.ndarray, rng):
    if cfg.start_state is not None:
        return cfg.start_state, None
    x = int(live[rng.integers(len(live))])
    a = int(rng.integers(mdp.n_actions)) if cfg.exploring_starts else None
    return x, a


def train(mdp: Mdp, kind, pi_spec, mu_spec, config: LearnerConfig) -> LearnRun:
    """Run the learner for ``config.episodes`` episodes on a tabular MDP.

    ``pi_spec`` is a :class:`Policy` or :data:`GREEDY` (control kinds; the greedy
    target is refreshed each episode, or each step with ``per_step_greedy``).
    ``mu_spec`` is a :class:`Policy` or :class:`EpsGreedy` (epsilon-greedy w.r.t.
    the current Q, rebuilt each episode). Divergence (non-finite values or
    ``||Q|| > factor * r_max / (1 - gamma)``) stops the run and is recorded.
    """
    kind = AlgorithmKind.parse(kind)
    if kind.is_control:
        if pi_spec not in (None, GREEDY):
            raise ContractError(f"{kind.value} derives its target greedily; pass GREEDY")
        pi_spec = GREEDY
    elif pi_spec in (None, GREEDY):
        if not kind.is_on_policy:
            raise ContractError(f"{kind.value} requires a fixed target policy")
    if kind.is_on_policy and pi_spec not in (None, GREEDY):
        same = isinstance(mu_spec, Policy) and isinstance(pi_spec, Policy) and pi_spec == mu_spec
        if not same:
            raise ContractError(f"{kind.value} is on-policy: the target must equal the behavior policy")
    if not isinstance(mu_spec, (Policy, EpsGreedy)):
        raise ContractError("behavior must be a Policy or EpsGreedy")
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    shape = (mdp.n_states, mdp.n_actions)
    q = np.zeros(shape) if cfg.q0 is None else np.array(cfg.q0, dtype=float)
    live = np.array([x for x in range(mdp.n_states) if x not in mdp.absorbing])
    limit = cfg.divergence_factor * mdp.value_bound
    errors, norms = [], []
    diverged = False
    k = 0
    fixed_mu = mu_spec if isinstance(mu_spec, Policy) else None
    eps_meta = policy_distance(pi_spec, fixed_mu) if isinstance(pi_spec, Policy) and fixed_mu else None
    for k in range(cfg.episodes):
        mu = fixed_mu if fixed_mu is not None else epsilon_greedy(q, mu_spec.epsilon)
        if pi_spec == GREEDY:
            pi = None
        elif kind.is_on_policy:
            pi = mu
        else:
            pi = pi_spec
        x0, a0 = _start(mdp, cfg, live, rng)
        traj = sample_episode(mdp, mu, x0, rng, cfg.max_steps, start_action=a0)
        q = episode_update(q, traj, kind, pi, mu, lam=cfg.lam, gamma=mdp.gamma,
                           alpha=cfg.step_size(k), mode=cfg.update_mode,
                           per_step_greedy=cfg.per_step_greedy)
        norm = float(np.max(np.abs(q)))
        norms.append(norm)
        if cfg.reference_q is not None:
            errors.append(float(np.max(np.abs(q - cfg.reference_q))))
        if not math.isfinite(norm) or norm > limit:
            diverged = True
            break
    meta = {
        "kind": kind.value, "lambda": repr(cfg.lam), "gamma": repr(mdp.gamma),
        "epsilon": repr(eps_meta) if eps_meta is not None else (
            f"eps_greedy:{mu_spec.epsilon!r}" if isinstance(mu_spec, EpsGreedy) else ""),
        "seed": cfg.seed, "alpha": cfg.step_size.describe(), "mode": cfg.update_mode,
    }
    return LearnRun(final_q=q, error_curve=errors, q_norm_curve=norms, diverged=diverged,
                    episodes_run=len(norms), meta=meta)
