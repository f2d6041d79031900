"""Matrix-form corrected-return operators, their fixed points, and contraction checks.

All operators act on dense ``(n_states, n_actions)`` Q-tables. The lambda-operators
are evaluated through the resolvent ``(I - lambda gamma P^mu)^{-1}`` with a direct
solve; the n-step operators are evaluated by explicit repeated products and serve
as an independent route to the same quantities.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .mdp import (
    ContractError,
    Mdp,
    apply_p_pi,
    bellman_opt,
    bellman_pi,
    exact_q_pi,
    exact_q_star,
    policy_distance,
    transition_matrix,
)

__all__ = [
    "OperatorReport",
    "r_corrected_mc",
    "r_n_step",
    "r_lambda",
    "r_lambda_star",
    "r_general_q",
    "general_q_fixed_point",
    "eta_eval_bound",
    "eta_control_bound",
    "lambda_max_eval",
    "lambda_max_control",
    "iterate_operator",
    "certify_contraction",
]


def _check_lambda(lam: float, gamma: float) -> None:
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda must lie in [0, 1], got {lam}")
    if lam * gamma >= 1.0:
        raise ContractError("lambda * gamma must be < 1")


def _resolvent_solve(mdp: Mdp, mu, lam: float, rhs: np.ndarray) -> np.ndarray:
    """Solve ``(I - lam gamma P^mu) y = rhs`` for a Q-shaped right-hand side."""
    n = mdp.n_states * mdp.n_actions
    m = np.eye(n) - lam * mdp.gamma * transition_matrix(mdp, mu)
    return np.linalg.solve(m, rhs.reshape(n)).reshape(rhs.shape)


def _p_mu_q(mdp, mu, q):
    return apply_p_pi(mdp, mu, q)


def r_corrected_mc(mdp: Mdp, pi, mu, q: np.ndarray, horizon_tol: float = 1e-12) -> np.ndarray:
    """Monte Carlo corrected return ``r + sum_{t>=1} gamma^t (P^mu)^{t-1}[P^mu r + P^pi q - P^mu q]``.

    The series is truncated once the remaining tail is provably below ``horizon_tol``.
    """
    q = np.asarray(q, dtype=float)
    r = mdp.reward
    g = mdp.gamma
    bracket = _p_mu_q(mdp, mu, r) + apply_p_pi(mdp, pi, q) - _p_mu_q(mdp, mu, q)
    scale = (np.max(np.abs(r)) + 2.0 * np.max(np.abs(q))) / (1.0 - g)
    out = r.copy()
    term = bracket
    gt = g
    while True:
        out = out + gt * term
        gt *= g
        if gt * scale < horizon_tol or gt == 0.0:
            return out
        term = _p_mu_q(mdp, mu, term)


def r_n_step(mdp: Mdp, pi, mu, q: np.ndarray, n: int) -> np.ndarray:
    """n-step corrected return; ``n = 0`` is the one-step Bellman backup ``T^pi q``."""
    if n < 0:
        raise ContractError(f"n must be non-negative, got {n}")
    q = np.asarray(q, dtype=float)
    g = mdp.gamma
    # E[r_t] = (P^mu)^t r, E[E_pi q(x_t)] = (P^mu)^{t-1} P^pi q, E[q(x_t, a_t)] = (P^mu)^t q
    out = mdp.reward.copy()
    pmu_r = mdp.reward
    pmu_q = q
    p_pi_q = apply_p_pi(mdp, pi, q)
    shifted_pi_q = p_pi_q
    for t in range(1, n + 1):
        pmu_r = _p_mu_q(mdp, mu, pmu_r)
        pmu_q = _p_mu_q(mdp, mu, pmu_q)
        out = out + g**t * (pmu_r + shifted_pi_q - pmu_q)
        shifted_pi_q = _p_mu_q(mdp, mu, shifted_pi_q)
    return out + g ** (n + 1) * shifted_pi_q


def r_lambda(mdp: Mdp, pi, mu, q: np.ndarray, lam: float) -> np.ndarray:
    """``q + (I - lam gamma P^mu)^{-1} (T^pi q - q)``."""
    _check_lambda(lam, mdp.gamma)
    q = np.asarray(q, dtype=float)
    return q + _resolvent_solve(mdp, mu, lam, bellman_pi(mdp, pi, q) - q)


def r_lambda_star(mdp: Mdp, mu, q: np.ndarray, lam: float) -> np.ndarray:
    """``q + (I - lam gamma P^mu)^{-1} (T q - q)`` with T the optimality operator."""
    _check_lambda(lam, mdp.gamma)
    q = np.asarray(q, dtype=float)
    return q + _resolvent_solve(mdp, mu, lam, bellman_opt(mdp, q) - q)


def r_general_q(mdp: Mdp, pi, mu, q: np.ndarray, lam: float) -> np.ndarray:
    """Expected update of General Q(lambda): ``(I - lam gamma P^mu)^{-1}[r + (1 - lam) gamma P^pi q]``."""
    _check_lambda(lam, mdp.gamma)
    q = np.asarray(q, dtype=float)
    rhs = mdp.reward + (1.0 - lam) * mdp.gamma * apply_p_pi(mdp, pi, q)
    return _resolvent_solve(mdp, mu, lam, rhs)


def general_q_fixed_point(mdp: Mdp, pi, mu, lam: float) -> np.ndarray:
    """Stable point ``(I - lam gamma (P^mu - P^pi) - gamma P^pi)^{-1} r`` of General Q(lambda)."""
    _check_lambda(lam, mdp.gamma)
    n = mdp.n_states * mdp.n_actions
    p_mu = transition_matrix(mdp, mu)
    p_pi = transition_matrix(mdp, pi)
    m = np.eye(n) - lam * mdp.gamma * (p_mu - p_pi) - mdp.gamma * p_pi
    try:
        sol = np.linalg.solve(m, mdp.reward.reshape(n))
    except np.linalg.LinAlgError as exc:
        raise RuntimeError("General Q(lambda) system is singular") from exc
    return sol.reshape(mdp.n_states, mdp.n_actions)


def eta_eval_bound(gamma: float, lam: float, epsilon: float) -> float:
    """Contraction coefficient ``gamma (1 - lam + lam eps) / (1 - lam gamma)`` of the evaluation operator."""
    if lam * gamma >= 1.0:
        raise ContractError("lambda * gamma must be < 1")
    return gamma * (1.0 - lam + lam * epsilon) / (1.0 - lam * gamma)


def eta_control_bound(gamma: float, lam: float) -> float:
    """Coefficient ``(gamma + lam gamma) / (1 - lam gamma)`` of the control operator."""
    if lam * gamma >= 1.0:
        raise ContractError("lambda * gamma must be < 1")
    return (gamma + lam * gamma) / (1.0 - lam * gamma)


def lambda_max_eval(gamma: float, epsilon: float) -> float:
    """Largest admissible trace parameter ``min(1, (1 - gamma) / (gamma eps))``."""
    if epsilon < 0:
        raise ContractError("epsilon must be non-negative")
    if epsilon == 0.0 or gamma == 0.0:
        return 1.0
    return min(1.0, (1.0 - gamma) / (gamma * epsilon))


def lambda_max_control(gamma: float) -> float:
    """``min(1, (1 - gamma) / (2 gamma))``."""
    if gamma == 0.0:
        return 1.0
    return min(1.0, (1.0 - gamma) / (2.0 * gamma))


@dataclass
class OperatorReport:
    gamma: float
    lam: float
    epsilon: float
    eta_bound: float
    eta_empirical: float
    iterations: int
    converged: bool
    final_error: float
    mode: str = "evaluation"

    CSV_HEADER = ("gamma", "lambda", "epsilon", "eta_bound", "eta_empirical", "iterations", "converged", "final_error")

    def csv_row(self) -> list:
        return [
            repr(self.gamma), repr(self.lam), repr(self.epsilon), repr(self.eta_bound),
            repr(self.eta_empirical), str(self.iterations), str(self.converged).lower(), repr(self.final_error),
        ]

    @classmethod
    def to_csv(cls, reports, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(cls.CSV_HEADER)
        for rep in reports:
            w.writerow(rep.csv_row())
        return buf.getvalue()

    @classmethod
    def from_csv_row(cls, row: dict) -> "OperatorReport":
        return cls(
            gamma=float(row["gamma"]), lam=float(row["lambda"]), epsilon=float(row["epsilon"]),
            eta_bound=float(row["eta_bound"]), eta_empirical=float(row["eta_empirical"]),
            iterations=int(row["iterations"]), converged=row["converged"] == "true",
            final_error=float(row["final_error"]),
        )


def iterate_operator(op, q0: np.ndarray, reference: np.ndarray, tol: float = 1e-8,
                     max_iter: int = 10_000, blowup: float = 1e12) -> list[float]:
    """Iterate ``q <- op(q)`` and return the sup-norm errors to ``reference``.

    The list starts with the error of ``q0`` and stops once the error is within
    ``tol``, exceeds ``blowup``, or ``max_iter`` iterations have run.
    """
    q = np.asarray(q0, dtype=float)
    errors = [float(np.max(np.abs(q - reference)))]
    for _ in range(max_iter):
        if errors[-1] <= tol or not errors[-1] < blowup:
            break
        q = op(q)
        errors.append(float(np.max(np.abs(q - reference))))
    return errors


def certify_contraction(mdp: Mdp, pi, mu, lam: float, n_pairs: int = 500, seed=None,
                        tol: float = 1e-8, max_iter: int = 10_000) -> OperatorReport:
    """Measure the sup-norm Lipschitz ratio of the evaluation or control lambda-operator.

    ``pi=None`` selects control mode (the greedy operator). Random Q pairs are drawn
    from the value box ``[-r_max/(1-gamma), r_max/(1-gamma)]``. The operator is then
    iterated from zero towards its fixed point; failing to reach ``tol`` is reported,
    not raised.
    """
    rng = np.random.default_rng(seed)
    if pi is None:
        mode = "control"
        op = lambda q: r_lambda_star(mdp, mu, q, lam)  # noqa: E731
        eps = float("nan")
        bound = eta_control_bound(mdp.gamma, lam)
        reference = exact_q_star(mdp, tol=1e-12)
    else:
        mode = "evaluation"
        op = lambda q: r_lambda(mdp, pi, mu, q, lam)  # noqa: E731
        eps = policy_distance(pi, mu)
        bound = eta_eval_bound(mdp.gamma, lam, eps)
        reference = exact_q_pi(mdp, pi)
    box = mdp.value_bound
    worst = 0.0
    shape = (mdp.n_states, mdp.n_actions)
    for _ in range(n_pairs):
        q1 = rng.uniform(-box, box, size=shape)
        q2 = rng.uniform(-box, box, size=shape)
        den = np.max(np.abs(q1 - q2))
        if den == 0.0:
            continue
        worst = max(worst, float(np.max(np.abs(op(q1) - op(q2))) / den))
    errors = iterate_operator(op, np.zeros(shape), reference, tol=tol, max_iter=max_iter)
    return OperatorReport(
        gamma=mdp.gamma, lam=lam, epsilon=eps, eta_bound=bound, eta_empirical=worst,
        iterations=len(errors) - 1, converged=errors[-1] <= tol, final_error=errors[-1], mode=mode,
    )
