"""Acceptance criteria, each printed as one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines appear in the
output even without ``-s``.
"""
import math
import time

import numpy as np
import pytest

from qlambda import (
    GREEDY,
    AlgorithmKind,
    EpsGreedy,
    LearnerConfig,
    Policy,
    StepSchedule,
    bellman_opt,
    distance_mixture,
    episode_update,
    exact_q_pi,
    exact_q_star,
    forward_view_episode,
    general_q_fixed_point,
    greedy_policy,
    gridworld,
    gridworld_path_policy,
    iterate_operator,
    lambda_max_control,
    lambda_max_eval,
    mixture_policy,
    policy_distance,
    r_general_q,
    r_lambda,
    r_lambda_star,
    random_mdp,
    sample_episode,
    train,
    two_state_chain,
    uniform_policy,
)
from qlambda.bicycle import BicycleConfig, goal_rate, make_grid, train_bicycle
from qlambda.operators import eta_control_bound, eta_eval_bound
from qlambda.sweep import SweepConfig, bound_violations, extract_frontier, run_sweep


@pytest.fixture
def verdict(capsys):
    def report(number, title, ok, detail, t0):
        line = f"CRITERION {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail} ({time.perf_counter() - t0:.1f}s)"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return report


def _dirichlet(rng, s, a):
    return Policy(rng.dirichlet(np.ones(a), size=s))


def _sup(x):
    return float(np.max(np.abs(x)))


def test_criterion_1_fixed_points(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_pi = worst_star = 0.0
    for i in range(100):
        n = int(rng.integers(2, 21))
        gamma = (0.5, 0.9, 0.99)[i % 3]
        m = random_mdp(n, 4, branching=min(n, 3), seed=int(rng.integers(2**31)), gamma=gamma)
        pi = _dirichlet(rng, n, 4)
        qp, qs = exact_q_pi(m, pi), exact_q_star(m, tol=1e-12)
        for _ in range(3):
            mu = _dirichlet(rng, n, 4)
            for lam in (0.0, 0.25, 0.5, 0.9, 1.0):
                worst_pi = max(worst_pi, _sup(r_lambda(m, pi, mu, qp, lam) - qp))
                worst_star = max(worst_star, _sup(r_lambda_star(m, mu, qs, lam) - qs))
    ok = worst_pi <= 1e-8 and worst_star <= 1e-8 and time.perf_counter() - t0 < 60
    verdict(1, "fixed points of R^pi_lambda and R^*_lambda", ok,
            f"max residuals {worst_pi:.2e} (eval), {worst_star:.2e} (control) over 100 MDPs x 3 mu x 5 lambda", t0)


def _decays_by(errors, eta):
    """Every iteration shrinks the error by ``eta`` (up to round-off near the floor)."""
    e = np.asarray(errors)
    return bool(np.all(e[1:] <= eta * e[:-1] + 1e-13 * max(1.0, e[0])))


def test_criterion_2_evaluation_contraction(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    checked = 0
    worst_margin = -math.inf
    decay_ok = True
    for gamma in (0.5, 0.9, 0.99):
        for lam in (0.25, 0.5, 0.9, 1.0):
            for eps in (0.0, 0.01, 0.1, 0.5, 1.0, 1.5, 2.0):
                if lam * eps * gamma >= 1 - gamma:
                    continue
                n = int(rng.integers(3, 9))
                m = random_mdp(n, 3, branching=min(n, 3), seed=int(rng.integers(2**31)), gamma=gamma)
                pi = greedy_policy(rng.normal(size=(n, 3)))
                mu = distance_mixture(pi, eps)
                eps_true = policy_distance(pi, mu)
                eta = eta_eval_bound(gamma, lam, eps_true)
                op = lambda q: r_lambda(m, pi, mu, q, lam)  # noqa: E731
                for _ in range(60):
                    q1, q2 = rng.uniform(-1, 1, size=(2, n, 3)) * m.value_bound
                    ratio = _sup(op(q1) - op(q2)) / _sup(q1 - q2)
                    worst_margin = max(worst_margin, ratio - eta)
                errs = iterate_operator(op, np.zeros((n, 3)), exact_q_pi(m, pi), tol=1e-9)
                decay_ok &= _decays_by(errs, eta) and errs[-1] <= 1e-9
                checked += 1
    ok = worst_margin <= 1e-9 and decay_ok and time.perf_counter() - t0 < 60
    verdict(2, "evaluation contraction coefficient", ok,
            f"{checked} (gamma, lambda, eps) settings; max(ratio - bound) = {worst_margin:.3e}; "
            f"per-step geometric decay {'held' if decay_ok else 'violated'}", t0)


def test_criterion_3_control_contraction(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    worst_margin = -math.inf
    reached = True
    settings = 0
    for gamma in (0.5, 0.9, 0.99):
        top = lambda_max_control(gamma)
        for lam in (0.0, 0.5 * top, 0.99 * top):
            for _ in range(3):
                n = int(rng.integers(3, 9))
                m = random_mdp(n, 3, branching=min(n, 3), seed=int(rng.integers(2**31)), gamma=gamma)
                mu = _dirichlet(rng, n, 3)
                eta = eta_control_bound(gamma, lam)
                op = lambda q: r_lambda_star(m, mu, q, lam)  # noqa: E731
                for _ in range(60):
                    q1, q2 = rng.uniform(-1, 1, size=(2, n, 3)) * m.value_bound
                    worst_margin = max(worst_margin, _sup(op(q1) - op(q2)) / _sup(q1 - q2) - eta)
                qs = exact_q_star(m, tol=1e-12)
                assert _sup(bellman_opt(m, qs) - qs) < 1e-11
                errs = iterate_operator(op, np.zeros((n, 3)), qs, tol=1e-8, max_iter=20_000)
                reached &= errs[-1] <= 1e-8
                settings += 1
    ok = worst_margin <= 1e-9 and reached
    verdict(3, "control contraction coefficient", ok,
            f"{settings} settings; max(ratio - bound) = {worst_margin:.3e}; "
            f"iteration from 0 {'reached' if reached else 'missed'} 1e-8 of Q*", t0)


def test_criterion_4_general_q_bias(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    worst_iter, smallest_gap = 0.0, math.inf
    for k in range(20):
        n = int(rng.integers(3, 12))
        m = random_mdp(n, 3, branching=min(n, 3), seed=int(rng.integers(2**31)), gamma=(0.5, 0.9)[k % 2])
        pi, mu = _dirichlet(rng, n, 3), _dirichlet(rng, n, 3)
        qp = exact_q_pi(m, pi)
        for lam in (0.25, 0.5, 0.9):
            fixed = general_q_fixed_point(m, pi, mu, lam)
            errs = iterate_operator(lambda q: r_general_q(m, pi, mu, q, lam), np.zeros((n, 3)), fixed, tol=1e-10)
            worst_iter = max(worst_iter, errs[-1])
            smallest_gap = min(smallest_gap, _sup(fixed - qp))
    ok = worst_iter <= 1e-8 and smallest_gap > 1e-6
    verdict(4, "General Q(lambda) converges to a biased fixed point", ok,
            f"iteration error {worst_iter:.1e}; smallest ||Q^(mu,pi) - Q^pi|| = {smallest_gap:.2e} over 60 cases", t0)


def _random_case(rng):
    n = int(rng.integers(2, 7))
    a = int(rng.integers(2, 4))
    m = random_mdp(n, a, branching=min(2, n), seed=int(rng.integers(2**31)), n_absorbing=int(rng.integers(0, 2)),
                   gamma=float(rng.uniform(0.5, 0.99)))
    pi = _dirichlet(rng, n, a)
    mu = mixture_policy(_dirichlet(rng, n, a), uniform_policy(n, a), 0.6)
    q = rng.uniform(-2, 2, size=(n, a))
    for x in m.absorbing:
        q[x] = 0.0
    traj = sample_episode(m, mu, int(rng.integers(n)), rng, max_steps=int(rng.integers(1, 25)))
    return m, pi, mu, q, traj, float(rng.uniform(0, 1))


def test_criterion_5_forward_backward(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    worst = 0.0
    count = 0
    for kind in AlgorithmKind:
        for _ in range(1000):
            m, pi, mu, q, traj, lam = _random_case(rng)
            target = None if kind.is_control else (mu if kind.is_on_policy else pi)
            back = episode_update(q, traj, kind, target, mu, lam=lam, gamma=m.gamma, alpha=0.1, mode="frozen")
            fwd = forward_view_episode(q, traj, kind, target, mu, lam=lam, gamma=m.gamma, alpha=0.1)
            worst = max(worst, _sup(back - fwd) / max(1.0, _sup(fwd)))
            count += 1
    ok = worst <= 1e-12
    verdict(5, "forward/backward view equivalence", ok,
            f"{count} episodes over {len(AlgorithmKind)} kinds; max scaled gap {worst:.2e}", t0)


def _median_rel(mdp, kind, target, mu, ref, lam, episodes, max_steps, seeds=5, a0=0.5):
    errs = []
    for seed in range(seeds):
        cfg = LearnerConfig(lam=lam, step_size=StepSchedule(a0, 1e-3), episodes=episodes,
                            max_steps=max_steps, seed=seed)
        run = train(mdp, kind, target, mu, cfg)
        errs.append(_sup(run.final_q - ref) / _sup(ref))
    return float(np.median(errs)), errs


def _gridworld_pair():
    m = gridworld()
    pi = mixture_policy(gridworld_path_policy(), uniform_policy(25, 4), 0.3)
    mu = mixture_policy(pi, uniform_policy(25, 4), 0.1)
    return m, pi, mu


@pytest.mark.parametrize("setting", ["chain-qpi", "grid-qpi", "grid-sarsa", "grid-tree_backup", "grid-pdis"])
def test_criterion_6_online_evaluation(verdict, setting):
    t0 = time.perf_counter()
    place, algo = setting.split("-")
    kind = AlgorithmKind.parse(algo)
    if place == "chain":
        m = two_state_chain(0.5)
        pi, mu = Policy([[0.0, 1.0], [0.0, 1.0]]), uniform_policy(2, 2)
        lam, episodes, steps = 0.5, 20_000, 20
    else:
        m, pi, mu = _gridworld_pair()
        lam, episodes, steps = 0.5, 50_000 if kind is AlgorithmKind.PDIS else 30_000, 100
    eps = policy_distance(pi, mu)
    assert lam < lambda_max_eval(m.gamma, eps)
    target = mu if kind.is_on_policy else pi
    ref = exact_q_pi(m, target)
    med, errs = _median_rel(m, kind, target, mu, ref, lam, episodes, steps)
    elapsed = time.perf_counter() - t0
    ok = med <= 0.05 and elapsed < 120
    goal = "Q^mu" if kind.is_on_policy else "Q^pi"
    verdict(6, f"online {algo} on {place} -> {goal}", ok,
            f"eps={eps:.3f}, lambda={lam}, {episodes} episodes; median rel error {med:.4f} "
            f"(seeds: {', '.join(f'{e:.3f}' for e in errs)})", t0)


def test_criterion_7_online_control(verdict):
    t0 = time.perf_counter()
    m = gridworld()
    lam = 0.05
    assert lam < lambda_max_control(m.gamma)
    ref = exact_q_star(m)
    med, errs = _median_rel(m, AlgorithmKind.QSTAR, GREEDY, EpsGreedy(0.3), ref, lam, 30_000, 100)
    ok = max(errs) <= 0.05
    verdict(7, "online QStar on gridworld -> Q*", ok,
            f"lambda={lam}, eps-greedy 0.3, 30000 episodes; rel errors {', '.join(f'{e:.3f}' for e in errs)}", t0)


def test_criterion_8_frontier_and_bicycle(verdict):
    t0 = time.perf_counter()
    gamma = 0.9
    cfg = SweepConfig([round(0.1 * i, 1) for i in range(11)], [0.1, 0.5, 1.0, 1.5, 2.0], trials_per_cell=5,
                      episodes_per_trial=500, environment="gridworld", algorithm="qpi", gamma=gamma,
                      step_a0=1.0, step_decay=1e-3, max_steps=50, base_seed=8)
    records = run_sweep(cfg)
    frontier = extract_frontier(records, gamma, cfg.epsilon_grid)
    below = bound_violations(records, gamma)
    t_sweep = time.perf_counter() - t0

    bcfg = BicycleConfig.desk()
    baseline = goal_rate(make_grid(6, bcfg), 100, np.random.default_rng(99), bcfg)
    run = train_bicycle(lam=0.3, epsilon=0.03, episodes=20_000, grid_res=6, gamma=0.99,
                        step_size=StepSchedule(0.5, 1e-4), seed=0, config=bcfg)
    trained = goal_rate(run.grid, 100, np.random.default_rng(99), bcfg)
    elapsed = time.perf_counter() - t0
    ok = frontier.is_monotone and not below and not run.diverged and trained > baseline and elapsed < 1800
    pairs = ", ".join(f"{e}:{s}" for e, s in zip(frontier.epsilons, frontier.max_safe_lambda))
    verdict(8, "lambda-eps frontier and scaled bicycle", ok,
            f"frontier eps:lambda {{{pairs}}}, monotone={frontier.is_monotone}, "
            f"diverged cells below bound={len(below)} ({t_sweep:.0f}s); bicycle res 6, {run.episodes_run} episodes, "
            f"diverged={run.diverged}, goal rate {trained:.2f} vs untrained {baseline:.2f}", t0)


def test_criterion_9_bound_identity(verdict):
    t0 = time.perf_counter()
    a, b = lambda_max_eval(0.99, 2.0), lambda_max_control(0.99)
    ok = abs(a - 1 / 198) <= 1e-9 and abs(b - 1 / 198) <= 1e-9 and abs(a - b) <= 1e-9
    verdict(9, "eval bound at eps=2 equals control bound", ok, f"{a!r} and {b!r}", t0)
