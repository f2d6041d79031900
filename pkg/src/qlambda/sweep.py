"""Lambda-epsilon sweeps with divergence detection and safe-lambda frontiers.

Every cell ``(lambda, epsilon, trial)`` is an independent training run whose seed
is a stable hash of the base seed and the cell's coordinate values, so records
do not depend on scheduling or on which other grid points exist.
"""
from __future__ import annotations

import csv
import io
import math
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .bicycle import BicycleConfig, goal_rate, train_bicycle
from .mdp import (
    ContractError,
    Mdp,
    Policy,
    exact_q_pi,
    exact_q_star,
    gridworld,
    gridworld_path_policy,
    greedy_policy,
    mixture_policy,
    random_mdp,
    two_state_chain,
    uniform_policy,
)
from .operators import lambda_max_eval
from .td import GREEDY, AlgorithmKind, EpsGreedy, LearnerConfig, StepSchedule, train

__all__ = [
    "SweepConfig",
    "SweepRecord",
    "Frontier",
    "RECORD_HEADER",
    "FRONTIER_HEADER",
    "cell_seed",
    "make_environment",
    "run_sweep",
    "extract_frontier",
    "bound_violations",
    "tabular_tradeoff_experiment",
    "records_to_csv",
    "records_from_csv",
]

RECORD_HEADER = "algorithm,environment,gamma,lambda,epsilon,trial,seed,episodes_run,diverged,final_metric,wall_time_s"
FRONTIER_HEADER = "epsilon,max_safe_lambda,theory_lambda_max"


def _float_bits(x: float) -> int:
    return int.from_bytes(struct.pack("<d", float(x)), "little")


def cell_seed(base_seed: int, lam: float, epsilon: float, trial: int) -> int:
    ss = np.random.SeedSequence([int(base_seed), _float_bits(lam), _float_bits(epsilon), int(trial)])
    return int(ss.generate_state(1, np.uint64)[0])


def make_environment(spec) -> tuple[Mdp, Policy | None, str]:
    """Resolve an environment spec into ``(mdp, target policy, label)``.

    Accepted specs: ``"gridworld"`` (path-following target), ``"chain"`` (target
    always takes action 1), ``{"random": {...random_mdp kwargs}, "target_seed": s}``
    (target greedy w.r.t. a seeded Gaussian table), ``{"file": path, "target": [[...]]}``
    and ``"bicycle"`` (no MDP).
    """
    if spec == "bicycle":
        return None, None, "bicycle"
    if spec == "gridworld":
        return gridworld(), gridworld_path_policy(), "gridworld"
    if spec == "chain":
        return two_state_chain(0.5), Policy([[0.0, 1.0], [0.0, 1.0]]), "chain"
    if isinstance(spec, dict) and "random" in spec:
        m = random_mdp(**spec["random"])
        rng = np.random.default_rng(spec.get("target_seed", 0))
        return m, greedy_policy(rng.normal(size=(m.n_states, m.n_actions))), "random"
    if isinstance(spec, dict) and "file" in spec:
        try:
            m = Mdp.load(spec["file"])
        except (OSError, ValueError, KeyError) as exc:
            raise ContractError(f"cannot read MDP file {spec['file']!r}: {exc}") from exc
        target = spec.get("target")
        pi = Policy(target) if target is not None else uniform_policy(m.n_states, m.n_actions)
        return m, pi, spec["file"]
    raise ContractError(f"unknown environment spec {spec!r}")


@dataclass
class SweepConfig:
    lambda_grid: list
    epsilon_grid: list
    trials_per_cell: int = 5
    episodes_per_trial: int = 500
    environment: object = "gridworld"
    algorithm: AlgorithmKind = AlgorithmKind.QPI
    divergence_threshold_factor: float = 100.0
    base_seed: int = 0
    gamma: float | None = None
    step_a0: float = 1.0
    step_decay: float = 1e-3
    max_steps: int = 50
    threads: int = 1
    grid_res: int = 6
    eval_episodes: int = 100
    bicycle: dict = field(default_factory=dict)

    def __post_init__(self):
        self.algorithm = AlgorithmKind.parse(self.algorithm)
        self.lambda_grid = [float(v) for v in self.lambda_grid]
        self.epsilon_grid = [float(v) for v in self.epsilon_grid]
        if not self.lambda_grid or not self.epsilon_grid:
            raise ContractError("lambda and epsilon grids must be non-empty")
        if self.lambda_grid != sorted(self.lambda_grid) or self.epsilon_grid != sorted(self.epsilon_grid):
            raise ContractError("grids must be sorted")
        if self.lambda_grid[0] < 0 or self.lambda_grid[-1] > 1:
            raise ContractError("lambda values must lie in [0, 1]")
        if self.epsilon_grid[0] < 0:
            raise ContractError("epsilon values must be non-negative")
        if self.trials_per_cell < 1 or self.episodes_per_trial < 0:
            raise ContractError("need at least one trial and a non-negative episode count")
        if self.threads < 1:
            raise ContractError("threads must be positive")
        bike = self.environment == "bicycle"
        kind = self.algorithm
        if bike and kind is not AlgorithmKind.QSTAR:
            raise ContractError("the bicycle sweep runs qstar only")
        if (bike or kind.is_control) and self.epsilon_grid[-1] > 1:
            raise ContractError("epsilon-greedy exploration must lie in [0, 1]")
        if not bike and not kind.is_control and self.epsilon_grid[-1] > 2:
            raise ContractError("an L1 policy distance cannot exceed 2")
        if not bike and kind.is_on_policy:
            raise ContractError(f"{kind.value} is on-policy and cannot be swept over off-policy-ness")

    @property
    def schedule(self) -> StepSchedule:
        return StepSchedule(self.step_a0, self.step_decay)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["algorithm"] = self.algorithm.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        missing = sorted({"lambda_grid", "epsilon_grid"} - set(d))
        if unknown or missing:
            raise ContractError(f"bad sweep config keys: unknown={unknown} missing={missing}")
        return cls(**d)


@dataclass(frozen=True)
class SweepRecord:
    algorithm: str
    environment: str
    gamma: float
    lam: float
    epsilon: float
    trial: int
    seed: int
    episodes_run: int
    diverged: bool
    final_metric: float
    wall_time_s: float

    def key(self):
        return (self.lam, self.epsilon, self.trial)

    def result(self) -> tuple:
        """Everything except wall time; equal across reruns of the same config."""
        return tuple(getattr(self, f.name) for f in fields(self) if f.name != "wall_time_s")

    def csv_row(self) -> list:
        return [self.algorithm, self.environment, repr(self.gamma), repr(self.lam), repr(self.epsilon),
                self.trial, self.seed, self.episodes_run, int(self.diverged), repr(self.final_metric),
                repr(self.wall_time_s)]


def records_to_csv(records, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_HEADER.split(","))
    for r in records:
        w.writerow(r.csv_row())
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def records_from_csv(text: str) -> list[SweepRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or ",".join(rows[0]) != RECORD_HEADER:
        raise ContractError("unexpected sweep CSV header")
    out = []
    for r in rows[1:]:
        out.append(SweepRecord(r[0], r[1], float(r[2]), float(r[3]), float(r[4]), int(r[5]), int(r[6]),
                               int(r[7]), bool(int(r[8])), float(r[9]), float(r[10])))
    return out


def _bicycle_config(cfg: SweepConfig) -> BicycleConfig:
    return BicycleConfig.desk(**cfg.bicycle)


def _run_cell(cfg: SweepConfig, lam: float, eps: float, trial: int) -> SweepRecord:
    seed = cell_seed(cfg.base_seed, lam, eps, trial)
    t0 = time.perf_counter()
    kind = cfg.algorithm
    if cfg.environment == "bicycle":
        gamma = 0.99 if cfg.gamma is None else cfg.gamma
        bcfg = _bicycle_config(cfg)
        run = train_bicycle(lam=lam, epsilon=eps, episodes=cfg.episodes_per_trial, grid_res=cfg.grid_res,
                            gamma=gamma, step_size=cfg.schedule, seed=seed, config=bcfg,
                            divergence_factor=cfg.divergence_threshold_factor)
        metric = math.nan if run.diverged else goal_rate(run.grid, cfg.eval_episodes,
                                                         np.random.default_rng([seed, 2]), bcfg)
        label, episodes, diverged = "bicycle", run.episodes_run, run.diverged
    else:
        mdp, pi, label = make_environment(cfg.environment)
        if cfg.gamma is not None:
            mdp = mdp.with_gamma(cfg.gamma)
        gamma = mdp.gamma
        lc = LearnerConfig(lam=lam, step_size=cfg.schedule, episodes=cfg.episodes_per_trial,
                           max_steps=cfg.max_steps, seed=seed,
                           divergence_factor=cfg.divergence_threshold_factor)
        if kind.is_control:
            ref = exact_q_star(mdp)
            run = train(mdp, kind, GREEDY, EpsGreedy(eps), lc)
        else:
            ref = exact_q_pi(mdp, pi)
            mu = mixture_policy(pi, uniform_policy(mdp.n_states, mdp.n_actions), eps / 2)
            run = train(mdp, kind, pi, mu, lc)
        err = float(np.max(np.abs(run.final_q - ref)))
        metric = err if not run.diverged else (err if math.isfinite(err) else math.inf)
        episodes, diverged = run.episodes_run, run.diverged
    return SweepRecord(kind.value, label, float(gamma), lam, eps, trial, seed, episodes, diverged,
                       float(metric), time.perf_counter() - t0)


def _run_cell_args(args):
    return _run_cell(*args)


def run_sweep(config: SweepConfig) -> list[SweepRecord]:
    """Run every cell; records come back sorted by (lambda, epsilon, trial)."""
    cells = [(config, lam, eps, t) for lam in config.lambda_grid for eps in config.epsilon_grid
             for t in range(config.trials_per_cell)]
    if config.threads > 1:
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            records = list(pool.map(_run_cell_args, cells, chunksize=1))
    else:
        records = [_run_cell(*c) for c in cells]
    return sorted(records, key=SweepRecord.key)


@dataclass
class Frontier:
    epsilons: list
    max_safe_lambda: list
    theory_lambda_max: list

    def monotone_violations(self) -> list[tuple[float, float]]:
        """Pairs ``(eps_i, eps_j)`` with ``eps_i < eps_j`` whose safe lambda increases."""
        out = []
        vals = [-math.inf if v is None else v for v in self.max_safe_lambda]
        for i in range(len(vals)):
            for j in range(i + 1, len(vals)):
                if vals[j] > vals[i]:
                    out.append((self.epsilons[i], self.epsilons[j]))
        return out

    @property
    def is_monotone(self) -> bool:
        return not self.monotone_violations()

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(FRONTIER_HEADER.split(","))
        for e, m, t in zip(self.epsilons, self.max_safe_lambda, self.theory_lambda_max):
            w.writerow([repr(e), "" if m is None else repr(m), repr(t)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def extract_frontier(records, gamma: float, epsilon_grid=None) -> Frontier:
    """Per epsilon, the largest grid lambda such that it and every smaller lambda had no divergence.

    ``epsilon_grid`` may list epsilons without records; those get a null entry.
    """
    by_eps: dict[float, dict[float, bool]] = {}
    for r in records:
        cell = by_eps.setdefault(r.epsilon, {})
        cell[r.lam] = cell.get(r.lam, False) or r.diverged
    eps_list = sorted(set(by_eps) | set(epsilon_grid or []))
    safe = []
    for e in eps_list:
        best = None
        for lam in sorted(by_eps.get(e, {})):
            if by_eps[e][lam]:
                break
            best = lam
        safe.append(best)
    return Frontier(eps_list, safe, [lambda_max_eval(gamma, e) for e in eps_list])


def bound_violations(records, gamma: float) -> list[SweepRecord]:
    """Diverged cells lying strictly below the evaluation bound ``lambda < (1 - gamma) / (gamma eps)``."""
    out = []
    for r in records:
        limit = math.inf if r.epsilon == 0 else (1 - gamma) / (gamma * r.epsilon)
        if r.diverged and r.lam < limit:
            out.append(r)
    return out


def tabular_tradeoff_experiment(mdp: Mdp, pi, lambda_grid, epsilon_grid, config: SweepConfig | None = None):
    """Off-policy QPi evaluation with ``mu_eps = (1 - eps/2) pi + (eps/2) uniform``.

    Returns ``(records, frontier)``; ``final_metric`` is ``||Q - Q^pi||_inf``.
    Runs serially on the given MDP (the environment field of ``config`` is ignored).
    """
    base = config or SweepConfig(lambda_grid, epsilon_grid)
    cfg = SweepConfig(**{**asdict(base), "lambda_grid": list(lambda_grid), "epsilon_grid": list(epsilon_grid),
                         "algorithm": AlgorithmKind.QPI, "environment": "given"})
    pi = pi if isinstance(pi, Policy) else Policy(pi)
    ref = exact_q_pi(mdp, pi)
    uni = uniform_policy(mdp.n_states, mdp.n_actions)
    records = []
    for lam in cfg.lambda_grid:
        for eps in cfg.epsilon_grid:
            mu = mixture_policy(pi, uni, eps / 2)
            for t in range(cfg.trials_per_cell):
                seed = cell_seed(cfg.base_seed, lam, eps, t)
                t0 = time.perf_counter()
                lc = LearnerConfig(lam=lam, step_size=cfg.schedule, episodes=cfg.episodes_per_trial,
                                   max_steps=cfg.max_steps, seed=seed,
                                   divergence_factor=cfg.divergence_threshold_factor)
                run = train(mdp, AlgorithmKind.QPI, pi, mu, lc)
                err = float(np.max(np.abs(run.final_q - ref)))
                records.append(SweepRecord("qpi", "tabular", mdp.gamma, lam, eps, t, seed, run.episodes_run,
                                           run.diverged, err, time.perf_counter() - t0))
    return records, extract_frontier(records, mdp.gamma, cfg.epsilon_grid)
