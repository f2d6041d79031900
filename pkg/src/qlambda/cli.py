"""``qlambda`` command line: operator checks, tabular learning, sweeps and the bicycle.

Parameters come from built-in defaults, then an optional ``--config`` JSON file
(a previous run's manifest is accepted too), then explicit flags.  Every run that
writes ``--out`` also writes ``<out>.manifest.json``.

Exit codes: 0 success (divergence is a result, not an error), 2 usage or
configuration errors, 3 I/O errors.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bicycle import BicycleConfig, goal_rate, train_bicycle
from .mdp import (
    ContractError,
    Mdp,
    Policy,
    distance_mixture,
    exact_q_pi,
    exact_q_star,
    greedy_policy,
    policy_distance,
    random_mdp,
    uniform_policy,
)
from .operators import OperatorReport, certify_contraction, general_q_fixed_point, r_lambda, r_lambda_star
from .sweep import SweepConfig, bound_violations, extract_frontier, make_environment, records_to_csv, run_sweep
from .td import GREEDY, AlgorithmKind, EpsGreedy, LearnerConfig, StepSchedule, train

EXIT_OK, EXIT_USAGE, EXIT_IO = 0, 2, 3


class InputError(Exception):
    """Unreadable or invalid input; reported with exit code 2."""


DEFAULTS = {
    "operator-check": {"mdp": "random:10,4,0", "gamma": None, "lambda": 0.5, "epsilon": 0.5, "trials": 3,
                       "pairs": 200, "seed": 0, "mode": "evaluation", "target": None},
    "evaluate": {"algo": "qpi", "mdp": "chain", "gamma": None, "lambda": 0.5, "epsilon": 1.0,
                 "episodes": 20_000, "alpha": 0.5, "alpha_decay": 1e-3, "max_steps": 20, "seed": 0,
                 "mode": "online", "target": None},
    "control": {"algo": "qstar", "mdp": "gridworld", "gamma": None, "lambda": 0.05, "epsilon": 0.3,
                "episodes": 30_000, "alpha": 0.5, "alpha_decay": 1e-3, "max_steps": 100, "seed": 0,
                "mode": "online", "per_step_greedy": False},
    "bicycle": {"lambda": 0.3, "epsilon": 0.03, "episodes": 20_000, "grid_res": 10, "seed": 0, "gamma": 0.99,
                "alpha": 0.5, "alpha_decay": 1e-4, "eval_every": 0, "eval_episodes": 100, "task": "reference",
                "task_overrides": {}},
}


def load_mdp(spec: str, gamma=None, target=None) -> tuple[Mdp, Policy]:
    """``chain``, ``gridworld``, ``random:S,A[,seed[,branching]]`` or a JSON file path."""
    try:
        if spec in ("chain", "gridworld"):
            mdp, pi, _ = make_environment(spec)
        elif spec.startswith("random:"):
            parts = [int(v) for v in spec[len("random:"):].split(",")]
            if not 2 <= len(parts) <= 4:
                raise ValueError("expected random:S,A[,seed[,branching]]")
            s, a = parts[0], parts[1]
            seed = parts[2] if len(parts) > 2 else 0
            branching = parts[3] if len(parts) > 3 else min(2, s)
            mdp = random_mdp(s, a, branching=branching, seed=seed)
            pi = greedy_policy(np.random.default_rng(seed).normal(size=(s, a)))
        else:
            mdp = Mdp.load(spec)
            pi = uniform_policy(mdp.n_states, mdp.n_actions)
        if target is not None:
            pi = Policy(json.loads(Path(target).read_text()) if isinstance(target, str) else target)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"cannot load MDP {spec!r}: {exc}") from exc
    if gamma is not None:
        mdp = mdp.with_gamma(gamma)
    return mdp, pi


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise InputError("config must be a JSON object")
    if "command" in doc and "config" in doc:
        doc = doc["config"]
    return doc


def _merge(command: str, args: argparse.Namespace) -> dict:
    base = dict(DEFAULTS[command])
    file_cfg = _read_config(args.config)
    unknown = sorted(set(file_cfg) - set(base))
    if unknown:
        raise InputError(f"unknown config keys for {command}: {', '.join(unknown)}")
    base.update(file_cfg)
    for key in DEFAULTS[command]:
        val = getattr(args, key, None)
        if val is not None:
            base[key] = val
    return base


def _emit(text: str, out) -> list[str]:
    if out is None:
        sys.stdout.write(text)
        return []
    Path(out).write_text(text)
    return [str(out)]


def _write_manifest(out, command: str, cfg: dict, seed, outputs: list[str], t0: float, extra=None) -> None:
    if out is None:
        return
    manifest = {"command": command, "config": cfg, "seed": seed, "version": __version__,
                "outputs": outputs, "wall_time_s": time.perf_counter() - t0}
    if extra:
        manifest["results"] = extra
    Path(f"{out}.manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_operator_check(cfg: dict, out) -> dict:
    mdp, pi = load_mdp(cfg["mdp"], cfg["gamma"], cfg["target"])
    mu = distance_mixture(pi, cfg["epsilon"])
    lam = cfg["lambda"]
    control = cfg["mode"] == "control"
    reports = [certify_contraction(mdp, None if control else pi, mu, lam, n_pairs=cfg["pairs"],
                                   seed=cfg["seed"] + t) for t in range(cfg["trials"])]
    if control:
        qs = exact_q_star(mdp, tol=1e-12)
        residual = float(np.max(np.abs(r_lambda_star(mdp, mu, qs, lam) - qs)))
        checks = {"fixed_point_residual": residual}
    else:
        qp = exact_q_pi(mdp, pi)
        residual = float(np.max(np.abs(r_lambda(mdp, pi, mu, qp, lam) - qp)))
        gap = float(np.max(np.abs(general_q_fixed_point(mdp, pi, mu, lam) - qp)))
        checks = {"fixed_point_residual": residual, "general_q_gap": gap}
    checks["epsilon_actual"] = policy_distance(pi, mu)
    outputs = _emit(OperatorReport.to_csv(reports), out)
    print(" ".join(f"{k}={v!r}" for k, v in checks.items()), file=sys.stderr)
    return {"outputs": outputs, "results": checks}


def _learn(cfg: dict, control: bool, out) -> dict:
    kind = AlgorithmKind.parse(cfg["algo"])
    if kind.is_control != control:
        raise ContractError(f"{kind.value} belongs to the {'control' if kind.is_control else 'evaluate'} command")
    mdp, pi = load_mdp(cfg["mdp"], cfg["gamma"], cfg.get("target"))
    lc = LearnerConfig(lam=cfg["lambda"], step_size=StepSchedule(cfg["alpha"], cfg["alpha_decay"]),
                       episodes=cfg["episodes"], max_steps=cfg["max_steps"], seed=cfg["seed"],
                       update_mode=cfg["mode"], per_step_greedy=cfg.get("per_step_greedy", False),
                       reference_q=exact_q_star(mdp) if control else exact_q_pi(mdp, pi))
    if control:
        if not 0.0 <= cfg["epsilon"] <= 1.0:
            raise ContractError("epsilon-greedy exploration must lie in [0, 1]")
        run = train(mdp, kind, GREEDY, EpsGreedy(cfg["epsilon"]), lc)
    else:
        run = train(mdp, kind, pi, distance_mixture(pi, cfg["epsilon"]), lc)
    outputs = _emit(run.to_csv(), out)
    res = {"final_error": run.final_error, "diverged": run.diverged, "episodes_run": run.episodes_run,
           "reference_norm": float(np.max(np.abs(lc.reference_q)))}
    print(" ".join(f"{k}={v!r}" for k, v in res.items()), file=sys.stderr)
    return {"outputs": outputs, "results": res}


def cmd_sweep(args) -> int:
    t0 = time.perf_counter()
    raw = _read_config(args.config)
    if args.threads is not None:
        raw["threads"] = args.threads
    raw.setdefault("threads", os.cpu_count() or 1)
    try:
        cfg = SweepConfig.from_dict(raw)
    except TypeError as exc:
        raise InputError(str(exc)) from exc
    records = run_sweep(cfg)
    gamma = records[0].gamma
    frontier = extract_frontier(records, gamma, cfg.epsilon_grid)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records_to_csv(records, out_dir / "records.csv")
    frontier.to_csv(out_dir / "frontier.csv")
    res = {"monotone_violations": frontier.monotone_violations(),
           "bound_violations": [list(r.key()) for r in bound_violations(records, gamma)]}
    for key, val in res.items():
        if val:
            print(f"warning: {key}: {val}", file=sys.stderr)
    _write_manifest(out_dir / "sweep", "sweep", cfg.to_dict(), cfg.base_seed,
                    [str(out_dir / "records.csv"), str(out_dir / "frontier.csv")], t0, res)
    return EXIT_OK


def cmd_bicycle(cfg: dict, out) -> dict:
    overrides = dict(cfg["task_overrides"])
    if cfg["task"] == "desk":
        bcfg = BicycleConfig.desk(**overrides)
    elif cfg["task"] == "reference":
        bcfg = BicycleConfig(**overrides)
    else:
        raise ContractError(f"unknown bicycle task {cfg['task']!r}")
    run = train_bicycle(lam=cfg["lambda"], epsilon=cfg["epsilon"], episodes=cfg["episodes"],
                        grid_res=cfg["grid_res"], gamma=cfg["gamma"],
                        step_size=StepSchedule(cfg["alpha"], cfg["alpha_decay"]), seed=cfg["seed"], config=bcfg,
                        eval_every=cfg["eval_every"], eval_episodes=cfg["eval_episodes"])
    if not run.eval_episodes or run.eval_episodes[-1] != run.episodes_run:
        rng = np.random.default_rng([cfg["seed"], 3])
        run.eval_episodes.append(run.episodes_run)
        run.eval_rates.append(goal_rate(run.grid, cfg["eval_episodes"], rng, bcfg))
    text = "episodes,goal_rate\n" + "".join(f"{e},{r!r}\n" for e, r in zip(run.eval_episodes, run.eval_rates))
    outputs = _emit(text, out)
    res = {"diverged": run.diverged, "episodes_run": run.episodes_run, "final_goal_rate": run.eval_rates[-1],
           "grid_res": cfg["grid_res"]}
    print(" ".join(f"{k}={v!r}" for k, v in res.items()), file=sys.stderr)
    return {"outputs": outputs, "results": res}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qlambda", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, with_mdp=True):
        sp.add_argument("--config", help="JSON file with parameters (or a previous manifest)")
        sp.add_argument("--out", help="output CSV (default: standard output)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--lambda", dest="lambda", type=float)
        sp.add_argument("--epsilon", type=float)
        sp.add_argument("--gamma", type=float)
        if with_mdp:
            sp.add_argument("--mdp", help="chain | gridworld | random:S,A[,seed[,branching]] | file.json")

    op = sub.add_parser("operator-check", help="certify operator contraction and fixed points")
    common(op)
    op.add_argument("--trials", type=int)
    op.add_argument("--pairs", type=int)
    op.add_argument("--mode", choices=["evaluation", "control"])
    op.add_argument("--target", help="JSON file with the target policy table")

    for name, helptext in (("evaluate", "off-policy evaluation run"), ("control", "control run")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--algo")
        sp.add_argument("--episodes", type=int)
        sp.add_argument("--alpha", type=float, help="initial step size a0")
        sp.add_argument("--alpha-decay", dest="alpha_decay", type=float)
        sp.add_argument("--max-steps", dest="max_steps", type=int)
        sp.add_argument("--mode", choices=["online", "frozen"])
        if name == "evaluate":
            sp.add_argument("--target", help="JSON file with the target policy table")
        else:
            sp.add_argument("--per-step-greedy", dest="per_step_greedy", action="store_const", const=True)

    sw = sub.add_parser("sweep", help="lambda-epsilon sweep and frontier")
    sw.add_argument("--config", required=True)
    sw.add_argument("--out-dir", dest="out_dir", required=True)
    sw.add_argument("--threads", type=int)

    bk = sub.add_parser("bicycle", help="bicycle training with goal-rate evaluation")
    common(bk, with_mdp=False)
    bk.add_argument("--episodes", type=int)
    bk.add_argument("--grid-res", dest="grid_res", type=int)
    bk.add_argument("--alpha", type=float)
    bk.add_argument("--alpha-decay", dest="alpha_decay", type=float)
    bk.add_argument("--eval-every", dest="eval_every", type=int)
    bk.add_argument("--eval-episodes", dest="eval_episodes", type=int)
    bk.add_argument("--task", choices=["reference", "desk"])
    return p


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    t0 = time.perf_counter()
    try:
        if args.command == "sweep":
            return cmd_sweep(args)
        cfg = _merge(args.command, args)
        handler = {"operator-check": cmd_operator_check, "bicycle": cmd_bicycle,
                   "evaluate": lambda c, o: _learn(c, False, o), "control": lambda c, o: _learn(c, True, o)}
        result = handler[args.command](cfg, args.out)
        _write_manifest(args.out, args.command, cfg, cfg.get("seed"), result["outputs"], t0, result["results"])
    except (InputError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
