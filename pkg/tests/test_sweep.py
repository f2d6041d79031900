import math

import numpy as np
import pytest

from qlambda import ContractError, exact_q_pi, two_state_chain
from qlambda.operators import lambda_max_eval
from qlambda.sweep import (
    FRONTIER_HEADER,
    RECORD_HEADER,
    SweepConfig,
    SweepRecord,
    bound_violations,
    cell_seed,
    extract_frontier,
    make_environment,
    records_from_csv,
    records_to_csv,
    run_sweep,
    tabular_tradeoff_experiment,
)

LAMS = [round(0.1 * i, 1) for i in range(11)]


def _rec(lam, eps, diverged, trial=0):
    return SweepRecord("qpi", "synthetic", 0.9, lam, eps, trial, 0, 10, diverged,
                       math.inf if diverged else 0.0, 0.0)


def test_cell_seed_is_stable_and_distinct():
    assert cell_seed(0, 0.5, 1.0, 0) == cell_seed(0, 0.5, 1.0, 0)
    seeds = {cell_seed(0, lam, e, t) for lam in LAMS for e in (0.1, 0.5) for t in range(3)}
    assert len(seeds) == len(LAMS) * 6
    assert cell_seed(1, 0.5, 1.0, 0) != cell_seed(0, 0.5, 1.0, 0)


def test_config_validation():
    with pytest.raises(ContractError):
        SweepConfig([0.0], [2.5])
    with pytest.raises(ContractError):
        SweepConfig([0.0], [1.5], algorithm="qstar")
    with pytest.raises(ContractError):
        SweepConfig([0.5, 0.1], [0.1])
    with pytest.raises(ContractError):
        SweepConfig([], [0.1])
    with pytest.raises(ContractError):
        SweepConfig([0.1], [0.1], environment="bicycle", algorithm="qpi")
    with pytest.raises(ContractError):
        SweepConfig([0.1], [0.1], algorithm="sarsa")
    with pytest.raises(ContractError) as err:
        SweepConfig.from_dict({"lambda_grid": [0.0], "epsilon_grid": [0.1], "speed": 3})
    assert "speed" in str(err.value)


def test_config_round_trip():
    cfg = SweepConfig([0.0, 0.5], [0.1], trials_per_cell=2, algorithm="tree_backup")
    assert SweepConfig.from_dict(cfg.to_dict()) == cfg


def test_lambda_zero_column_never_diverges():
    cfg = SweepConfig([0.0], [0.1, 0.5, 1.0, 1.5, 2.0], trials_per_cell=2, episodes_per_trial=200)
    recs = run_sweep(cfg)
    assert len(recs) == 10 and not any(r.diverged for r in recs)
    assert all(math.isfinite(r.final_metric) for r in recs)
    fr = extract_frontier(recs, 0.9)
    assert fr.max_safe_lambda == [0.0] * 5


def test_sweep_is_deterministic_and_canonically_ordered():
    cfg = SweepConfig([0.0, 0.9], [0.5, 2.0], trials_per_cell=2, episodes_per_trial=60)
    a, b = run_sweep(cfg), run_sweep(cfg)
    assert [r.result() for r in a] == [r.result() for r in b]
    assert [r.key() for r in a] == sorted(r.key() for r in a)


def test_parallel_matches_serial():
    cfg = SweepConfig([0.0, 0.9], [0.5, 2.0], trials_per_cell=2, episodes_per_trial=60)
    par = SweepConfig(**{**cfg.__dict__, "threads": 2})
    assert [r.result() for r in run_sweep(cfg)] == [r.result() for r in run_sweep(par)]


def test_adding_grid_points_keeps_existing_cells():
    small = run_sweep(SweepConfig([0.0, 0.8], [1.0], trials_per_cell=1, episodes_per_trial=50))
    large = run_sweep(SweepConfig([0.0, 0.3, 0.8], [0.5, 1.0], trials_per_cell=1, episodes_per_trial=50))
    index = {r.key(): r.result() for r in large}
    for r in small:
        assert index[r.key()] == r.result()


def test_control_sweep_runs():
    recs = run_sweep(SweepConfig([0.0, 0.05], [0.1, 0.3], trials_per_cell=1, episodes_per_trial=50,
                                 algorithm="qstar"))
    assert len(recs) == 4 and all(r.algorithm == "qstar" for r in recs)


def test_bicycle_sweep_smoke():
    cfg = SweepConfig([0.3], [0.03], trials_per_cell=1, episodes_per_trial=20, environment="bicycle",
                      algorithm="qstar", grid_res=3, eval_episodes=3, bicycle={"max_steps": 200})
    (rec,) = run_sweep(cfg)
    assert rec.environment == "bicycle" and rec.gamma == 0.99 and 0.0 <= rec.final_metric <= 1.0


def test_frontier_all_safe():
    recs = [_rec(lam, e, False) for lam in LAMS for e in (0.1, 1.0, 2.0)]
    fr = extract_frontier(recs, 0.9)
    assert fr.max_safe_lambda == [1.0, 1.0, 1.0] and fr.is_monotone


def test_frontier_of_synthetic_bound_records():
    gamma, epss = 0.9, [0.1, 0.5, 1.0, 1.5, 2.0]
    recs = [_rec(lam, e, lam > (1 - gamma) / (gamma * e), t) for lam in LAMS for e in epss for t in range(2)]
    fr = extract_frontier(recs, gamma)
    expect = [max(lam for lam in LAMS if lam <= (1 - gamma) / (gamma * e)) for e in epss]
    assert fr.max_safe_lambda == expect
    assert fr.theory_lambda_max == [lambda_max_eval(gamma, e) for e in epss]
    assert fr.is_monotone and not bound_violations(recs, gamma)


def test_frontier_null_entries_and_violations():
    recs = [_rec(0.0, 0.5, True), _rec(0.0, 1.0, False), _rec(0.5, 1.0, False)]
    fr = extract_frontier(recs, 0.9, epsilon_grid=[0.5, 1.0, 2.0])
    assert fr.max_safe_lambda == [None, 0.5, None]
    assert fr.monotone_violations() == [(0.5, 1.0)]
    lines = fr.to_csv().splitlines()
    assert lines[0] == FRONTIER_HEADER and lines[1].split(",")[1] == "" and lines[2].startswith("1.0,0.5,")


def test_divergence_after_safe_lambda_is_respected():
    # a diverged middle cell caps the frontier even if a larger lambda survived
    recs = [_rec(0.0, 1.0, False), _rec(0.1, 1.0, True), _rec(0.2, 1.0, False)]
    assert extract_frontier(recs, 0.9).max_safe_lambda == [0.0]


def test_bound_violation_detection():
    recs = [_rec(0.1, 1.0, True), _rec(0.2, 1.0, True)]
    assert bound_violations(recs, 0.9) == [recs[0]]


def test_record_csv_round_trip(tmp_path):
    recs = run_sweep(SweepConfig([0.0], [1.0], trials_per_cell=2, episodes_per_trial=20))
    text = records_to_csv(recs, tmp_path / "r.csv")
    assert text.splitlines()[0] == RECORD_HEADER
    assert (tmp_path / "r.csv").read_text() == text
    assert records_from_csv(text) == recs


def test_make_environment_variants(tmp_path):
    m, pi, label = make_environment({"random": {"n_states": 4, "n_actions": 2, "seed": 3}, "target_seed": 1})
    assert label == "random" and pi.probs.shape == (4, 2)
    m.save(tmp_path / "m.json")
    m2, _, _ = make_environment({"file": str(tmp_path / "m.json")})
    np.testing.assert_array_equal(m2.transition, m.transition)
    with pytest.raises(ContractError):
        make_environment({"file": str(tmp_path / "missing.json")})
    with pytest.raises(ContractError):
        make_environment("atari")


def test_tradeoff_cells_below_bound_converge():
    chain = two_state_chain(0.5)
    pi = [[0.0, 1.0], [0.0, 1.0]]
    scale = np.max(np.abs(exact_q_pi(chain, pi)))
    cfg = SweepConfig([0.0], [0.1], trials_per_cell=1, episodes_per_trial=4000, max_steps=10,
                      step_a0=0.5, step_decay=1e-2)
    recs, fr = tabular_tradeoff_experiment(chain, pi, [0.0, 0.5, 0.9], [0.5, 1.0, 1.5], cfg)
    below = [r for r in recs if r.lam < lambda_max_eval(0.5, r.epsilon)]
    assert len(below) == 8
    for r in below:
        assert not r.diverged and r.final_metric < 0.05 * scale, r
    assert fr.is_monotone
