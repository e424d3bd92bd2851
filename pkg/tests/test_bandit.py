import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dtdistill.bandit import (BanditState, c_for_range, n_min, select_profile, select_uniform, ucb_index,
                              write_log)
from dtdistill.errors import BudgetError, ContractViolation
from dtdistill.game import make_rng


def fixed_arms(values):
    def pull(arm, seeds):
        return np.full(len(seeds), values[arm], dtype=float)
    return pull


def gaussian_arms(means, sigma=1.0):
    def pull(arm, seeds):
        return np.array([means[arm] + sigma * make_rng(s).standard_normal() for s in seeds])
    return pull


def test_n_min_examples():
    assert n_min(1000) == 14
    assert n_min(1) == 0
    assert n_min(8) == 5
    with pytest.raises(ContractViolation):
        n_min(0)


def test_ucb_index_examples():
    assert ucb_index(0.0, 1, math.e, 1.0) == pytest.approx(1.0)
    assert ucb_index(5.0, 4, math.e, 4.0) == pytest.approx(6.0)
    with pytest.raises(ContractViolation):
        ucb_index(0.0, 0, 10, 4.0)


@given(st.integers(1, 10_000), st.floats(1.5, 1e6), st.floats(0.01, 100))
def test_bonus_shrinks_with_count(count, budget, c):
    assert ucb_index(0.0, 2 * count, budget, c) < ucb_index(0.0, count, budget, c)


def test_c_for_range_examples():
    assert c_for_range(1.0) == 2.0
    assert c_for_range(0.0) == 0.0
    assert c_for_range(3 * 2 * math.sqrt(2) + 2) == pytest.approx(219.88, abs=0.01)


def test_single_arm_takes_everything():
    best, state = select_profile(fixed_arms([0.3]), 1, 50)
    assert best == 0 and state.counts.tolist() == [50]


def trace_two_arms(values, budget, c):
    """Hand trace of the schedule: warm-up, then argmax of mean + bonus."""
    warm = math.ceil(2 * math.log(budget))
    counts = [warm, warm]
    for _ in range(budget - 2 * warm):
        idx = [values[a] + math.sqrt(c * math.log(budget) / counts[a]) for a in (0, 1)]
        counts[int(idx[1] > idx[0])] += 1
    return counts


def test_two_deterministic_arms():
    best, state = select_profile(fixed_arms([1.0, 0.0]), 2, 20, c=4.0)
    assert best == 0
    assert state.counts.tolist() == trace_two_arms([1.0, 0.0], 20, 4.0)
    assert state.counts[0] > state.counts[1]
    # warm-up first: six pulls of each arm in arm order
    assert [a for a, _, _ in state.log[:12]] == [0] * 6 + [1] * 6


def test_running_means_match_batch():
    _, state = select_profile(gaussian_arms([0.0, 0.2, -0.3]), 3, 200, seed=4)
    for arm in range(3):
        vals = [v for a, v, _ in state.log if a == arm]
        assert abs(state.means[arm] - np.mean(vals)) <= 1e-12
        assert len(vals) == state.counts[arm]


@given(st.integers(1, 12), st.integers(1, 300))
def test_budget_exact(M, B):
    if B < M:
        with pytest.raises(BudgetError):
            select_profile(fixed_arms(list(range(M))), M, B)
        return
    _, state = select_profile(fixed_arms(list(range(M))), M, B)
    assert state.total_pulls == B
    assert np.all(state.counts >= 1)


def test_fallback_warmup_and_disabled_fallback():
    # 5 arms x ceil(2 ln 12) = 5 x 5 > 12, so each arm gets 12 // 5 = 2 and 2 UCB pulls remain
    _, state = select_profile(fixed_arms([0, 1, 2, 3, 4]), 5, 12)
    assert [a for a, _, _ in state.log[:10]] == [0, 0, 1, 1, 2, 2, 3, 3, 4, 4]
    assert state.total_pulls == 12
    with pytest.raises(BudgetError):
        select_profile(fixed_arms([0, 1, 2, 3, 4]), 5, 12, fallback=False)


@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=8), st.integers(8, 120))
def test_zero_variance_picks_true_maximizer(values, B):
    best, _ = select_profile(fixed_arms(values), len(values), max(B, len(values)))
    assert values[best] == max(values)
    assert best == values.index(max(values))


def test_ties_break_to_lowest_index():
    best, _ = select_profile(fixed_arms([1.0, 1.0, 1.0]), 3, 30)
    assert best == 0


def test_uniform_allocation():
    best, state = select_uniform(fixed_arms([0.0, 2.0, 1.0]), 3, 31)
    assert best == 1 and state.counts.tolist() == [10, 10, 10]
    with pytest.raises(BudgetError):
        select_uniform(fixed_arms([0.0, 1.0]), 2, 1)


def test_gaussian_identification_rate():
    means = [0.0] + [-0.5] * 9
    hits = sum(select_profile(gaussian_arms(means), 10, 500, seed=s)[0] == 0 for s in range(200))
    assert hits >= 190


def test_seeds_are_deterministic():
    a = select_profile(gaussian_arms([0.0, 0.1]), 2, 40, seed=3)[1].log
    b = select_profile(gaussian_arms([0.0, 0.1]), 2, 40, seed=3)[1].log
    assert a == b


def test_log_csv(tmp_path):
    _, state = select_profile(fixed_arms([1.0, 0.0]), 2, 20)
    path = tmp_path / "ucb.csv"
    write_log(path, [(7, 0, state)])
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 20
    assert rows[0] == {"seed": "7", "team": "0", "pull": "0", "arm": "0", "return": "1.0", "mean": "1.0"}


def test_state_validation():
    with pytest.raises(ContractViolation):
        BanditState(0, 10, 4.0)
    with pytest.raises(ContractViolation):
        select_profile(fixed_arms([0.0]), 1, 10, c=-1.0)
