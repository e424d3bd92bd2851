import numpy as np
import pytest

from conftest import random_game, table_oracle
from oracles import best_undiscounted_return, finite_horizon_optimal_q
from dtdistill.envs import CoordTargetsConfig, build_coord_targets
from dtdistill.errors import ConvergenceError, ObservationLookupError
from dtdistill.game import TabularMarkovGame, mean_return, rollout
from dtdistill.oracle import TeamValueOracle, expert_profile, greedy, q_range, solve, transition_matrix


def single_state_game(reward=1.0, gamma=0.5, n_actions=1):
    return TabularMarkovGame(
        action_counts=(n_actions,), teams=((0,),), observations=[np.zeros((1, 1))],
        next_states=np.zeros((1, n_actions, 1), int), next_probs=np.ones((1, n_actions, 1)),
        rewards=np.full((1, 1, n_actions), reward), initial_dist=[1.0], gamma=gamma, horizon=3)


def test_geometric_value():
    oracle = solve(single_state_game())
    assert oracle.v_state[0] == pytest.approx(2.0, abs=1e-7)
    assert oracle.team_q(0)[0, 0] == pytest.approx(2.0, abs=1e-7)


def test_zero_reward_ties_break_to_action_zero():
    oracle = solve(single_state_game(reward=0.0, n_actions=3))
    np.testing.assert_array_equal(oracle.team_q(0), 0.0)
    assert oracle.expert_joint[0] == 0
    np.testing.assert_array_equal(greedy(np.array([[1.0, 1.0 + 1e-12, 0.5]])), [0])


@pytest.mark.parametrize("seed", range(5))
def test_q_within_truncation_bound(seed):
    rng = np.random.default_rng(seed)
    game = random_game(rng, n_states=4, action_counts=(2, 2), gamma=0.6)
    oracle = solve(game, tol=1e-12)
    r = game.rewards.sum(axis=0)
    depth = 8
    brute = finite_horizon_optimal_q(game.next_states, game.next_probs, r, game.gamma, depth)
    bound = game.gamma**depth * np.abs(r).max() / (1 - game.gamma)
    # one-hot features: observation k is state k
    q = oracle.team_q(0)
    for (s, a), value in brute.items():
        assert abs(q[oracle.state_obs[s], a] - value) <= bound + 1e-9


def test_q_range_examples():
    single = table_oracle([[0.2, 1.0]], (2,))
    assert q_range(single, 0, [0.0]) == (0.2, 1.0)
    pair = table_oracle([[1.0, 3.0, 0.0, 2.0]], (2, 2))
    assert q_range(pair, 0, [0.0]) == pytest.approx((0.0, 3.0))
    flat = table_oracle([[0.7, 0.7, 0.7, 0.7]], (2, 2))
    lo, hi = q_range(flat, 0, [0.0])
    assert lo == hi


def test_q_range_touches_only_team_actions():
    rng = np.random.default_rng(3)
    oracle = solve(random_game(rng, n_states=3, action_counts=(2, 3, 4), teams=((0, 2), (1,))))
    obs = oracle.obs_keys[1]
    oracle.counters["lookups"] = 0
    q_range(oracle, 0, obs)
    assert oracle.counters["lookups"] == 2 * 4
    oracle.counters["lookups"] = 0
    q_range(oracle, 1, obs)
    assert oracle.counters["lookups"] == 3


def test_q_range_with_fixed_opponents():
    # each agent holds half of the table; agent 1 fixed to action 1 leaves columns 1 and 3
    oracle = table_oracle([[1.0, 3.0, 0.0, 2.0]], (2, 2), teams=((0,), (1,)))
    assert q_range(oracle, 0, [0.0], opponents_fixed=[0, 1]) == pytest.approx((1.0, 1.5))


def test_unknown_observation_raises():
    oracle = table_oracle([[0.0, 1.0]], (2,))
    with pytest.raises(ObservationLookupError):
        q_range(oracle, 0, [5.0])
    with pytest.raises(ObservationLookupError) as err:
        oracle.index_of(np.array([[0.0], [2.0]]))
    assert err.value.index == 1


@pytest.mark.parametrize("seed", range(3))
def test_bellman_residual_and_vbar(seed):
    rng = np.random.default_rng(seed)
    game = random_game(rng, n_states=6, action_counts=(2, 2), teams=((0,), (1,)))
    tol = 1e-8
    oracle = solve(game, tol=tol)
    P = transition_matrix(game)
    q = game.rewards.sum(axis=0) + game.gamma * (P @ oracle.v_state).reshape(game.n_states, -1)
    # residual of a contraction after convergence: |TV - V| <= gamma * last step
    assert np.max(np.abs(q.max(axis=1) - oracle.v_state)) < tol
    idx = np.arange(len(oracle.obs_keys))
    for t in range(2):
        vbar = oracle.v_bar(t, idx)
        assert np.all(vbar >= oracle.team_q(t)[idx, oracle.expert_joint] - 1e-8)


def test_team_q_is_mean_of_member_qs():
    rng = np.random.default_rng(7)
    game = random_game(rng, n_states=5, action_counts=(2, 2, 2), teams=((0, 2), (1,)))
    oracle = solve(game)
    np.testing.assert_allclose(oracle.team_q(0), (oracle.agent_q(0) + oracle.agent_q(2)) / 2)
    team_only = game.with_teams(((0, 1, 2),))
    np.testing.assert_allclose(solve(team_only).team_q(0), oracle.q_local.sum(axis=0))


def test_expert_matches_exhaustive_optimum_on_small_grid():
    for T in (1, 2, 3, 4):
        game = build_coord_targets(CoordTargetsConfig(grid_side=3, n_agents=2, horizon=T))
        oracle = solve(game)
        prof = expert_profile(game, oracle)
        r = game.team_reward(0)[:, 0]
        assert np.allclose(game.team_reward(0), r[:, None])  # reward depends on state only
        nxt = game.next_states[..., 0]
        for s in np.flatnonzero(game.initial_dist):
            init = np.zeros(game.n_states)
            init[s] = 1.0
            g = TabularMarkovGame(action_counts=game.action_counts, teams=game.teams,
                                  observations=game.observations, next_states=game.next_states,
                                  next_probs=game.next_probs, rewards=game.rewards,
                                  initial_dist=init, gamma=game.gamma, horizon=T)
            got = mean_return(rollout(g, prof, 0), 0) * T
            best = best_undiscounted_return(nxt, r, T, s)
            assert got == pytest.approx(best, abs=1e-6)


def test_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(11)
    oracle = solve(random_game(rng, n_states=5, teams=((0,), (1,))))
    path = tmp_path / "oracle.bin"
    oracle.save(path)
    back = TeamValueOracle.load(path)
    assert back.teams == oracle.teams and back.action_counts == oracle.action_counts
    np.testing.assert_array_equal(back.q_local, oracle.q_local)
    np.testing.assert_array_equal(back.expert_joint, oracle.expert_joint)
    np.testing.assert_array_equal(back.obs_keys, oracle.obs_keys)
    assert back.residual == oracle.residual
    path.write_bytes(b"NOTMAGIC" + path.read_bytes()[8:])
    with pytest.raises(ValueError):
        TeamValueOracle.load(path)


def test_non_convergence_carries_residual():
    with pytest.raises(ConvergenceError) as err:
        solve(single_state_game(gamma=0.99), tol=1e-10, max_iter=5)
    assert err.value.residual > 0


def test_observation_collisions_average_by_visits():
    # two states share one observation; state 1 is never visited from the start state 0
    obs = [np.array([[0.0], [1.0], [1.0]])]
    nxt = np.array([[[1]], [[1]], [[2]]])
    rewards = np.array([0.0, 1.0, 5.0]).reshape(1, 3, 1)
    game = TabularMarkovGame(action_counts=(1,), teams=((0,),), observations=obs, next_states=nxt,
                             next_probs=np.ones((3, 1, 1)), rewards=rewards, initial_dist=[1, 0, 0],
                             gamma=0.5, horizon=4)
    oracle = solve(game)
    assert oracle.collisions == 2
    k = oracle.index_of([1.0])
    assert oracle.team_q(0)[k, 0] == pytest.approx(2.0, abs=1e-6)  # state 1's value only
