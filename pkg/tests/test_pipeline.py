import numpy as np
import pytest

from dtdistill import envs
from dtdistill.data import compute_independent_weights
from dtdistill.errors import ConfigError, StageError
from dtdistill.game import TabularMarkovGame
from dtdistill.pipeline import STAGES, ExperimentConfig, expert_for, run, run_hydraviper, run_imitation_dt

SMALL = dict(env={"kind": "coord_targets", "horizon": 8}, iterations=4, k_train=3, b_train=6, b_valid=40,
             epsilon=2.0)


def small(**kw):
    return ExperimentConfig(**{**SMALL, **kw})


def test_config_roundtrip(tmp_path):
    cfg = small(seeds=[1, 2], clustering="q-influence", n_teams=2, env={"kind": "corridor", "n_intersections": 2})
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    assert ExperimentConfig.load(path) == cfg
    assert ExperimentConfig.from_json(cfg.to_json()).to_json() == cfg.to_json()


@pytest.mark.parametrize("bad", [{"b_train": 0}, {"k_train": -1}, {"iterations": 1.5}, {"disable_cq": 1},
                                 {"mode": "viper"}, {"clustering": "metis"}, {"n_teams": 2},
                                 {"seeds": []}, {"b_valid": 3}, {"epsilon": -0.1}])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        small(**bad)


def test_unknown_keys_and_overrides():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"budget": 3})
    cfg = small().with_overrides({"env.horizon": 5, "max_depth": 2})
    assert cfg.env["horizon"] == 5 and cfg.max_depth == 2
    with pytest.raises(ConfigError):
        small().with_overrides({"depth": 2})
    with pytest.raises(ConfigError):
        small().with_overrides({"max_depth.x": 2})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json("[1, 2]")


def test_single_iteration_uses_warmup_only():
    rep = run(small(iterations=1), 0)
    assert rep.selected == [1]
    assert rep.train_rollouts == 0 and rep.warmup_rollouts == 3
    assert rep.bandits[0].counts.tolist() == [40]
    assert set(rep.dataset.iterations.tolist()) == {1}


def test_ledgers_match_internal_counters():
    for kw in ({}, {"disable_tra": True}, {"disable_vrucb": True}, {"epsilon": 0.0}):
        cfg = small(**kw)
        rep = run(cfg, 3)
        assert rep.train_rollouts == sum(rep.rollout_schedule[1:]) <= cfg.b_train
        assert rep.valid_rollouts == sum(s.total_pulls for s in rep.bandits) <= cfg.b_valid
        assert len(rep.dataset) == game_horizon(cfg) * sum(rep.rollout_schedule)


def game_horizon(cfg):
    return expert_for(cfg.env, cfg.solver_tol)[0].horizon


def test_disable_tra_uses_fixed_rollouts():
    rep = run(small(disable_tra=True, b_train=100), 0)
    assert rep.rollout_schedule == [3, 3, 3, 3]
    rep = run(small(disable_tra=True, b_train=7), 0)
    assert rep.rollout_schedule == [3, 3, 3, 1]


def test_adaptive_schedule_follows_k_drop():
    # with epsilon = 0 no sample is ever tied on this game, so K_drop = 0 after warm-up
    rep = run(small(epsilon=0.0), 0)
    assert rep.rollout_schedule == [3, 0, 0, 0]


def test_disable_vrucb_is_uniform():
    rep = run(small(disable_vrucb=True, b_valid=43), 0)
    assert rep.bandits[0].counts.tolist() == [10, 10, 10, 10]


def test_disable_cq_uses_independent_weights():
    cfg = small(disable_cq=True)
    rep = run(cfg, 0)
    game, oracle = expert_for(cfg.env, cfg.solver_tol)
    for i in range(2):
        np.testing.assert_array_equal(rep.dataset.weights[i], compute_independent_weights(rep.dataset, i, oracle))
    assert set(rep.dataset.weights) == {0, 1}


def test_stage_times_cover_wall_clock():
    rep = run(small(), 1)
    assert set(rep.stage_seconds) == set(STAGES)
    assert abs(sum(rep.stage_seconds.values()) - rep.wall_seconds) <= 0.05 * rep.wall_seconds


def test_runs_are_deterministic():
    a, b = run(small(), 5), run(small(), 5)
    assert a.row() == b.row()
    assert all(x == y for x, y in zip(a.trees, b.trees))


def test_imitation_collects_expert_rollouts():
    cfg = small(mode="imitation_dt")
    rep = run(cfg, 0)
    assert rep.train_rollouts == cfg.b_train and rep.warmup_rollouts == cfg.k_train
    assert rep.valid_rollouts == 0 and rep.selected == []


def one_state_game(cfg):
    return TabularMarkovGame(
        action_counts=(2, 3), teams=((0, 1),), observations=[np.zeros((1, 2)), np.ones((1, 1))],
        next_states=np.zeros((1, 6, 1), int), next_probs=np.ones((1, 6, 1)),
        rewards=np.tile(np.array([0.0, 0.1, 0.2, 0.3, 1.0, 0.4]) / 2, (2, 1, 1)), initial_dist=[1.0],
        gamma=0.9, horizon=4)


def test_one_state_game_gives_same_trees(monkeypatch):
    monkeypatch.setitem(envs.ENV_BUILDERS, "one_state", (dict, one_state_game))
    cfg = ExperimentConfig(env={"kind": "one_state"}, iterations=1, k_train=2, b_train=4, b_valid=5)
    a = run_hydraviper(cfg, 0)
    b = run_imitation_dt(cfg, 0)
    assert all(x == y for x, y in zip(a.trees, b.trees))
    assert [t.action[0] for t in a.trees] == [1, 1]


def test_clustered_run_reports_teams():
    cfg = small(env={"kind": "corridor", "n_intersections": 4}, clustering="q-influence",
                n_teams=2, probe_rollouts=5)
    rep = run(cfg, 0)
    assert rep.teams == ((0, 1), (2, 3))
    assert len(rep.bandits) == 2 and all(s.total_pulls == 20 for s in rep.bandits)
    assert rep.graph is not None and rep.graph.n_nodes == 4
    env_cfg = cfg.with_overrides({"clustering": "env-graph"})
    assert run(env_cfg, 0).teams == ((0, 1), (2, 3))


def test_module_errors_carry_stage(monkeypatch):
    def broken(cfg):
        raise envs.ConfigError("broken env")
    monkeypatch.setitem(envs.ENV_BUILDERS, "broken", (dict, broken))
    with pytest.raises(StageError, match="setup"):
        run(ExperimentConfig(env={"kind": "broken"}), 0)
