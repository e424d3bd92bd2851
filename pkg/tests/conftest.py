import numpy as np
import pytest
from hypothesis import settings

from dtdistill.game import TabularMarkovGame
from dtdistill.oracle import TeamValueOracle

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def random_game(rng, n_states=4, action_counts=(2, 2), branching=2, teams=None, gamma=0.9,
                horizon=5, tie_states=0):
    """Random game with one-hot state features so observations never collide.

    The first ``tie_states`` states ignore the joint action entirely, which
    gives exact zero-weight samples.
    """
    n = len(action_counts)
    A = int(np.prod(action_counts))
    S = n_states
    nxt = rng.integers(0, S, size=(S, A, branching))
    probs = rng.dirichlet(np.ones(branching), size=(S, A))
    rewards = rng.uniform(-1, 1, size=(n, S, A))
    for s in range(tie_states):
        nxt[s] = nxt[s, 0]
        probs[s] = probs[s, 0]
        rewards[:, s, :] = rewards[:, s, :1]
    obs = [np.eye(S)] + [rng.integers(0, 3, size=(S, 2)).astype(float) for _ in range(n - 1)]
    return TabularMarkovGame(
        action_counts=action_counts, teams=teams or (tuple(range(n)),), observations=obs,
        next_states=nxt, next_probs=probs, rewards=rewards, initial_dist=rng.dirichlet(np.ones(S)),
        gamma=gamma, horizon=horizon)


def table_oracle(team_q, action_counts, teams=None, expert_joint=None):
    """Oracle over hand-written team Q tables (n_obs, A); shares split evenly over agents."""
    team_q = np.atleast_2d(np.asarray(team_q, dtype=float))
    n = len(action_counts)
    n_obs = len(team_q)
    if expert_joint is None:
        expert_joint = team_q.argmax(axis=1)
    return TeamValueOracle(
        action_counts=tuple(action_counts), teams=teams or (tuple(range(n)),),
        obs_keys=np.arange(n_obs, dtype=float)[:, None], state_obs=np.arange(n_obs),
        q_local=np.broadcast_to(team_q / n, (n,) + team_q.shape).copy(),
        expert_joint=np.asarray(expert_joint), v_state=team_q.max(axis=1), residual=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
