"""Team-partitioned tabular Markov games, policy profiles and rollouts.

States are enumerable integers.  Each agent observes a real feature vector
derived from the state; the global observation is the concatenation of the
per-agent vectors in agent-index order.  Joint actions are flattened with a
mixed radix where agent 0 is the most significant digit.

Rewards are stored as per-agent shares ``rewards[i, s, a]``; a team's reward
is the sum of its members' shares, which keeps team rewards well defined when
the agent set is re-partitioned after construction.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractViolation

PROB_TOL = 1e-9


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator keyed by an int or a tuple of ints."""
    if isinstance(seed, (tuple, list)):
        seed = [int(s) for s in seed]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def _frozen(a, dtype=None):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def check_partition(teams, n_agents):
    teams = tuple(tuple(int(i) for i in t) for t in teams)
    if not teams or any(len(t) == 0 for t in teams):
        raise ContractViolation("teams must be a nonempty list of nonempty sets")
    flat = [i for t in teams for i in t]
    if len(flat) != len(set(flat)):
        raise ContractViolation(f"teams overlap: {teams}")
    if sorted(flat) != list(range(n_agents)):
        raise ContractViolation(f"teams {teams} do not cover agents 0..{n_agents - 1}")
    return tuple(tuple(sorted(t)) for t in teams)


@dataclass(frozen=True, eq=False)
class TabularMarkovGame:
    action_counts: tuple
    teams: tuple
    observations: tuple  # per agent, (S, d_i)
    next_states: np.ndarray  # (S, A, K) int
    next_probs: np.ndarray  # (S, A, K) float
    rewards: np.ndarray  # (N, S, A) per-agent reward shares
    initial_dist: np.ndarray  # (S,)
    gamma: float
    horizon: int
    feature_names: tuple = None
    adjacency: np.ndarray | None = None
    name: str = "game"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        set_ = object.__setattr__
        counts = tuple(int(a) for a in self.action_counts)
        if not counts or min(counts) < 1:
            raise ContractViolation("every agent needs at least one action")
        set_(self, "action_counts", counts)
        n = len(counts)
        set_(self, "teams", check_partition(self.teams, n))
        obs = tuple(_frozen(o, float) for o in self.observations)
        if len(obs) != n:
            raise ContractViolation(f"expected {n} observation tables, got {len(obs)}")
        nxt = _frozen(self.next_states, np.int64)
        prob = _frozen(self.next_probs, float)
        S = nxt.shape[0]
        for i, o in enumerate(obs):
            if o.ndim != 2 or o.shape[0] != S:
                raise ContractViolation(
                    f"agent {i}: observation table must be (n_states, dim) with a constant dim")
        A = int(np.prod(counts))
        if nxt.shape[:2] != (S, A) or prob.shape != nxt.shape:
            raise ContractViolation(f"transition tables must be ({S}, {A}, K)")
        if np.any(prob < 0) or np.any(np.abs(prob.sum(axis=2) - 1.0) > PROB_TOL):
            raise ContractViolation("transition rows must be nonnegative and sum to 1")
        if np.any(nxt < 0) or np.any(nxt >= S):
            raise ContractViolation("transition targets out of range")
        rew = _frozen(self.rewards, float)
        if rew.shape != (n, S, A):
            raise ContractViolation(f"rewards must have shape {(n, S, A)}")
        rho = _frozen(self.initial_dist, float)
        if rho.shape != (S,) or np.any(rho < 0) or abs(rho.sum() - 1.0) > PROB_TOL:
            raise ContractViolation("initial distribution must be a probability vector over states")
        if not 0.0 <= float(self.gamma) < 1.0:
            raise ContractViolation("discount must lie in [0, 1)")
        if int(self.horizon) < 1:
            raise ContractViolation("horizon must be positive")
        names = self.feature_names
        if names is None:
            names = tuple(tuple(f"x{k}" for k in range(o.shape[1])) for o in obs)
        names = tuple(tuple(str(x) for x in nm) for nm in names)
        if any(len(nm) != o.shape[1] for nm, o in zip(names, obs)):
            raise ContractViolation("feature_names must match observation dimensions")
        for key, val in (("observations", obs), ("next_states", nxt), ("next_probs", prob),
                         ("rewards", rew), ("initial_dist", rho), ("feature_names", names)):
            set_(self, key, val)
        set_(self, "gamma", float(self.gamma))
        set_(self, "horizon", int(self.horizon))
        if self.adjacency is not None:
            set_(self, "adjacency", _frozen(self.adjacency, float))

    # -- sizes --------------------------------------------------------------
    @property
    def n_states(self) -> int:
        return self.next_states.shape[0]

    @property
    def n_agents(self) -> int:
        return len(self.action_counts)

    @property
    def n_joint(self) -> int:
        return self.next_states.shape[1]

    @property
    def n_teams(self) -> int:
        return len(self.teams)

    @property
    def obs_dims(self) -> tuple:
        return tuple(o.shape[1] for o in self.observations)

    @property
    def obs_slices(self) -> tuple:
        """Slice of the global observation owned by each agent."""
        offsets = np.concatenate([[0], np.cumsum(self.obs_dims)])
        return tuple(slice(int(a), int(b)) for a, b in zip(offsets[:-1], offsets[1:]))

    @property
    def global_obs(self) -> np.ndarray:
        if "global_obs" not in self._cache:
            g = np.concatenate(self.observations, axis=1)
            g.setflags(write=False)
            self._cache["global_obs"] = g
        return self._cache["global_obs"]

    @property
    def strides(self) -> np.ndarray:
        if "strides" not in self._cache:
            counts = self.action_counts
            s = np.ones(len(counts), dtype=np.int64)
            for i in range(len(counts) - 2, -1, -1):
                s[i] = s[i + 1] * counts[i + 1]
            self._cache["strides"] = s
        return self._cache["strides"]

    def encode(self, actions) -> np.ndarray:
        """Per-agent actions (..., N) -> flat joint index (...)."""
        return np.asarray(actions, dtype=np.int64) @ self.strides

    def decode(self, joint) -> np.ndarray:
        """Flat joint index (...) -> per-agent actions (..., N)."""
        joint = np.asarray(joint, dtype=np.int64)
        return (joint[..., None] // self.strides) % np.asarray(self.action_counts)

    def team_of(self, agent: int) -> int:
        for k, t in enumerate(self.teams):
            if agent in t:
                return k
        raise ContractViolation(f"unknown agent {agent}")

    def team_reward(self, team: int) -> np.ndarray:
        """(S, A) reward table of one team."""
        if not 0 <= team < self.n_teams:
            raise ContractViolation(f"invalid team id {team}")
        key = ("team_reward", self.teams, team)
        if key not in self._cache:
            r = self.rewards[list(self.teams[team])].sum(axis=0)
            r.setflags(write=False)
            self._cache[key] = r
        return self._cache[key]

    def with_teams(self, teams) -> "TabularMarkovGame":
        """Same game under another partition; tables are shared, not re-validated."""
        other = copy.copy(self)  # the cache dict stays shared; team keys carry the partition
        object.__setattr__(other, "teams", check_partition(teams, self.n_agents))
        return other


@dataclass(frozen=True, eq=False)
class PolicyProfile:
    """One policy per agent, tabulated over the game's state set.

    ``actions[i, s]`` is the action agent ``i`` takes in state ``s``.  Since
    observations are deterministic functions of the state, this is the same
    thing as an observation-to-action map evaluated everywhere.
    """

    actions: np.ndarray  # (N, S)
    tags: tuple

    def __post_init__(self):
        object.__setattr__(self, "actions", _frozen(self.actions, np.int64))
        object.__setattr__(self, "tags", tuple(self.tags))
        if self.actions.ndim != 2 or len(self.tags) != self.actions.shape[0]:
            raise ContractViolation("profile needs exactly one policy (and tag) per agent")

    def validate(self, game: TabularMarkovGame):
        if self.actions.shape != (game.n_agents, game.n_states):
            raise ContractViolation(
                f"profile covers {self.actions.shape[0]} agents x {self.actions.shape[1]} states, "
                f"game has {game.n_agents} x {game.n_states}")
        for i, n in enumerate(game.action_counts):
            row = self.actions[i]
            if row.min() < 0 or row.max() >= n:
                bad = int(row[(row < 0) | (row >= n)][0])
                raise ContractViolation(f"agent {i} chose action {bad} outside 0..{n - 1}")

    def joint_table(self, game: TabularMarkovGame) -> np.ndarray:
        """(S,) joint action index per state."""
        return self.actions.T @ game.strides

    def replace(self, agents: Sequence[int], other: "PolicyProfile") -> "PolicyProfile":
        """Copy of self with the given agents' policies taken from ``other``."""
        acts = np.array(self.actions)
        tags = list(self.tags)
        for i in agents:
            acts[i] = other.actions[i]
            tags[i] = other.tags[i]
        return PolicyProfile(acts, tags)


def tabulate_policy(game: TabularMarkovGame, agent: int, policy) -> np.ndarray:
    """Evaluate an agent policy on every state through its own observation.

    ``policy`` is an array of per-state actions, or any object with a
    ``predict_batch(obs_matrix)`` method (e.g. a decision tree).
    """
    if hasattr(policy, "predict_batch"):
        return np.asarray(policy.predict_batch(game.observations[agent]), dtype=np.int64)
    arr = np.asarray(policy, dtype=np.int64)
    if arr.shape != (game.n_states,):
        raise ContractViolation(f"agent {agent}: tabulated policy must have one action per state")
    return arr


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray  # (T,)
    observations: np.ndarray  # (T, D) global observations
    actions: np.ndarray  # (T, N)
    team_rewards: np.ndarray  # (T, L)

    def __len__(self):
        return len(self.states)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("states", "observations", "actions", "team_rewards"))


@dataclass(frozen=True, eq=False)
class RolloutBatch:
    """K trajectories stacked along the first axis."""

    states: np.ndarray  # (K, T)
    joint_actions: np.ndarray  # (K, T)
    team_rewards: np.ndarray  # (K, T, L)

    def __len__(self):
        return self.states.shape[0]

    def trajectory(self, game: TabularMarkovGame, k: int) -> Trajectory:
        s = self.states[k]
        return Trajectory(states=s, observations=game.global_obs[s],
                          actions=game.decode(self.joint_actions[k]),
                          team_rewards=self.team_rewards[k])


def _draw_uniforms(seeds, T):
    return np.stack([make_rng(s).random(T + 1) for s in seeds]) if len(seeds) else np.zeros((0, T + 1))


def rollout_batch(game: TabularMarkovGame, profile: PolicyProfile, seeds) -> RolloutBatch:
    """Roll out ``len(seeds)`` independent episodes of ``game.horizon`` steps.

    Episode ``k`` draws every random number from a generator keyed by
    ``seeds[k]`` alone, so batching never changes a trajectory.
    """
    profile.validate(game)
    T = game.horizon
    u = _draw_uniforms(list(seeds), T)
    K = u.shape[0]
    joint = profile.joint_table(game)
    cum_rho = np.cumsum(game.initial_dist)
    cum_rho[-1] = 1.0
    states = np.empty((K, T), dtype=np.int64)
    acts = np.empty((K, T), dtype=np.int64)
    s = np.minimum(np.searchsorted(cum_rho, u[:, 0], side="right"), game.n_states - 1)
    cum_p = game._cache.get("cum_p")
    if cum_p is None:
        cum_p = np.cumsum(game.next_probs, axis=2)
        cum_p[..., -1] = 1.0
        game._cache["cum_p"] = cum_p
    for t in range(T):
        a = joint[s]
        states[:, t] = s
        acts[:, t] = a
        if t + 1 < T:
            k = (cum_p[s, a] <= u[:, t + 1, None]).sum(axis=1)
            k = np.minimum(k, cum_p.shape[2] - 1)
            s = game.next_states[s, a, k]
    team_r = np.stack([game.team_reward(l)[states, acts] for l in range(game.n_teams)], axis=-1)
    return RolloutBatch(states=states, joint_actions=acts, team_rewards=team_r)


def rollout(game: TabularMarkovGame, profile: PolicyProfile, seed) -> Trajectory:
    return rollout_batch(game, profile, [seed]).trajectory(game, 0)


def mean_return(traj, team: int) -> float:
    """Undiscounted per-step team return, (1/T) * sum_t R_team(s_t, a_t)."""
    r = traj.team_rewards
    if not 0 <= team < r.shape[-1]:
        raise ContractViolation(f"invalid team id {team}")
    return float(r[..., team].mean(axis=-1)) if r.ndim == 2 else r[..., team].mean(axis=-1)
