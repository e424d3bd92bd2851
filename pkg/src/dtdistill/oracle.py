"""Exact expert Q-functions for tabular team games.

The expert is the greedy joint policy of the fully cooperative game (sum of
all reward shares), found by value iteration.  Per-agent local Q-functions
are then obtained by evaluating that fixed policy on each agent's own reward
share.  Because policy evaluation is linear in the reward, the Q-function of
any team reward is the sum of its members' local Q-functions, so one oracle
serves every partition of the agent set.

All tables are keyed by global observation, not by state.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ContractViolation, ConvergenceError, ObservationLookupError
from .game import TabularMarkovGame, check_partition

TIE_TOL = 1e-9
MAGIC = b"DTQORACL"
FORMAT_VERSION = 1


def transition_matrix(game: TabularMarkovGame) -> sp.csr_matrix:
    """Sparse (S*A, S) transition matrix, cached on the game."""
    P = game._cache.get("P_sparse")
    if P is None:
        S, A, K = game.next_states.shape
        rows = np.repeat(np.arange(S * A), K)
        P = sp.csr_matrix((game.next_probs.ravel(), (rows, game.next_states.ravel())),
                          shape=(S * A, S))
        P.sum_duplicates()
        game._cache["P_sparse"] = P
    return P


def greedy(q: np.ndarray, tol: float = TIE_TOL) -> np.ndarray:
    """Row-wise argmax that breaks near-ties (within ``tol``) to the lowest index."""
    best = q.max(axis=-1, keepdims=True)
    return np.argmax(q >= best - tol, axis=-1)


@dataclass(frozen=True, eq=False)
class TeamValueOracle:
    action_counts: tuple
    teams: tuple
    obs_keys: np.ndarray  # (n_obs, D) distinct global observations
    state_obs: np.ndarray  # (S,) observation index of each state
    q_local: np.ndarray  # (N, n_obs, A) Q of each agent's own reward share
    expert_joint: np.ndarray  # (n_obs,) expert joint action
    v_state: np.ndarray  # (S,) optimal cooperative value per state
    residual: float
    collisions: int = 0  # states that share their observation with another state
    counters: dict = field(default_factory=lambda: {"lookups": 0}, repr=False)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_agents(self) -> int:
        return len(self.action_counts)

    @property
    def n_joint(self) -> int:
        return self.q_local.shape[2]

    @property
    def strides(self) -> np.ndarray:
        s = np.ones(self.n_agents, dtype=np.int64)
        for i in range(self.n_agents - 2, -1, -1):
            s[i] = s[i + 1] * self.action_counts[i + 1]
        return s

    def decode(self, joint) -> np.ndarray:
        joint = np.asarray(joint, dtype=np.int64)
        return (joint[..., None] // self.strides) % np.asarray(self.action_counts)

    def with_teams(self, teams) -> "TeamValueOracle":
        # cached tables depend only on member sets, so the cache is shared
        return replace(self, teams=check_partition(teams, self.n_agents),
                       counters={"lookups": 0}, _cache=self._cache)

    def team_members(self, team) -> tuple:
        if isinstance(team, (tuple, list)):
            return tuple(team)
        if not 0 <= int(team) < len(self.teams):
            raise ContractViolation(f"invalid team id {team}")
        return self.teams[int(team)]

    # -- lookups ------------------------------------------------------------
    def _key_index(self) -> dict:
        if "keys" not in self._cache:
            self._cache["keys"] = {row.tobytes(): k for k, row in enumerate(self.obs_keys)}
        return self._cache["keys"]

    def index_of(self, obs) -> np.ndarray:
        """Observation indices for global observation rows (n, D) or one row (D,)."""
        obs = np.ascontiguousarray(obs, dtype=float)
        single = obs.ndim == 1
        rows = obs[None] if single else obs
        if rows.shape[1] != self.obs_keys.shape[1]:
            raise ObservationLookupError(
                f"observation dimension {rows.shape[1]} != oracle dimension {self.obs_keys.shape[1]}")
        table = self._key_index()
        out = np.empty(len(rows), dtype=np.int64)
        for k, row in enumerate(rows):
            try:
                out[k] = table[row.tobytes()]
            except KeyError:
                raise ObservationLookupError(
                    f"observation at sample {k} is unknown to the oracle: {row.tolist()}", index=k
                ) from None
        return out[0] if single else out

    def expert_actions(self, obs_idx) -> np.ndarray:
        """Per-agent expert actions (..., N) at observation indices."""
        return self.decode(self.expert_joint[np.asarray(obs_idx)])

    def team_q(self, team) -> np.ndarray:
        """(n_obs, A) team mean Q: every member's Q is that of the team reward."""
        members = self.team_members(team)
        key = ("team_q", members)
        if key not in self._cache:
            self._cache[key] = self.q_local[list(members)].sum(axis=0)
        return self._cache[key]

    def agent_q(self, agent: int) -> np.ndarray:
        """Q of ``agent``, i.e. of its team's reward."""
        for t in self.teams:
            if agent in t:
                return self.team_q(t)
        raise ContractViolation(f"unknown agent {agent}")

    def team_joint_actions(self, team) -> np.ndarray:
        """(|A_team|, |team|) every joint action of the team, lexicographic."""
        members = self.team_members(team)
        grids = np.meshgrid(*[np.arange(self.action_counts[i]) for i in members], indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def team_slice(self, team, obs_idx, opponents=None, q=None) -> np.ndarray:
        """Q over every team joint action with the other agents held fixed.

        ``opponents`` holds full per-agent action vectors (n, N); only the
        entries of non-members are used.  Defaults to the expert's actions.
        Returns an (n, |A_team|) matrix; only team joint actions are touched.
        """
        members = list(self.team_members(team))
        obs_idx = np.atleast_1d(np.asarray(obs_idx, dtype=np.int64))
        if opponents is None:
            opponents = self.expert_actions(obs_idx)
        opponents = np.broadcast_to(np.asarray(opponents, dtype=np.int64), (len(obs_idx), self.n_agents))
        strides = self.strides
        others = [j for j in range(self.n_agents) if j not in members]
        base = opponents[:, others] @ strides[others] if others else np.zeros(len(obs_idx), np.int64)
        offsets = self.team_joint_actions(members) @ strides[members]
        q = self.team_q(members) if q is None else q
        self.counters["lookups"] += len(obs_idx) * len(offsets)
        return q[obs_idx[:, None], base[:, None] + offsets[None, :]]

    def v_bar(self, team, obs_idx) -> np.ndarray:
        return self.team_slice(team, obs_idx).max(axis=1)

    # -- serialization ------------------------------------------------------
    def save(self, path) -> None:
        """Binary table file: header, then little-endian int64/float64 arrays."""
        N, (n_obs, D), A, S = self.n_agents, self.obs_keys.shape, self.n_joint, len(self.state_obs)
        parts = [MAGIC, struct.pack("<IIIQQQQ", FORMAT_VERSION, N, len(self.teams), n_obs, D, A, S)]
        parts.append(np.asarray(self.action_counts, "<i8").tobytes())
        for t in self.teams:
            parts.append(np.asarray([len(t), *t], "<i8").tobytes())
        parts += [
            np.asarray(self.obs_keys, "<f8").tobytes(),
            np.asarray(self.state_obs, "<i8").tobytes(),
            np.asarray(self.expert_joint, "<i8").tobytes(),
            np.asarray(self.q_local, "<f8").tobytes(),
            np.asarray(self.v_state, "<f8").tobytes(),
            struct.pack("<dq", self.residual, self.collisions),
        ]
        Path(path).write_bytes(b"".join(parts))

    @classmethod
    def load(cls, path) -> "TeamValueOracle":
        buf = Path(path).read_bytes()
        if buf[:8] != MAGIC:
            raise ValueError(f"{path}: not an oracle table file")
        version, N, L, n_obs, D, A, S = struct.unpack_from("<IIIQQQQ", buf, 8)
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        pos = 8 + struct.calcsize("<IIIQQQQ")

        def take(n, dtype):
            nonlocal pos
            arr = np.frombuffer(buf, dtype=dtype, count=n, offset=pos)
            pos += arr.nbytes
            return arr.astype(dtype[1:])

        counts = tuple(int(x) for x in take(N, "<i8"))
        teams = []
        for _ in range(L):
            size = int(take(1, "<i8")[0])
            teams.append(tuple(int(x) for x in take(size, "<i8")))
        obs_keys = take(n_obs * D, "<f8").reshape(n_obs, D)
        state_obs = take(S, "<i8")
        expert = take(n_obs, "<i8")
        q_local = take(N * n_obs * A, "<f8").reshape(N, n_obs, A)
        v_state = take(S, "<f8")
        residual, collisions = struct.unpack_from("<dq", buf, pos)
        return cls(action_counts=counts, teams=tuple(teams), obs_keys=obs_keys, state_obs=state_obs,
                   q_local=q_local, expert_joint=expert, v_state=v_state, residual=residual,
                   collisions=int(collisions))


def _visitation(game, P, policy, horizon):
    """Expected visits to each state over ``horizon`` steps under ``policy``."""
    S, A = game.n_states, game.n_joint
    P_pi = P[np.arange(S) * A + policy]
    d = game.initial_dist.copy()
    total = np.zeros(S)
    for _ in range(horizon):
        total += d
        d = P_pi.T @ d
    return total


def solve(game: TabularMarkovGame, tol: float = 1e-8, max_iter: int = 100_000) -> TeamValueOracle:
    if tol <= 0:
        raise ContractViolation("tol must be positive")
    S, A, N = game.n_states, game.n_joint, game.n_agents
    gamma = game.gamma
    P = transition_matrix(game)
    r_total = game.rewards.sum(axis=0)

    v = np.zeros(S)
    residual = np.inf
    for _ in range(max_iter):
        q = r_total + gamma * (P @ v).reshape(S, A)
        v_new = q.max(axis=1)
        residual = float(np.max(np.abs(v_new - v)))
        v = v_new
        if residual < tol:
            break
    else:
        raise ConvergenceError("value iteration did not converge", residual)
    q = r_total + gamma * (P @ v).reshape(S, A)
    policy = greedy(q)

    # evaluate the fixed expert on every agent's reward share
    idx = np.arange(S) * A + policy
    P_pi = P[idx]
    r_pi = game.rewards[:, np.arange(S), policy].T  # (S, N)
    v_loc = np.zeros((S, N))
    eval_tol = tol * 1e-2
    for _ in range(max_iter):
        v_next = r_pi + gamma * (P_pi @ v_loc)
        delta = float(np.max(np.abs(v_next - v_loc)))
        v_loc = v_next
        if delta < eval_tol:
            break
    else:
        raise ConvergenceError("policy evaluation did not converge", delta)
    q_state = game.rewards + gamma * (P @ v_loc).T.reshape(N, S, A)

    keys, state_obs = np.unique(game.global_obs, axis=0, return_inverse=True)
    state_obs = state_obs.ravel()
    n_obs = len(keys)
    if n_obs == S:
        order = np.empty(S, dtype=np.int64)
        order[state_obs] = np.arange(S)
        q_obs = q_state[:, order]
        expert = policy[order]
        collisions = 0
    else:
        w = _visitation(game, P, policy, game.horizon)
        group_w = np.bincount(state_obs, weights=w, minlength=n_obs)
        group_n = np.bincount(state_obs, minlength=n_obs)
        w = np.where(group_w[state_obs] > 0, w, 1.0)
        denom = np.where(group_w > 0, group_w, group_n)
        q_obs = np.zeros((N, n_obs, A))
        for i in range(N):
            np.add.at(q_obs[i], state_obs, q_state[i] * w[:, None])
        q_obs /= denom[None, :, None]
        expert = greedy(q_obs.sum(axis=0))
        collisions = int(np.sum(group_n[state_obs] > 1))
    return TeamValueOracle(action_counts=game.action_counts, teams=game.teams, obs_keys=keys,
                           state_obs=state_obs, q_local=q_obs, expert_joint=expert, v_state=v,
                           residual=residual, collisions=collisions)


def q_range(oracle: TeamValueOracle, team, obs, opponents_fixed=None):
    """(min, max) of the team mean Q over the team's joint actions at one observation."""
    k = oracle.index_of(obs)
    if opponents_fixed is not None:
        opponents_fixed = np.asarray(opponents_fixed)[None]
    row = oracle.team_slice(team, [k], opponents_fixed)[0]
    return float(row.min()), float(row.max())


def expert_profile(game: TabularMarkovGame, oracle: TeamValueOracle):
    """Tabulated expert profile acting on each state's observation."""
    from .game import PolicyProfile

    acts = oracle.expert_actions(oracle.state_obs).T
    return PolicyProfile(acts, ["expert"] * game.n_agents)
