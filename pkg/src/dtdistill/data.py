"""Aggregated rollout datasets, centralised-Q weighting and adaptive rollout budgets.

Every training rollout is relabelled with the expert joint action and
appended to one shared, append-only store; since all teams receive the same
rollouts, each team's dataset is that store seen through its own weight
vector.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, EmptySupportError, ObservationLookupError
from .game import PolicyProfile, TabularMarkovGame, make_rng, rollout_batch
from .oracle import TeamValueOracle

UNBOUNDED = math.inf
# relative size below which a weight is treated as an exact tie (float noise)
ZERO_TOL = 1e-9


@dataclass
class WeightedDataset:
    obs_dim: int
    n_agents: int
    epsilon: float = 0.0
    _obs: list = field(default_factory=list, repr=False)
    _actions: list = field(default_factory=list, repr=False)
    _iters: list = field(default_factory=list, repr=False)
    _index: list = field(default_factory=list, repr=False)
    _key_table: object = field(default=None, repr=False)
    weights: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ContractViolation("epsilon must be >= 0")

    def __len__(self):
        return sum(len(a) for a in self._actions)

    def append(self, obs, actions, iteration: int, obs_index=None, key_table=None) -> None:
        """Add samples; ``obs_index`` optionally records their rows in ``key_table``."""
        obs = np.asarray(obs, dtype=float)
        actions = np.asarray(actions, dtype=np.int64)
        if obs.ndim != 2 or obs.shape[1] != self.obs_dim or actions.shape != (len(obs), self.n_agents):
            raise ContractViolation("append needs (n, obs_dim) observations and (n, n_agents) actions")
        self._obs.append(obs)
        self._actions.append(actions)
        self._iters.append(np.full(len(obs), iteration, dtype=np.int64))
        if obs_index is None or (self._obs[:-1] and self._key_table is not key_table):
            self._key_table = None
        elif len(self._obs) == 1:
            self._key_table = key_table
        self._index.append(None if obs_index is None else np.asarray(obs_index, dtype=np.int64))
        self.__dict__.pop("_concat", None)

    def oracle_index(self, oracle: TeamValueOracle):
        """Recorded oracle keys of every sample, or None if they must be looked up."""
        if self._key_table is not None and self._key_table is oracle.obs_keys:
            return np.concatenate(self._index) if self._index else np.zeros(0, np.int64)
        return None

    def _cat(self):
        cat = self.__dict__.get("_concat")
        if cat is None:
            if self._obs:
                cat = (np.concatenate(self._obs), np.concatenate(self._actions), np.concatenate(self._iters))
            else:
                cat = (np.zeros((0, self.obs_dim)), np.zeros((0, self.n_agents), np.int64),
                       np.zeros(0, np.int64))
            self.__dict__["_concat"] = cat
        return cat

    @property
    def observations(self) -> np.ndarray:
        return self._cat()[0]

    @property
    def actions(self) -> np.ndarray:
        return self._cat()[1]

    @property
    def iterations(self) -> np.ndarray:
        return self._cat()[2]

    def dump(self, path_or_file, groups=None) -> None:
        """Tab-separated rows: iteration, group, observation, action, weight."""
        groups = list(self.weights) if groups is None else groups
        obs, acts, iters = self._cat()
        lines = ["iteration\tteam\tobservation\taction\tweight"]
        for g in groups:
            w = self.weights[g]
            for k in range(len(w)):
                lines.append("\t".join([
                    str(iters[k]), str(g), ",".join(f"{v:g}" for v in obs[k]),
                    ",".join(str(a) for a in acts[k]), repr(float(w[k]))]))
        text = "\n".join(lines) + "\n"
        if hasattr(path_or_file, "write"):
            path_or_file.write(text)
        else:
            with open(path_or_file, "w") as fh:
                fh.write(text)


def _lookup(oracle: TeamValueOracle, ds: WeightedDataset):
    idx = ds.oracle_index(oracle)
    if idx is not None:
        return idx
    try:
        return oracle.index_of(ds.observations)
    except ObservationLookupError as exc:
        raise ObservationLookupError(f"weight computation: {exc}", index=exc.index) from None


def _snap(v_bar, low):
    p = v_bar - low
    scale = 1.0 + np.abs(v_bar)
    return np.where(p <= ZERO_TOL * scale, 0.0, p)


def compute_weights(ds: WeightedDataset, team, oracle: TeamValueOracle) -> np.ndarray:
    """Team weights: best minus worst team joint action under the team mean Q,
    with every agent outside the team playing its expert action."""
    idx = _lookup(oracle, ds)
    if len(idx) == 0:
        return np.zeros(0)
    q = oracle.team_slice(team, idx)
    return _snap(q.max(axis=1), q.min(axis=1))


def compute_independent_weights(ds: WeightedDataset, agent: int, oracle: TeamValueOracle) -> np.ndarray:
    """Per-agent weights varying only ``agent``'s own action (no team coordination)."""
    idx = _lookup(oracle, ds)
    if len(idx) == 0:
        return np.zeros(0)
    q = oracle.team_slice((agent,), idx, q=oracle.agent_q(agent))
    return _snap(q.max(axis=1), q.min(axis=1))


def dropped_count(weights, epsilon: float = 0.0) -> int:
    return int(np.count_nonzero(np.asarray(weights) <= epsilon))


def compute_k_drop(weights_by_group, horizon: int, epsilon: float = 0.0) -> int:
    """min over groups of ceil(#{p <= epsilon} / T)."""
    if horizon < 1:
        raise ContractViolation("horizon must be positive")
    groups = weights_by_group.values() if isinstance(weights_by_group, dict) else weights_by_group
    counts = [dropped_count(w, epsilon) for w in groups]
    if not counts:
        return 0
    return min(math.ceil(c / horizon) for c in counts)


def resample(weights, target_size: int, seed) -> np.ndarray:
    """Indices of ``target_size`` i.i.d. draws with probability proportional to ``weights``."""
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ContractViolation("weights must be nonnegative")
    total = w.sum()
    if not total > 0:
        raise EmptySupportError("cannot resample: every sample has zero weight")
    cdf = np.cumsum(w) / total
    u = make_rng(seed).random(int(target_size))
    idx = np.searchsorted(cdf, u, side="right")
    # guard against the cdf ending a hair below 1
    last = int(np.nonzero(w > 0)[0][-1])
    return np.minimum(idx, last)


@dataclass
class RolloutBudget:
    K_train: int
    B_train: int
    horizon: int
    n_train: int = 0
    K_drop: float = UNBOUNDED
    m: int = 1
    warmup_rollouts: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.K_train < 1 or self.B_train < 0:
            raise ContractViolation("K_train must be positive and B_train nonnegative")

    def next_count(self, adaptive: bool = True) -> int:
        """Rollouts for the current iteration.

        The warm-up iteration always collects ``K_train`` expert rollouts and
        does not count against the budget.  Later iterations collect
        ``min(K_drop, K_train)`` (just ``K_train`` when not adaptive), clipped
        to what is left of ``B_train``.
        """
        if self.m == 1:
            return self.K_train
        k = min(self.K_drop, self.K_train) if adaptive else self.K_train
        return int(max(0, min(k, self.B_train - self.n_train)))


def collect_training(ds: WeightedDataset, budget: RolloutBudget, profile: PolicyProfile,
                     oracle: TeamValueOracle, game: TabularMarkovGame, seed, adaptive: bool = True):
    """Roll out the current profile, relabel with expert joint actions, aggregate.

    Returns ``(ds, budget, k)`` with ``k`` the number of rollouts performed.
    """
    k = budget.next_count(adaptive)
    if budget.m > 1:
        budget.n_train += k
    else:
        budget.warmup_rollouts += k
    budget.history.append(k)
    if k > 0:
        seeds = [(*_seed_tuple(seed), budget.m, j) for j in range(k)]
        batch = rollout_batch(game, profile, seeds)
        obs = game.global_obs[batch.states.ravel()]
        keys = oracle.index_of(obs)
        ds.append(obs, oracle.expert_actions(keys), budget.m, obs_index=keys, key_table=oracle.obs_keys)
    return ds, budget, k


def _seed_tuple(seed):
    return tuple(seed) if isinstance(seed, (tuple, list)) else (int(seed),)
