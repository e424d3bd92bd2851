"""Built-in desk-scale environments.

``coord_targets``: agents on a small grid must split up to cover one target
each.  ``corridor``: a chain of signalised intersections where a served
vehicle flows into the next intersection's main-road queue.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .game import TabularMarkovGame

MAX_STATES = 10**6

# stay, up, down, left, right
MOVES = np.array([(0, 0), (0, -1), (0, 1), (-1, 0), (1, 0)])


@dataclass(frozen=True)
class CoordTargetsConfig:
    grid_side: int = 3
    n_agents: int = 2
    collision_penalty: float = -1.0
    horizon: int = 25
    gamma: float = 0.95
    targets: tuple | None = None

    def __post_init__(self):
        if self.grid_side < 2:
            raise ConfigError("grid_side must be >= 2")
        if self.n_agents not in (2, 3):
            raise ConfigError("n_agents must be 2 or 3")
        if self.collision_penalty > 0:
            raise ConfigError("collision_penalty must be <= 0")
        if self.horizon < 1:
            raise ConfigError("horizon must be positive")
        targets = self.resolved_targets()
        if len(targets) != self.n_agents:
            raise ConfigError("need exactly one target per agent")
        for x, y in targets:
            if not (0 <= x < self.grid_side and 0 <= y < self.grid_side):
                raise ConfigError(f"target {(x, y)} outside the grid")

    def resolved_targets(self):
        if self.targets is not None:
            return tuple(tuple(int(v) for v in t) for t in self.targets)
        g = self.grid_side
        if self.n_agents == 2:
            return ((0, 0), (g - 1, g - 1))
        return ((0, 0), (g - 1, 0), (g // 2, g - 1))


@dataclass(frozen=True)
class CorridorConfig:
    n_intersections: int = 3
    queue_cap: int = 2
    arrival_probs: tuple | float = 0.3
    phases_per_intersection: int = 2
    horizon: int = 25
    gamma: float = 0.95

    @property
    def n_entry_lanes(self) -> int:
        return 1 + self.n_intersections * (self.phases_per_intersection - 1)

    def resolved_arrivals(self) -> np.ndarray:
        p = np.atleast_1d(np.asarray(self.arrival_probs, dtype=float))
        if p.size == 1:
            p = np.full(self.n_entry_lanes, p[0])
        return p

    def __post_init__(self):
        if not 2 <= self.n_intersections <= 7:
            raise ConfigError("n_intersections must be in 2..7")
        if self.queue_cap < 1:
            raise ConfigError("queue_cap must be >= 1")
        if self.phases_per_intersection < 2:
            raise ConfigError("phases_per_intersection must be >= 2")
        if self.horizon < 1:
            raise ConfigError("horizon must be positive")
        p = self.resolved_arrivals()
        if p.size != self.n_entry_lanes:
            raise ConfigError(f"expected {self.n_entry_lanes} arrival probabilities, got {p.size}")
        if np.any(p < 0) or np.any(p > 1):
            raise ConfigError("arrival probabilities must lie in [0, 1]")


def _radix_decode(index, base, digits):
    """index (S,) -> (S, digits) with digit 0 most significant."""
    out = np.empty((len(index), digits), dtype=np.int64)
    rem = np.array(index, dtype=np.int64)
    for d in range(digits - 1, -1, -1):
        out[:, d] = rem % base
        rem //= base
    return out


def _radix_encode(digits, base):
    idx = np.zeros(digits.shape[:-1], dtype=np.int64)
    for d in range(digits.shape[-1]):
        idx = idx * base + digits[..., d]
    return idx


def coord_targets_reward(positions, targets, collision_penalty):
    """Team reward for agent positions (..., n, 2)."""
    positions = np.asarray(positions)
    tgt = np.asarray(targets)
    # (..., n_agents, n_targets)
    dist = np.abs(positions[..., :, None, :] - tgt[None, :, :]).sum(-1)
    reward = -dist.min(axis=-2).sum(-1).astype(float)
    n = positions.shape[-2]
    collisions = np.zeros(positions.shape[:-2])
    for i, j in itertools.combinations(range(n), 2):
        collisions += np.all(positions[..., i, :] == positions[..., j, :], axis=-1)
    return reward + collision_penalty * collisions


def build_coord_targets(cfg: CoordTargetsConfig) -> TabularMarkovGame:
    g, n = cfg.grid_side, cfg.n_agents
    cells = g * g
    S = cells**n
    if S > MAX_STATES:
        raise ConfigError(f"coord_targets state space {S} exceeds {MAX_STATES}")
    targets = np.array(cfg.resolved_targets())
    cell_idx = _radix_decode(np.arange(S), cells, n)  # (S, n)
    pos = np.stack([cell_idx % g, cell_idx // g], axis=-1)  # (S, n, 2) as (x, y)

    A = len(MOVES) ** n
    joint = _radix_decode(np.arange(A), len(MOVES), n)  # (A, n)
    moved = pos[:, None, :, :] + MOVES[joint][None, :, :, :]  # (S, A, n, 2)
    inside = np.all((moved >= 0) & (moved < g), axis=-1, keepdims=True)
    moved = np.where(inside, moved, pos[:, None, :, :])
    nxt = _radix_encode(moved[..., 1] * g + moved[..., 0], cells)[..., None]

    team_r = coord_targets_reward(pos, targets, cfg.collision_penalty)
    rewards = np.broadcast_to((team_r / n)[None, :, None], (n, S, A))

    distinct = np.array([len({tuple(p) for p in row}) == n for row in pos])
    rho = distinct / distinct.sum()

    observations, names = [], []
    for i in range(n):
        cols = [pos[:, i, 0], pos[:, i, 1]]
        nm = [f"a{i}_x", f"a{i}_y"]
        for k, (tx, ty) in enumerate(targets):
            cols += [tx - pos[:, i, 0], ty - pos[:, i, 1]]
            nm += [f"t{k}_dx", f"t{k}_dy"]
        for j in range(n):
            if j != i:
                cols += [pos[:, j, 0] - pos[:, i, 0], pos[:, j, 1] - pos[:, i, 1]]
                nm += [f"a{j}_dx", f"a{j}_dy"]
        observations.append(np.stack(cols, axis=1).astype(float))
        names.append(tuple(nm))

    return TabularMarkovGame(
        action_counts=(len(MOVES),) * n, teams=(tuple(range(n)),), observations=observations,
        next_states=nxt, next_probs=np.ones_like(nxt, dtype=float), rewards=rewards,
        initial_dist=rho, gamma=cfg.gamma, horizon=cfg.horizon, feature_names=names,
        adjacency=np.ones((n, n)) - np.eye(n), name=f"coord_targets_{g}x{g}_{n}")


def corridor_release(queues, phases, cap):
    """Serve one lane per intersection; served vehicles join the next main lane.

    ``queues`` is (..., k, P); ``phases`` is (..., k).  Intersections are
    processed from downstream to upstream, and a transfer is limited by the
    room left in the receiving main-road queue (the rest stays put).
    """
    q = np.array(queues, dtype=np.int64, copy=True)
    phases = np.broadcast_to(np.asarray(phases, dtype=np.int64), q.shape[:-1])
    k = q.shape[-2]
    for i in range(k - 1, -1, -1):
        ph = phases[..., i][..., None]
        served = np.take_along_axis(q[..., i, :], ph, axis=-1)[..., 0]
        if i == k - 1:
            moved = served
        else:
            moved = np.minimum(served, cap - q[..., i + 1, 0])
            q[..., i + 1, 0] += moved
        lane = q[..., i, :]
        np.put_along_axis(lane, ph, (served - moved)[..., None], axis=-1)
        q[..., i, :] = lane
    return q


def build_corridor(cfg: CorridorConfig) -> TabularMarkovGame:
    k, P, cap = cfg.n_intersections, cfg.phases_per_intersection, cfg.queue_cap
    lanes = k * P
    S = (cap + 1) ** lanes
    if S > MAX_STATES:
        raise ConfigError(f"corridor state space {S} exceeds {MAX_STATES}")
    q = _radix_decode(np.arange(S), cap + 1, lanes).reshape(S, k, P)
    A = P**k
    joint = _radix_decode(np.arange(A), P, k)

    # flat lane index of each entry lane: main lane of intersection 0, then side lanes
    entry = [0] + [i * P + p for i in range(k) for p in range(1, P)]
    probs = cfg.resolved_arrivals()
    random_lanes = [e for e, p in zip(entry, probs) if 0.0 < p < 1.0]
    sure_lanes = [e for e, p in zip(entry, probs) if p >= 1.0]
    p_of = dict(zip(entry, probs))
    patterns = list(itertools.product((0, 1), repeat=len(random_lanes)))
    K = len(patterns)

    nxt = np.empty((S, A, K), dtype=np.int64)
    prob = np.empty((S, A, K))
    for a in range(A):
        released = corridor_release(q, joint[a], cap).reshape(S, lanes)
        for b, pat in enumerate(patterns):
            arr = released.copy()
            w = 1.0
            for lane, hit in zip(random_lanes, pat):
                arr[:, lane] += hit
                w *= p_of[lane] if hit else 1.0 - p_of[lane]
            for lane in sure_lanes:
                arr[:, lane] += 1
            np.minimum(arr, cap, out=arr)
            nxt[:, a, b] = _radix_encode(arr, cap + 1)
            prob[:, a, b] = w

    per_int = q.sum(axis=2)  # (S, k)
    rewards = np.broadcast_to(-per_int.T[:, :, None].astype(float), (k, S, A))

    observations, names = [], []
    for i in range(k):
        up = per_int[:, i - 1] if i > 0 else np.zeros(S, dtype=np.int64)
        down = per_int[:, i + 1] if i < k - 1 else np.zeros(S, dtype=np.int64)
        observations.append(np.column_stack([q[:, i, :], up, down]).astype(float))
        names.append(tuple([f"i{i}_main"] + [f"i{i}_side{p}" for p in range(1, P)]
                           + ["upstream_total", "downstream_total"]))

    rho = np.zeros(S)
    rho[0] = 1.0
    adj = np.zeros((k, k))
    for i in range(k - 1):
        adj[i, i + 1] = adj[i + 1, i] = 1.0

    return TabularMarkovGame(
        action_counts=(P,) * k, teams=(tuple(range(k)),), observations=observations,
        next_states=nxt, next_probs=prob, rewards=rewards, initial_dist=rho,
        gamma=cfg.gamma, horizon=cfg.horizon, feature_names=names, adjacency=adj,
        name=f"corridor_{k}x{P}_cap{cap}")


ENV_BUILDERS = {
    "coord_targets": (CoordTargetsConfig, build_coord_targets),
    "corridor": (CorridorConfig, build_corridor),
}


def build_env(options: dict) -> TabularMarkovGame:
    """Build from a config mapping such as ``{"kind": "corridor", "n_intersections": 3}``."""
    options = dict(options)
    kind = options.pop("kind", None)
    if kind not in ENV_BUILDERS:
        raise ConfigError(f"unknown environment kind {kind!r}; expected one of {sorted(ENV_BUILDERS)}")
    cfg_cls, builder = ENV_BUILDERS[kind]
    for key in ("targets", "arrival_probs"):
        if isinstance(options.get(key), list):
            options[key] = tuple(tuple(v) if isinstance(v, list) else v for v in options[key])
    try:
        cfg = cfg_cls(**options)
    except TypeError as exc:
        raise ConfigError(f"bad {kind} config: {exc}") from None
    return builder(cfg)
