"""Agent influence graphs and balanced graph partitioning into teams.

Distances come either from the environment's own adjacency or from how much
each agent's action can move another agent's expert Q-values.  Partitioning
is recursive bisection with pairwise-swap refinement, which keeps team sizes
within one of each other while trying to keep heavy edges inside teams.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import ContractViolation
from .game import make_rng
from .oracle import TeamValueOracle

INF_DISTANCE = np.inf
MODES = ("env-graph", "q-influence", "custom")


def influence_range(oracle: TeamValueOracle, probe_idx, source: int, target: int) -> float:
    """Mean over probes of how far ``source``'s action can lower ``target``'s own Q.

    Everyone else plays the expert; ``target``'s Q is that of its own
    reward share, so the measure does not depend on the current teams.
    """
    idx = np.asarray(probe_idx, dtype=np.int64)
    if idx.size == 0:
        raise ContractViolation("probe set must be nonempty")
    q = oracle.q_local[target]
    at_expert = q[idx, oracle.expert_joint[idx]]
    low = oracle.team_slice((source,), idx, q=q).min(axis=1)
    return float(np.mean(at_expert - low))


def q_influence_distance(oracle: TeamValueOracle, probe_idx, i: int, j: int) -> float:
    """2 / (delta_ij + delta_ji), or ``INF_DISTANCE`` when neither agent moves the other."""
    if i == j:
        raise ContractViolation("distance needs two distinct agents")
    total = influence_range(oracle, probe_idx, i, j) + influence_range(oracle, probe_idx, j, i)
    return INF_DISTANCE if total <= 1e-12 else 2.0 / total


def pairwise_distances(oracle: TeamValueOracle, probe_idx):
    """(distances, deltas): symmetric (N, N) distance matrix and raw influence ranges."""
    n = oracle.n_agents
    delta = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                delta[i, j] = influence_range(oracle, probe_idx, i, j)
    sym = delta + delta.T
    with np.errstate(divide="ignore"):
        dist = np.where(sym > 1e-12, 2.0 / np.where(sym > 0, sym, 1.0), INF_DISTANCE)
    np.fill_diagonal(dist, 0.0)
    return dist, delta


@dataclass(frozen=True, eq=False)
class AgentGraph:
    weights: np.ndarray  # (N, N) symmetric integer weights, 0 means no edge
    mode: str
    distances: np.ndarray | None = None
    deltas: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.weights)

    def edges(self):
        n = self.n_nodes
        return [(i, j, int(self.weights[i, j])) for i in range(n) for j in range(i + 1, n)
                if self.weights[i, j] > 0]

    def cut_weight(self, teams) -> int:
        label = labels_of(teams, self.n_nodes)
        mask = label[:, None] != label[None, :]
        return int(self.weights[mask].sum() // 2)

    def dump(self, path, teams=None) -> None:
        """Edge list ``i j w`` followed by one ``team`` line per node."""
        lines = [f"# mode={self.mode} nodes={self.n_nodes}"]
        lines += [f"{i} {j} {w}" for i, j, w in self.edges()]
        if teams is not None:
            label = labels_of(teams, self.n_nodes)
            lines += [f"team {i} {label[i]}" for i in range(self.n_nodes)]
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def percentile_weights(values) -> np.ndarray:
    """Map values to integers in [1, 100] by dense rank, smallest -> 1, largest -> 100."""
    values = np.asarray(values, dtype=float)
    uniq, rank = np.unique(values, return_inverse=True)
    if len(uniq) == 1:
        return np.full(values.shape, 1 if uniq[0] <= 0 else 100, dtype=np.int64)
    return (1 + np.rint(99.0 * rank / (len(uniq) - 1))).astype(np.int64).reshape(values.shape)


def build_graph(distances=None, mode: str = "q-influence", adjacency=None, deltas=None) -> AgentGraph:
    """Complete graph with weights increasing in 1/d, or the environment's own graph."""
    if mode not in MODES:
        raise ContractViolation(f"unknown graph mode {mode!r}")
    if mode == "env-graph":
        if adjacency is None:
            raise ContractViolation("env-graph mode needs the environment adjacency")
        adj = np.asarray(adjacency, dtype=float)
        w = np.where(adj > 0, np.clip(np.rint(adj), 1, 100), 0).astype(np.int64)
        w = np.maximum(w, w.T)
        np.fill_diagonal(w, 0)
        return AgentGraph(w, mode)
    d = np.asarray(distances, dtype=float)
    n = len(d)
    if d.shape != (n, n) or not np.allclose(d, d.T, equal_nan=False):
        raise ContractViolation("distances must be a symmetric square matrix")
    iu = np.triu_indices(n, 1)
    with np.errstate(divide="ignore"):
        inv = np.where(np.isinf(d[iu]), 0.0, 1.0 / d[iu])
    w = np.zeros((n, n), dtype=np.int64)
    if len(inv):
        w[iu] = percentile_weights(inv)
    w = w + w.T
    return AgentGraph(w, mode, distances=d, deltas=deltas)


def labels_of(teams, n: int) -> np.ndarray:
    label = np.full(n, -1, dtype=np.int64)
    for t, members in enumerate(teams):
        label[list(members)] = t
    if np.any(label < 0):
        raise ContractViolation("teams do not cover every node")
    return label


def _part_sizes(n: int, parts: int):
    return [n // parts + (k < n % parts) for k in range(parts)]


def _refine_pair(W, a: list, b: list) -> None:
    """Greedy best-swap refinement between two groups, in place."""
    while True:
        best, pick = 0.0, None
        for x in a:
            for y in b:
                # moving x to b and y to a
                gain = (W[x, b].sum() - W[x, a].sum()) + (W[y, a].sum() - W[y, b].sum()) - 2 * W[x, y]
                if gain > best + 1e-12:
                    best, pick = gain, (x, y)
        if pick is None:
            return
        x, y = pick
        a[a.index(x)] = y
        b[b.index(y)] = x


def _bisect(W, nodes: list, size_a: int, rng, starts: int):
    best_cut, best = None, None
    sub = W[np.ix_(nodes, nodes)]
    order = np.argsort(-sub.sum(axis=1), kind="stable")
    inits = []
    # greedy growth from each of the heaviest nodes, then random splits
    for s in order[:starts]:
        grown = [int(s)]
        while len(grown) < size_a:
            rest = [k for k in range(len(nodes)) if k not in grown]
            grown.append(max(rest, key=lambda k: (sub[k, grown].sum(), -k)))
        inits.append(grown)
    for _ in range(starts):
        inits.append(list(rng.permutation(len(nodes))[:size_a]))
    for init in inits:
        a = [nodes[k] for k in sorted(init)]
        b = [v for v in nodes if v not in a]
        _refine_pair(W, a, b)
        cut = W[np.ix_(a, b)].sum()
        if best_cut is None or cut < best_cut - 1e-12:
            best_cut, best = cut, (sorted(a), sorted(b))
    return best


def partition(graph: AgentGraph, n_teams: int, seed=0, starts: int = 4) -> tuple:
    """Balanced partition into ``n_teams`` teams with small inter-team edge weight."""
    n = graph.n_nodes
    if not 1 <= n_teams <= n:
        raise ContractViolation(f"cannot split {n} agents into {n_teams} teams")
    if n_teams == 1:
        return (tuple(range(n)),)
    W = graph.weights.astype(float)
    rng = make_rng(seed)

    def split(nodes, parts):
        if parts == 1:
            return [nodes]
        left = (parts + 1) // 2
        sizes = _part_sizes(len(nodes), parts)
        a, b = _bisect(W, nodes, sum(sizes[:left]), rng, starts)
        return split(a, left) + split(b, parts - left)

    teams = split(list(range(n)), n_teams)
    # final pass across every pair of teams
    improved = True
    while improved:
        before = graph.cut_weight(teams)
        for p, q in combinations(range(len(teams)), 2):
            _refine_pair(W, teams[p], teams[q])
        improved = graph.cut_weight(teams) < before
    teams = sorted((tuple(sorted(t)) for t in teams), key=lambda t: t[0])
    return tuple(teams)
