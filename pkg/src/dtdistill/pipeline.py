"""End-to-end distillation runs: clustering, iterative data collection and
resampling, per-agent tree training, bandit-based profile selection and a
held-out evaluation.
"""
from __future__ import annotations

import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import cluster as cl
from .bandit import select_profile, select_uniform
from .data import (RolloutBudget, WeightedDataset, collect_training, compute_independent_weights,
                   compute_k_drop, compute_weights, resample)
from .dtree import train_dt
from .envs import build_env
from .errors import ConfigError, DistillError, EmptySupportError, StageError
from .game import PolicyProfile, mean_return, rollout_batch, tabulate_policy
from .oracle import expert_profile, solve

log = logging.getLogger(__name__)

MODES = ("hydraviper", "imitation_dt")
CLUSTERING = ("none", "env-graph", "q-influence")
STAGES = ("setup", "clustering", "training_rollouts", "resampling", "dt_training",
          "validation", "evaluation")

# stream codes so every stage draws from its own seed sequence
TRAIN, RESAMPLE, VALID, EVAL, PROBE, PARTITION = range(1, 7)


@dataclass
class ExperimentConfig:
    env: dict = field(default_factory=lambda: {"kind": "coord_targets"})
    iterations: int = 10
    k_train: int = 10
    b_train: int = 50
    b_valid: int = 200
    epsilon: float = 0.0
    c: float = 4.0
    max_depth: int = 4
    n_teams: int = 1
    clustering: str = "none"
    disable_cq: bool = False
    disable_tra: bool = False
    disable_vrucb: bool = False
    mode: str = "hydraviper"
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "runs"
    eval_rollouts: int = 10
    probe_rollouts: int = 20
    solver_tol: float = 1e-8
    dump_dataset: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.env, dict) or "kind" not in self.env:
            raise ConfigError("env must be a mapping with a 'kind' entry")
        for name in ("iterations", "k_train", "b_train", "b_valid", "max_depth", "n_teams",
                     "eval_rollouts", "probe_rollouts"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        for name in ("disable_cq", "disable_tra", "disable_vrucb", "dump_dataset"):
            if not isinstance(getattr(self, name), bool):
                raise ConfigError(f"{name} must be true or false")
        if self.epsilon < 0 or self.c < 0 or self.solver_tol <= 0:
            raise ConfigError("epsilon and c must be >= 0, solver_tol > 0")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.clustering not in CLUSTERING:
            raise ConfigError(f"clustering must be one of {CLUSTERING}")
        if self.clustering == "none" and self.n_teams != 1:
            raise ConfigError("n_teams > 1 needs a clustering mode")
        if not self.seeds or not all(isinstance(s, int) and s >= 0 for s in self.seeds):
            raise ConfigError("seeds must be a nonempty list of nonnegative integers")
        if self.mode == "hydraviper" and self.b_valid // self.n_teams < self.iterations:
            raise ConfigError(f"b_valid={self.b_valid} leaves fewer than one validation rollout "
                              f"per iteration for each of {self.n_teams} teams")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                return cls.from_json(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        """Copy with dotted keys (``env.horizon``) replaced."""
        d = json.loads(json.dumps(self.to_dict()))
        for key, value in overrides.items():
            *path, last = key.split(".")
            node = d
            for p in path:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"override {key!r}: {p!r} is not a section")
                node = node[p]
            if not path and last not in d:
                raise ConfigError(f"unknown config key {last!r}")
            node[last] = value
        return ExperimentConfig.from_dict(d)


@dataclass
class RunReport:
    seed: int
    mode: str
    teams: tuple
    team_returns: list
    mean_return: float
    train_rollouts: int
    warmup_rollouts: int
    valid_rollouts: int
    selected: list  # chosen iteration (1-based) per team
    rollout_schedule: list  # rollouts collected at each iteration
    degenerate_iterations: int = 0
    stage_seconds: dict = field(default_factory=lambda: {s: 0.0 for s in STAGES})
    wall_seconds: float = 0.0
    trees: list = field(default_factory=list, repr=False)
    bandits: list = field(default_factory=list, repr=False)
    dataset: WeightedDataset | None = field(default=None, repr=False)
    graph: object = field(default=None, repr=False)

    def row(self) -> dict:
        """Deterministic summary (no timings) for the CSV report."""
        return {
            "seed": self.seed, "mode": self.mode,
            "teams": "|".join(" ".join(map(str, t)) for t in self.teams),
            "mean_return": repr(float(self.mean_return)),
            "team_returns": " ".join(repr(float(r)) for r in self.team_returns),
            "train_rollouts": self.train_rollouts, "warmup_rollouts": self.warmup_rollouts,
            "valid_rollouts": self.valid_rollouts,
            "selected": " ".join(map(str, self.selected)),
            "rollout_schedule": " ".join(map(str, self.rollout_schedule)),
            "degenerate_iterations": self.degenerate_iterations,
        }


class _Clock:
    def __init__(self, seconds: dict):
        self.seconds = seconds

    @contextmanager
    def stage(self, name):
        t0 = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except DistillError as exc:
            raise StageError(name, exc) from exc
        finally:
            self.seconds[name] += time.perf_counter() - t0


_EXPERTS: dict = {}


def expert_for(env: dict, tol: float = 1e-8):
    """Build the environment and solve its expert once per process."""
    key = (json.dumps(env, sort_keys=True), tol)
    if key not in _EXPERTS:
        game = build_env(env)
        _EXPERTS[key] = (game, solve(game, tol=tol))
    return _EXPERTS[key]


def _cluster(cfg, game, oracle, seed):
    if cfg.clustering == "none" or cfg.n_teams == 1:
        return game.teams, None
    if cfg.clustering == "env-graph":
        graph = cl.build_graph(mode="env-graph", adjacency=game.adjacency)
    else:
        experts = expert_profile(game, oracle)
        batch = rollout_batch(game, experts, [(seed, PROBE, k) for k in range(cfg.probe_rollouts)])
        probes = oracle.state_obs[batch.states.ravel()]
        dist, delta = cl.pairwise_distances(oracle, probes)
        graph = cl.build_graph(dist, mode="q-influence", deltas=delta)
    return cl.partition(graph, cfg.n_teams, seed=(seed, PARTITION)), graph


def _profile_from_trees(game, trees, tag):
    acts = np.stack([tabulate_policy(game, i, t) for i, t in enumerate(trees)])
    return PolicyProfile(acts, [tag] * game.n_agents)


def _fit_agents(cfg, game, ds, agents, counts, trees):
    obs, acts = ds.observations, ds.actions
    for i in agents:
        trees[i] = train_dt(obs[:, game.obs_slices[i]], acts[:, i], counts,
                            max_depth=cfg.max_depth, n_actions=game.action_counts[i], agent=i)


def _evaluate(cfg, game, profile, seed):
    batch = rollout_batch(game, profile, [(seed, EVAL, k) for k in range(cfg.eval_rollouts)])
    team_returns = [float(np.mean(mean_return(batch, t))) for t in range(game.n_teams)]
    return team_returns, float(sum(team_returns))


def run_hydraviper(cfg: ExperimentConfig, seed: int) -> RunReport:
    if cfg.mode != "hydraviper":
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "mode": "hydraviper"})
    seconds = {s: 0.0 for s in STAGES}
    clock = _Clock(seconds)
    t_start = time.perf_counter()

    with clock.stage("setup"):
        game, oracle = expert_for(cfg.env, cfg.solver_tol)
    with clock.stage("clustering"):
        teams, graph = _cluster(cfg, game, oracle, seed)
        game, oracle = game.with_teams(teams), oracle.with_teams(teams)
        experts = expert_profile(game, oracle)

    T, N = game.horizon, game.n_agents
    ds = WeightedDataset(obs_dim=game.global_obs.shape[1], n_agents=N, epsilon=cfg.epsilon)
    budget = RolloutBudget(cfg.k_train, cfg.b_train, T)
    groups = [(i,) for i in range(N)] if cfg.disable_cq else [tuple(t) for t in teams]
    profile, history, tree_history, degenerate = experts, [], [], 0

    for m in range(1, cfg.iterations + 1):
        budget.m = m
        with clock.stage("training_rollouts"):
            collect_training(ds, budget, profile, oracle, game, (seed, TRAIN),
                             adaptive=not cfg.disable_tra)
        k_drop, trees = math.inf, [None] * N
        for g, members in enumerate(groups):
            with clock.stage("resampling"):
                if cfg.disable_cq:
                    w = compute_independent_weights(ds, members[0], oracle)
                else:
                    w = compute_weights(ds, members, oracle)
                ds.weights[g] = w
                k_drop = min(k_drop, compute_k_drop([w], T, cfg.epsilon))
                try:
                    # samples at or below the threshold are discarded
                    idx = resample(np.where(w <= cfg.epsilon, 0.0, w), len(ds), (seed, RESAMPLE, m, g))
                    counts = np.bincount(idx, minlength=len(ds)).astype(float)
                except EmptySupportError:
                    # every action is equally good on every sample: any labels do
                    degenerate += 1
                    counts = np.ones(len(ds))
            with clock.stage("dt_training"):
                _fit_agents(cfg, game, ds, members, counts, trees)
        budget.K_drop = k_drop
        with clock.stage("dt_training"):
            profile = _profile_from_trees(game, trees, f"dt@{m}")
        history.append(profile)
        tree_history.append(trees)

    selected, bandits, final = [], [], experts
    with clock.stage("validation"):
        per_team = cfg.b_valid // len(teams)
        for ell, members in enumerate(teams):
            arms = [experts.replace(members, p) for p in history]

            def pull(arm, seeds, arms=arms, ell=ell):
                return mean_return(rollout_batch(game, arms[arm], seeds), ell)

            if cfg.disable_vrucb:
                best, state = select_uniform(pull, len(arms), per_team, seed=(seed, VALID, ell))
            else:
                best, state = select_profile(pull, len(arms), per_team, cfg.c, seed=(seed, VALID, ell))
            selected.append(best + 1)
            bandits.append(state)
            final = final.replace(members, history[best])

    with clock.stage("evaluation"):
        team_returns, total = _evaluate(cfg, game, final, seed)

    chosen = [None] * N
    for members, m in zip(teams, selected):
        for i in members:
            chosen[i] = tree_history[m - 1][i]
    return RunReport(
        seed=seed, mode="hydraviper", teams=tuple(tuple(t) for t in teams), team_returns=team_returns,
        mean_return=total, train_rollouts=budget.n_train, warmup_rollouts=budget.warmup_rollouts,
        valid_rollouts=sum(s.total_pulls for s in bandits), selected=selected,
        rollout_schedule=list(budget.history), degenerate_iterations=degenerate,
        stage_seconds=seconds, wall_seconds=time.perf_counter() - t_start, trees=chosen,
        bandits=bandits, dataset=ds, graph=graph)


def run_imitation_dt(cfg: ExperimentConfig, seed: int) -> RunReport:
    """Behaviour cloning baseline: expert rollouts only, unweighted, trained once."""
    seconds = {s: 0.0 for s in STAGES}
    clock = _Clock(seconds)
    t_start = time.perf_counter()
    with clock.stage("setup"):
        game, oracle = expert_for(cfg.env, cfg.solver_tol)
        experts = expert_profile(game, oracle)

    ds = WeightedDataset(obs_dim=game.global_obs.shape[1], n_agents=game.n_agents,
                         epsilon=cfg.epsilon)
    budget = RolloutBudget(cfg.k_train, cfg.b_train, game.horizon)
    with clock.stage("training_rollouts"):
        collect_training(ds, budget, experts, oracle, game, (seed, TRAIN))
        while budget.n_train < budget.B_train:
            budget.m += 1
            collect_training(ds, budget, experts, oracle, game, (seed, TRAIN), adaptive=False)
    trees = [None] * game.n_agents
    with clock.stage("dt_training"):
        _fit_agents(cfg, game, ds, range(game.n_agents), None, trees)
        final = _profile_from_trees(game, trees, "dt")
    with clock.stage("evaluation"):
        team_returns, total = _evaluate(cfg, game, final, seed)
    return RunReport(
        seed=seed, mode="imitation_dt", teams=tuple(tuple(t) for t in game.teams),
        team_returns=team_returns, mean_return=total, train_rollouts=budget.n_train,
        warmup_rollouts=budget.warmup_rollouts, valid_rollouts=0, selected=[],
        rollout_schedule=list(budget.history), stage_seconds=seconds,
        wall_seconds=time.perf_counter() - t_start, trees=trees, dataset=ds)


def run(cfg: ExperimentConfig, seed: int) -> RunReport:
    runner = run_hydraviper if cfg.mode == "hydraviper" else run_imitation_dt
    report = runner(cfg, seed)
    log.info("seed %d %s: mean return %.4f (%d train, %d valid rollouts)", seed, cfg.mode,
             report.mean_return, report.train_rollouts, report.valid_rollouts)
    return report
