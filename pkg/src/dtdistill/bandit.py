"""Fixed-budget best-arm identification with a UCB1 allocation rule.

Each arm is one candidate policy profile; a pull is one rollout whose
observation is the team's undiscounted per-step return.  Arms are pulled
through a caller-supplied function so the same selector serves synthetic
bandits in tests and real rollouts in the pipeline.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import BudgetError, ContractViolation

# pull(arm, seeds) -> returns, one per seed
PullFn = Callable[[int, Sequence[tuple]], np.ndarray]


def n_min(budget: int) -> int:
    """Warm-up pulls per arm: ceil(2 ln B)."""
    if budget < 1:
        raise ContractViolation("budget must be >= 1")
    return math.ceil(2.0 * math.log(budget))


def ucb_index(mean: float, count: int, budget: float, c: float) -> float:
    if count < 1:
        raise ContractViolation("ucb_index needs count >= 1; unpulled arms are force-played")
    return mean + math.sqrt(c * math.log(budget) / count)


def c_for_range(delta: float) -> float:
    """Exploration constant matching returns bounded in a range of width ``delta``."""
    if delta < 0:
        raise ContractViolation("delta must be >= 0")
    return 2.0 * delta * delta


@dataclass
class BanditState:
    n_arms: int
    budget: int
    c: float
    counts: np.ndarray = None
    means: np.ndarray = None
    log: list = field(default_factory=list)  # (arm, return, updated mean)

    def __post_init__(self):
        if self.n_arms < 1:
            raise ContractViolation("need at least one arm")
        self.counts = np.zeros(self.n_arms, dtype=np.int64)
        self.means = np.zeros(self.n_arms)

    @property
    def total_pulls(self) -> int:
        return int(self.counts.sum())

    def update(self, arm: int, value: float) -> None:
        self.counts[arm] += 1
        n = self.counts[arm]
        # exact for constant streams, so deterministic ties stay ties
        self.means[arm] += (value - self.means[arm]) / n
        self.log.append((arm, float(value), float(self.means[arm])))

    def ucb_choice(self) -> int:
        unpulled = np.nonzero(self.counts == 0)[0]
        if len(unpulled):
            return int(unpulled[0])
        bonus = np.sqrt(self.c * math.log(self.budget) / self.counts)
        return int(np.argmax(self.means + bonus))

    def best(self) -> int:
        """Arm with the highest empirical mean among pulled arms (lowest index on ties)."""
        score = np.where(self.counts > 0, self.means, -np.inf)
        return int(np.argmax(score))


def _pull(state: BanditState, pull: PullFn, arm: int, n: int, seed) -> None:
    if n <= 0:
        return
    start = state.counts[arm]
    seeds = [(*seed, arm, start + j) for j in range(n)]
    for value in np.atleast_1d(np.asarray(pull(arm, seeds), dtype=float)):
        state.update(arm, value)


def _seed_tuple(seed):
    return tuple(int(s) for s in seed) if isinstance(seed, (tuple, list)) else (int(seed),)


def select_profile(pull: PullFn, n_arms: int, budget: int, c: float = 4.0, seed=0,
                   fallback: bool = True) -> tuple[int, BanditState]:
    """Warm up every arm with ``n_min`` pulls, spend the rest by UCB, return the best mean.

    When ``n_arms * n_min`` exceeds the budget the warm-up shrinks to
    ``max(1, budget // n_arms)`` pulls per arm (if ``fallback``) and the
    UCB phase gets whatever remains.
    """
    if c < 0:
        raise ContractViolation("c must be >= 0")
    seed = _seed_tuple(seed)
    state = BanditState(n_arms, budget, c)
    if budget < n_arms:
        raise BudgetError(f"budget {budget} cannot pull each of {n_arms} arms once")
    warm = n_min(budget)
    if n_arms * warm > budget:
        if not fallback:
            raise BudgetError(f"{n_arms} arms x {warm} warm-up pulls exceed budget {budget}")
        warm = max(1, budget // n_arms)
    for arm in range(n_arms):
        _pull(state, pull, arm, warm, seed)
    for _ in range(budget - n_arms * warm):
        _pull(state, pull, state.ucb_choice(), 1, seed)
    return state.best(), state


def select_uniform(pull: PullFn, n_arms: int, budget: int, seed=0) -> tuple[int, BanditState]:
    """Baseline allocation: floor(budget / n_arms) pulls per arm, then argmax."""
    per_arm = budget // n_arms
    if per_arm < 1:
        raise BudgetError(f"budget {budget} cannot pull each of {n_arms} arms once")
    seed = _seed_tuple(seed)
    state = BanditState(n_arms, max(budget, 1), 0.0)
    for arm in range(n_arms):
        _pull(state, pull, arm, per_arm, seed)
    return state.best(), state


def write_log(path, logs) -> None:
    """CSV audit of every pull; ``logs`` is an iterable of (seed, team, BanditState)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "team", "pull", "arm", "return", "mean"])
        for seed, team, state in logs:
            for k, (arm, value, mean) in enumerate(state.log):
                w.writerow([seed, team, k, arm, repr(value), repr(mean)])
