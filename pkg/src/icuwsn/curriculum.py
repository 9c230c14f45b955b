"""Performance-driven malfunction-rate curriculum and the (u_th, Gamma) grid search."""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .baselines import RPAPolicy
from .env import ScenarioConfig, UWSNEnv
from .marl import QPolicy, TrainerConfig, TrainResult, evaluate, train
from .neural import NetParams

log = logging.getLogger(__name__)

WORKERS_ENV = "ICUWSN_WORKERS"


@dataclass
class CurriculumState:
    """Training malfunction rate driven by evaluation utility against ``u_th``."""

    u_th: float
    gamma_lf: float
    epsilon: float = 0.0
    epsilon_max: float = 0.6
    eval_count: int = 0
    history: list = field(default_factory=list)   # (episode, mean utility, epsilon after)

    def __post_init__(self):
        if not 0 < self.gamma_lf < 1:
            raise ValueError("learning factor must lie in (0, 1)")
        if not 0 <= self.epsilon_max <= 1:
            raise ValueError("epsilon_max must lie in [0, 1]")
        if not 0 <= self.epsilon <= self.epsilon_max:
            raise ValueError("epsilon must lie in [0, epsilon_max]")

    def on_evaluation(self, episode: int, mean_utility: float) -> None:
        self.epsilon = adjust_epsilon(self.epsilon, mean_utility, self.u_th, self.gamma_lf,
                                      self.epsilon_max)
        self.eval_count += 1
        self.history.append((episode, float(mean_utility), self.epsilon))


def adjust_epsilon(epsilon: float, mean_utility: float, u_th: float, gamma_lf: float,
                   epsilon_max: float = 0.6) -> float:
    """Move epsilon a fraction ``gamma_lf`` toward 1 (capped) on success, toward 0 otherwise."""
    if mean_utility >= u_th:
        return min(epsilon + gamma_lf * (1.0 - epsilon), epsilon_max)
    return max(0.0, epsilon * (1.0 - gamma_lf))


def evaluations_to_reach(epsilon_max: float, gamma_lf: float, start: float = 0.0) -> int:
    """Consecutive successful evaluations needed to climb from ``start`` to the cap."""
    if start >= epsilon_max:
        return 0
    return math.ceil(math.log((1 - epsilon_max) / (1 - start)) / math.log(1 - gamma_lf))


def evaluate_mean_utility(policy, scenario: ScenarioConfig, n_eva: int, seed: int = 0,
                          epsilon: float | None = None) -> float:
    """Mean network utility of ``policy`` over ``n_eva`` seeded episodes."""
    if n_eva < 1:
        raise ValueError("n_eva must be >= 1")
    env = UWSNEnv(scenario)
    reports = evaluate(env, policy, [(seed, 4, k) for k in range(n_eva)], epsilon)
    return float(np.mean([r["utility"] for r in reports]))


def calibrate_bounds(scenario: ScenarioConfig, trainer: TrainerConfig, n_eva: int = 20
                     ) -> tuple[float, float]:
    """(u_min, u_max): random-policy utility and the utility of a model trained at epsilon 0."""
    perfect = replace(scenario, epsilon=0.0)
    u_min = evaluate_mean_utility(RPAPolicy(), perfect, n_eva, trainer.seed)
    result = train(perfect, replace(trainer, train_epsilon=0.0))
    u_max = evaluate_mean_utility(QPolicy(result.params), perfect, n_eva, trainer.seed)
    if u_min >= u_max:
        raise ValueError(f"degenerate scenario: u_min={u_min:.4f} >= u_max={u_max:.4f}")
    return u_min, u_max


def train_with_curriculum(scenario: ScenarioConfig, trainer: TrainerConfig, u_th: float,
                          gamma_lf: float, epsilon_max: float = 0.6
                          ) -> tuple[TrainResult, CurriculumState]:
    state = CurriculumState(u_th, gamma_lf, epsilon_max=epsilon_max)
    return train(scenario, trainer, state), state


@dataclass(frozen=True)
class GridSpec:
    u_min: float
    u_max: float
    delta_u: float
    factors: tuple[float, ...] = (0.001, 0.01, 0.1)

    def __post_init__(self):
        if self.delta_u <= 0:
            raise ValueError("delta_u must be > 0")
        s = (self.u_max - self.u_min) / self.delta_u + 1
        if abs(s - round(s)) > 1e-6 or round(s) < 2:
            raise ValueError("u_max - u_min must be a positive integer multiple of delta_u")
        if not self.factors or any(not 0 < g < 1 for g in self.factors):
            raise ValueError("learning factors must lie in (0, 1)")

    @classmethod
    def from_bounds(cls, u_min: float, u_max: float, steps: int = 5,
                    factors: Sequence[float] = (0.001, 0.01, 0.1)) -> "GridSpec":
        if steps < 2:
            raise ValueError("need at least two thresholds")
        return cls(u_min, u_max, (u_max - u_min) / (steps - 1), tuple(factors))

    @property
    def thresholds(self) -> list[float]:
        s = int(round((self.u_max - self.u_min) / self.delta_u)) + 1
        return [self.u_min + i * self.delta_u for i in range(s)]

    def cells(self) -> list[tuple[float, float]]:
        return [(u, g) for g in self.factors for u in self.thresholds]


SWEEP_FIELDS = ("u_th", "gamma_lf", "mean_reward", "final_epsilon", "mean_utility", "status")


@dataclass
class CellResult:
    u_th: float
    gamma_lf: float
    mean_reward: float
    final_epsilon: float
    mean_utility: float
    status: str
    params: NetParams | None = None

    def row(self) -> dict:
        return {k: getattr(self, k) for k in SWEEP_FIELDS}


def _run_cell(args) -> CellResult:
    scenario, trainer, u_th, gamma_lf, epsilon_max, n_eva = args
    try:
        result, state = train_with_curriculum(scenario, trainer, u_th, gamma_lf, epsilon_max)
    except Exception as exc:   # a failed cell is reported, not fatal to the sweep
        log.warning("cell u_th=%g gamma=%g failed: %s", u_th, gamma_lf, exc)
        nan = float("nan")
        return CellResult(u_th, gamma_lf, nan, nan, nan, f"failed: {type(exc).__name__}")
    env = UWSNEnv(scenario)
    reports = evaluate(env, QPolicy(result.params), [(trainer.seed, 5, k) for k in range(n_eva)])
    return CellResult(u_th, gamma_lf, float(np.mean([r["episode_reward"] for r in reports])),
                      state.epsilon, float(np.mean([r["utility"] for r in reports])), "ok",
                      result.params)


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV)
    return max(1, int(raw)) if raw else 1


def grid_search(grid: GridSpec, scenario: ScenarioConfig, trainer: TrainerConfig, n_eva: int = 20,
                epsilon_max: float = 0.6, workers: int | None = None
                ) -> tuple[CellResult | None, list[CellResult]]:
    """Train one fresh model per (u_th, Gamma) cell and keep the best mean episode reward.

    Cells are independent and share the trainer seed. Returns (best, all cells
    in grid order); ``best`` is None when every cell failed.
    """
    if n_eva < 1:
        raise ValueError("n_eva must be >= 1")
    jobs = [(scenario, trainer, u, g, epsilon_max, n_eva) for u, g in grid.cells()]
    workers = default_workers() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_run_cell, jobs))
    else:
        cells = [_run_cell(j) for j in jobs]
    ok = [c for c in cells if c.status == "ok"]
    best = None
    for c in ok:
        if best is None or c.mean_reward > best.mean_reward:
            best = c
    return best, cells
