"""Genetic-algorithm calibration of IDM parameters, plus a grid-search reference."""

from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..cf import CFEvent
from ..errors import ContractError
from ..rng import GA, make_rng
from .idm import LOWER, UPPER, EventBatch, IDMParams

logger = logging.getLogger(__name__)


@dataclass
class GAConfig:
    population: int = 50
    generations: int = 100
    crossover_rate: float = 0.9
    mutation_rate: float = 0.1
    mutation_scale: float = 0.1  # fraction of each bound's range
    elite: int = 2
    tournament: int = 3
    seed: int = 0

    def __post_init__(self):
        if not self.population >= self.elite >= 1:
            raise ContractError("need population >= elite >= 1")
        if self.generations < 1 or self.tournament < 1:
            raise ContractError("generations and tournament size must be positive")
        for name in ("crossover_rate", "mutation_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GAResult:
    params: IDMParams
    val_mse: float
    train_mse: float
    history: list = field(default_factory=list)  # (generation, best train mse, val mse of that individual)


def _tournament(rng, fitness: np.ndarray, k: int) -> int:
    picks = rng.integers(0, len(fitness), size=k)
    return int(picks[np.argmin(fitness[picks])])


def run_ga(train: EventBatch, val: EventBatch, cfg: GAConfig,
           initial_population: Optional[np.ndarray] = None, delta: float = 4.0) -> GAResult:
    """Minimize train MSE; among each generation's best individuals keep the best on validation."""
    rng = make_rng(cfg.seed, GA)
    span = UPPER - LOWER
    if initial_population is None:
        pop = LOWER + rng.random((cfg.population, len(LOWER))) * span
    else:
        pop = np.clip(np.array(initial_population, dtype=np.float64), LOWER, UPPER)
        if pop.shape != (cfg.population, len(LOWER)):
            raise ContractError(f"initial population must be {(cfg.population, len(LOWER))}")

    best_vec, best_val, best_train = None, np.inf, np.inf
    history = []
    fitness = train.mean_mse(pop, delta)
    for gen in range(cfg.generations):
        leader = int(np.argmin(fitness))
        val_mse = float(val.mean_mse(pop[leader], delta))
        history.append((gen, float(fitness[leader]), val_mse))
        if val_mse < best_val:
            best_vec, best_val, best_train = pop[leader].copy(), val_mse, float(fitness[leader])

        order = np.argsort(fitness, kind="stable")
        children = [pop[i].copy() for i in order[: cfg.elite]]
        while len(children) < cfg.population:
            a = pop[_tournament(rng, fitness, cfg.tournament)]
            b = pop[_tournament(rng, fitness, cfg.tournament)]
            if rng.random() < cfg.crossover_rate:
                take = rng.random(len(a)) < 0.5
                child = np.where(take, a, b)
            else:
                child = a.copy()
            mutate = rng.random(len(child)) < cfg.mutation_rate
            child = child + mutate * rng.normal(0.0, cfg.mutation_scale, len(child)) * span
            children.append(np.clip(child, LOWER, UPPER))
        pop = np.array(children)
        fitness = train.mean_mse(pop, delta)
        logger.debug("generation %d best train mse %.6g", gen, fitness.min())

    leader = int(np.argmin(fitness))
    val_mse = float(val.mean_mse(pop[leader], delta))
    history.append((cfg.generations, float(fitness[leader]), val_mse))
    if val_mse < best_val:
        best_vec, best_val, best_train = pop[leader].copy(), val_mse, float(fitness[leader])
    return GAResult(IDMParams.from_vector(best_vec, delta), best_val, best_train, history)


def calibrate_idm_ga(train_events: Sequence[CFEvent], val_events: Sequence[CFEvent],
                     cfg: Optional[GAConfig] = None, **kwargs) -> IDMParams:
    if not train_events or not val_events:
        raise ContractError("GA calibration needs non-empty train and validation events")
    cfg = cfg or GAConfig()
    return run_ga(EventBatch(train_events), EventBatch(val_events), cfg, **kwargs).params


def grid_search(events: Sequence[CFEvent] | EventBatch, points: int = 5,
                delta: float = 4.0, chunk: int = 125) -> tuple[IDMParams, float]:
    """Exhaustive search over ``points`` evenly spaced values per bounded parameter."""
    batch = events if isinstance(events, EventBatch) else EventBatch(events)
    axes = [np.linspace(lo, hi, points) for lo, hi in zip(LOWER, UPPER)]
    grid = np.array(list(itertools.product(*axes)))
    scores = np.concatenate([batch.mean_mse(grid[i : i + chunk], delta)
                             for i in range(0, len(grid), chunk)])
    best = int(np.argmin(scores))
    return IDMParams.from_vector(grid[best], delta), float(scores[best])
