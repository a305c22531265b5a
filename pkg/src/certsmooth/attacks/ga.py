"""Black-box genetic optimizer that fills a plan's writable bytes to minimize
a target's malicious score."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import EmptyWritable
from .manipulations import AttackPlan

logger = logging.getLogger(__name__)

Target = Callable[[bytes], float]


@dataclass(frozen=True)
class GaConfig:
    population: int = 10
    max_steps: int = 50
    individual_mutation_prob: float = 0.30
    byte_mutation_prob: float = 0.30
    tournament: int = 2
    elitism: int = 1
    seed: int = 0
    early_stop: float | None = None  # stop once the best score is below this
    threads: int = 1

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be at least 2")
        for name in ("individual_mutation_prob", "byte_mutation_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0 <= self.elitism < self.population:
            raise ValueError("elitism must be smaller than the population")
        if self.max_steps < 0 or self.tournament < 1:
            raise ValueError("max_steps must be >= 0 and tournament >= 1")


@dataclass(frozen=True)
class GaResult:
    best_bytes: bytes
    best_score: float
    best_fill: bytes
    history: tuple[float, ...]
    evaluations: int


def tiled_snippet(pool: np.ndarray, n: int, rng: np.random.Generator, max_len: int = 512) -> np.ndarray:
    """A random pool snippet repeated to length n. Snippet length is
    log-uniform in [1, max_len], so constant runs and longer pieces of
    content are both common."""
    length = int(min(pool.size, np.exp(rng.uniform(0.0, np.log(max_len + 1)))))
    start = int(rng.integers(0, pool.size - length + 1))
    return np.resize(pool[start:start + length], n)


def _initial_population(plan: AttackPlan, config: GaConfig, pool: np.ndarray | None,
                        rng: np.random.Generator) -> list[np.ndarray]:
    n = plan.n_writable
    pop = [plan.current_fill()]
    while len(pop) < config.population:
        if pool is not None and pool.size:
            pop.append(tiled_snippet(pool, n, rng))
        else:
            pop.append(rng.integers(0, 256, size=n, dtype=np.uint8))
    return pop


def ga_optimize(plan: AttackPlan, target: Target, config: GaConfig = GaConfig(),
                pool: bytes | None = None) -> GaResult:
    """Minimize ``target(file bytes)`` over the plan's writable bytes.

    Individual 0 of the first generation is the plan's current content; the
    others tile a short random snippet of ``pool`` (e.g. benign files) or
    are uniform bytes when no pool is given. Each step keeps the elite and
    fills the rest by tournament selection, uniform crossover and per-byte
    mutation. Mutated bytes are copied from one tiled snippet (the donor):
    a long fill drawn byte by byte from the whole pool always ends up with
    the pool's average byte mix, which leaves selection nothing to choose
    between.
    ``history[i]`` is the best score after step i, so it never increases.
    """
    if plan.n_writable == 0:
        raise EmptyWritable("attack plan exposes no writable bytes")
    rng = np.random.default_rng(config.seed)
    pool_arr = np.frombuffer(pool, dtype=np.uint8) if pool else None
    base = plan.to_bytes()
    evaluations = 0

    def evaluate(pop: list[np.ndarray]) -> np.ndarray:
        nonlocal evaluations
        evaluations += len(pop)
        files = [plan.apply(ind, base) for ind in pop]
        if config.threads > 1:
            with ThreadPoolExecutor(config.threads) as ex:
                return np.array(list(ex.map(target, files)), dtype=np.float64)
        return np.array([target(f) for f in files], dtype=np.float64)

    def select(fit: np.ndarray) -> int:
        picks = rng.integers(0, len(fit), size=config.tournament)
        return int(picks[np.argmin(fit[picks])])

    pop = _initial_population(plan, config, pool_arr, rng)
    fit = evaluate(pop)
    history = []
    for step in range(config.max_steps):
        order = np.argsort(fit, kind="stable")
        if config.early_stop is not None and fit[order[0]] < config.early_stop:
            break
        nxt = [pop[i] for i in order[:config.elitism]]
        while len(nxt) < config.population:
            a, b = pop[select(fit)], pop[select(fit)]
            child = np.where(rng.random(a.size) < 0.5, a, b)
            if rng.random() < config.individual_mutation_prob:
                hit = rng.random(child.size) < config.byte_mutation_prob
                k = int(hit.sum())
                if pool_arr is not None and pool_arr.size:
                    child[hit] = tiled_snippet(pool_arr, child.size, rng)[hit]
                else:
                    child[hit] = rng.integers(0, 256, size=k, dtype=np.uint8)
            nxt.append(child)
        elite_fit = fit[order[:config.elitism]]
        pop = nxt
        fit = np.concatenate([elite_fit, evaluate(pop[config.elitism:])])
        history.append(float(fit.min()))
        logger.debug("ga step %d best %.4f", step + 1, history[-1])
    best = int(np.argmin(fit))
    fill = pop[best]
    return GaResult(plan.apply(fill, base), float(fit[best]), fill.tobytes(), tuple(history), evaluations)


def random_fill(plan: AttackPlan, target: Target, budget: int, seed: int = 0,
                pool: bytes | None = None) -> GaResult:
    """Baseline with the same evaluation budget: best of ``budget`` random fills."""
    if plan.n_writable == 0:
        raise EmptyWritable("attack plan exposes no writable bytes")
    rng = np.random.default_rng(seed)
    pool_arr = np.frombuffer(pool, dtype=np.uint8) if pool else None
    base = plan.to_bytes()
    best_fill, best_score, history = None, np.inf, []
    for _ in range(budget):
        if pool_arr is not None and pool_arr.size:
            fill = pool_arr[rng.integers(0, pool_arr.size, size=plan.n_writable)]
        else:
            fill = rng.integers(0, 256, size=plan.n_writable, dtype=np.uint8)
        score = target(plan.apply(fill, base))
        if score < best_score:
            best_fill, best_score = fill, score
        history.append(float(best_score))
    return GaResult(plan.apply(best_fill, base), float(best_score), best_fill.tobytes(), tuple(history), budget)
