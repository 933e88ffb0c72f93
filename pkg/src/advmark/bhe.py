"""Basin-hopping evolution: population basin hopping with per-gene crossover
and greedy selection over a box-bounded mixed integer/continuous space.

The optimizer is a pure black-box minimizer: it sees only gene vectors and
objective values, so it is reusable for watermark placement, benchmark
functions, or anything else with a few bounded decision variables.  All
randomness flows from one seeded generator; single-threaded runs are
bit-reproducible.
"""

from __future__ import annotations

import json
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "GeneSpec",
    "SearchSpace",
    "SpaceConstraint",
    "Individual",
    "BheConfig",
    "OptimizeTrace",
    "OptimizeResult",
    "GenerationRecord",
    "HopEvent",
    "SelectionEvent",
    "EvaluationBudgetExceeded",
    "StopRequested",
    "init_population",
    "neighborhood_sample",
    "local_search",
    "basin_hop",
    "crossover",
    "select",
    "optimize",
]

DEFAULT_BH_ITERATIONS = 3
# single-chain baseline runs the hop loop much longer, standing in for the
# classic non-evolutionary optimizer configuration
BH_ONLY_ITERATIONS = 450

# constrained proposals get this many uniform redraws before projection
RESAMPLE_ATTEMPTS = 16

Objective = Callable[[np.ndarray], float]


class EvaluationBudgetExceeded(RuntimeError):
    """Raised when the evaluation budget is exhausted; optimize() finalizes on it.

    Objectives enforcing their own budget (e.g. model-query budgets) may raise
    it too; the optimizer treats both identically.
    """


class StopRequested(RuntimeError):
    """An objective may raise this to end the run immediately (goal reached)."""


class SpaceConstraint:
    """Feasibility filter a search space may carry beyond its box bounds.

    ``resample_indices`` lists the genes that get uniformly redrawn when a
    random proposal lands infeasible; ``project`` must map any point to a
    feasible one.
    """

    resample_indices: Tuple[int, ...] = ()

    def is_feasible(self, genes: np.ndarray) -> bool:
        raise NotImplementedError

    def project(self, genes: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class GeneSpec:
    """Box bounds for one gene; integer genes are rounded after every proposal."""

    lower: float
    upper: float
    integer: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.lower) and math.isfinite(self.upper)):
            raise ValueError(f"gene bounds must be finite, got [{self.lower}, {self.upper}]")
        if self.lower > self.upper:
            raise ValueError(f"inverted gene bounds [{self.lower}, {self.upper}]")
        if self.integer and math.ceil(self.lower) > math.floor(self.upper):
            raise ValueError(
                f"no integer lies within gene bounds [{self.lower}, {self.upper}]"
            )


@dataclass(frozen=True)
class SearchSpace:
    """An ordered list of gene bounds plus an optional feasibility constraint."""

    genes: Tuple[GeneSpec, ...]
    constraint: Optional[SpaceConstraint] = None

    def __post_init__(self):
        if len(self.genes) == 0:
            raise ValueError("search space needs at least one gene")
        object.__setattr__(self, "genes", tuple(self.genes))

    @classmethod
    def from_bounds(
        cls,
        bounds: Sequence[Tuple[float, float]],
        integer: Optional[Sequence[bool]] = None,
        constraint: Optional[SpaceConstraint] = None,
    ) -> "SearchSpace":
        flags = list(integer) if integer is not None else [False] * len(bounds)
        if len(flags) != len(bounds):
            raise ValueError("integer flags must match bounds length")
        genes = tuple(GeneSpec(lo, hi, flag) for (lo, hi), flag in zip(bounds, flags))
        return cls(genes=genes, constraint=constraint)

    @property
    def dimension(self) -> int:
        return len(self.genes)

    @cached_property
    def lower(self) -> np.ndarray:
        arr = np.array([g.lower for g in self.genes], dtype=np.float64)
        arr.setflags(write=False)
        return arr

    @cached_property
    def upper(self) -> np.ndarray:
        arr = np.array([g.upper for g in self.genes], dtype=np.float64)
        arr.setflags(write=False)
        return arr

    @cached_property
    def ranges(self) -> np.ndarray:
        arr = self.upper - self.lower
        arr.setflags(write=False)
        return arr

    @cached_property
    def integer_mask(self) -> np.ndarray:
        arr = np.array([g.integer for g in self.genes], dtype=bool)
        arr.setflags(write=False)
        return arr

    @cached_property
    def _int_lower(self) -> np.ndarray:
        arr = np.where(self.integer_mask, np.ceil(self.lower), self.lower)
        arr.setflags(write=False)
        return arr

    @cached_property
    def _int_upper(self) -> np.ndarray:
        arr = np.where(self.integer_mask, np.floor(self.upper), self.upper)
        arr.setflags(write=False)
        return arr

    def clip_round(self, genes: np.ndarray) -> np.ndarray:
        """Clamp to the box and round integer genes to the nearest in-bounds integer."""
        out = np.clip(np.asarray(genes, dtype=np.float64), self.lower, self.upper)
        if self.integer_mask.any():
            out = np.where(self.integer_mask, np.rint(out), out)
            out = np.clip(out, self._int_lower, self._int_upper)
        return out

    def contains(self, genes: np.ndarray) -> bool:
        genes = np.asarray(genes, dtype=np.float64)
        in_box = bool(np.all(genes >= self.lower) and np.all(genes <= self.upper))
        if not in_box:
            return False
        return self.constraint is None or self.constraint.is_feasible(genes)

    def sample_uniform(self, rng: np.random.Generator) -> np.ndarray:
        return self.clip_round(self.lower + rng.random(self.dimension) * self.ranges)

    def repair(self, genes: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Make a proposal usable: clip+round, then resolve the constraint.

        Infeasible random proposals (rng given) get the constrained genes
        uniformly redrawn a bounded number of times; deterministic proposals
        and exhausted redraws fall back to coordinate projection.
        """
        out = self.clip_round(genes)
        if self.constraint is None or self.constraint.is_feasible(out):
            return out
        if rng is not None:
            for _ in range(RESAMPLE_ATTEMPTS):
                candidate = out.copy()
                for idx in self.constraint.resample_indices:
                    spec = self.genes[idx]
                    candidate[idx] = spec.lower + rng.random() * (spec.upper - spec.lower)
                candidate = self.clip_round(candidate)
                if self.constraint.is_feasible(candidate):
                    return candidate
        projected = self.clip_round(self.constraint.project(out))
        if not self.constraint.is_feasible(projected):
            raise ValueError("constraint projection produced an infeasible point")
        return projected


@dataclass
class Individual:
    """One candidate solution: a gene vector and its cached objective value."""

    genes: np.ndarray
    fitness: Optional[float] = None

    def __post_init__(self):
        self.genes = np.asarray(self.genes, dtype=np.float64).copy()

    def genes_tuple(self) -> Tuple[float, ...]:
        return tuple(self.genes.tolist())


@dataclass(frozen=True)
class BheConfig:
    """Optimizer hyper-parameters; defaults follow the attack configuration."""

    population: int = 10
    generations: int = 20
    bh_iterations: Optional[int] = None
    crossover_prob: float = 0.9
    step_size: float = 0.5
    epsilon: float = 0.05
    seed: int = 0
    query_budget: Optional[int] = 10_000
    local_search_budget: int = 60
    bh_only: bool = False
    record_evaluations: bool = True
    parallel_workers: Optional[int] = None

    def __post_init__(self):
        if self.population < 1:
            raise ValueError("population must be >= 1")
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        if self.bh_iterations is not None and self.bh_iterations < 1:
            raise ValueError("bh_iterations must be >= 1")
        if not 0.0 <= self.crossover_prob <= 1.0:
            raise ValueError("crossover_prob must be in [0, 1]")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.local_search_budget < 1:
            raise ValueError("local_search_budget must be >= 1")
        if self.query_budget is not None and self.query_budget < 0:
            raise ValueError("query_budget must be >= 0")

    @property
    def resolved_bh_iterations(self) -> int:
        if self.bh_iterations is not None:
            return self.bh_iterations
        return BH_ONLY_ITERATIONS if self.bh_only else DEFAULT_BH_ITERATIONS


@dataclass(frozen=True)
class GenerationRecord:
    gen: int
    best_fitness: float
    evals: int


@dataclass(frozen=True)
class HopEvent:
    generation: int
    individual: int
    fitness_current: float
    fitness_candidate: float
    accepted: bool


@dataclass(frozen=True)
class SelectionEvent:
    generation: int
    individual: int
    fitness_child: float
    fitness_parent: float
    accepted: bool


@dataclass
class OptimizeTrace:
    """Everything a run did: per-generation progress, accept/reject events,
    every evaluated point (optional), and exact evaluation counts."""

    generations: List[GenerationRecord] = field(default_factory=list)
    hop_events: List[HopEvent] = field(default_factory=list)
    selection_events: List[SelectionEvent] = field(default_factory=list)
    evaluations: Optional[List[Tuple[Tuple[float, ...], float]]] = None
    total_evaluations: int = 0
    best_evaluated_genes: Optional[Tuple[float, ...]] = None
    best_evaluated_fitness: float = math.inf

    def to_jsonl(self) -> str:
        """One JSON record per generation: {"gen", "best_fitness", "evals"}."""
        return "\n".join(
            json.dumps({"gen": g.gen, "best_fitness": g.best_fitness, "evals": g.evals})
            for g in self.generations
        )


@dataclass
class OptimizeResult:
    best: Optional[Individual]
    trace: OptimizeTrace
    stopped_by: str  # epsilon | predicate | generations | budget


class _Evaluator:
    """Counts objective calls, enforces the global budget, feeds the trace."""

    def __init__(self, objective: Objective, budget: Optional[int], trace: OptimizeTrace):
        self.objective = objective
        self.budget = budget
        self.trace = trace
        self._lock = threading.Lock()

    def fitness(self, ind: Individual) -> float:
        if ind.fitness is not None:
            return ind.fitness
        with self._lock:
            if self.budget is not None and self.trace.total_evaluations >= self.budget:
                raise EvaluationBudgetExceeded(
                    f"evaluation budget {self.budget} exhausted"
                )
            self.trace.total_evaluations += 1
        value = float(self.objective(ind.genes))
        ind.fitness = value
        with self._lock:
            if self.trace.evaluations is not None:
                self.trace.evaluations.append((ind.genes_tuple(), value))
            if value <= self.trace.best_evaluated_fitness:
                self.trace.best_evaluated_fitness = value
                self.trace.best_evaluated_genes = ind.genes_tuple()
        return value


def init_population(
    config: BheConfig,
    space: SearchSpace,
    rng: Optional[np.random.Generator] = None,
    size: Optional[int] = None,
) -> List[Individual]:
    """Draw the initial population, every gene uniform over its bounds."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    count = size if size is not None else config.population
    population = []
    for _ in range(count):
        genes = space.sample_uniform(rng)
        if space.constraint is not None:
            genes = space.repair(genes, rng)
        population.append(Individual(genes))
    return population


def neighborhood_sample(
    x: Individual,
    step_size: float,
    space: SearchSpace,
    rng: np.random.Generator,
) -> Individual:
    """Gaussian displacement scaled per gene by the gene's range, then clipped."""
    if step_size < 0:
        raise ValueError("step size must be non-negative")
    displacement = step_size * rng.standard_normal(space.dimension) * space.ranges
    genes = space.repair(x.genes + displacement, rng)
    return Individual(genes)


def _local_search(
    start: Individual,
    evaluator: _Evaluator,
    space: SearchSpace,
    budget: int,
) -> Individual:
    """Budgeted compass search: probe +/- step per axis, halve the step on
    stall, stop at step resolution (1 for integer genes, 1e-3 of range for
    continuous ones) or when the budget is gone."""
    if budget < 1:
        raise ValueError("local search budget must be >= 1")
    used = 0
    best = start
    if best.fitness is None:
        evaluator.fitness(best)
        used += 1
    ranges = space.ranges
    integer = space.integer_mask
    active = ranges > 0
    steps = ranges / 8.0
    while used < budget:
        improved = False
        for j in range(space.dimension):
            if not active[j]:
                continue
            if used >= budget:
                break
            for sign in (1.0, -1.0):
                genes = best.genes.copy()
                genes[j] += sign * steps[j]
                genes = space.repair(genes)
                if np.array_equal(genes, best.genes):
                    continue
                candidate = Individual(genes)
                evaluator.fitness(candidate)
                used += 1
                if candidate.fitness < best.fitness:
                    best = candidate
                    improved = True
                    break
                if used >= budget:
                    break
        if not improved:
            halved = steps / 2.0
            # integer axes visit the exact 1-step rung before giving up, so
            # single-unit moves are always probed
            clamp = active & integer & (steps > 1.0) & (halved < 1.0)
            steps = np.where(clamp, 1.0, halved)
            int_done = not np.any(active & integer & (steps >= 1.0))
            cont_done = not np.any(active & ~integer & (steps >= 1e-3 * ranges))
            if int_done and cont_done:
                break
    return best


def local_search(
    start: Individual,
    objective: Objective,
    space: SearchSpace,
    budget: int,
) -> Individual:
    """Standalone local minimizer; see _local_search for the step policy."""
    trace = OptimizeTrace(evaluations=None)
    return _local_search(start, _Evaluator(objective, None, trace), space, budget)


def _basin_hop(
    x: Individual,
    evaluator: _Evaluator,
    config: BheConfig,
    space: SearchSpace,
    rng: np.random.Generator,
    trace: Optional[OptimizeTrace] = None,
    generation: int = 0,
    index: int = 0,
) -> Individual:
    current = _local_search(x, evaluator, space, config.local_search_budget)
    for _ in range(config.resolved_bh_iterations):
        start = neighborhood_sample(current, config.step_size, space, rng)
        candidate = _local_search(start, evaluator, space, config.local_search_budget)
        accepted = candidate.fitness <= current.fitness
        if trace is not None:
            trace.hop_events.append(
                HopEvent(generation, index, current.fitness, candidate.fitness, accepted)
            )
        if accepted:
            current = candidate
    return current


def basin_hop(
    x: Individual,
    objective: Objective,
    config: BheConfig,
    space: SearchSpace,
    rng: np.random.Generator,
) -> Individual:
    """One basin-hopping pass: local minimum, then hop/minimize/accept loops.

    A hop is accepted exactly when the candidate is no worse (ties accept).
    """
    trace = OptimizeTrace(evaluations=None)
    return _basin_hop(x, _Evaluator(objective, None, trace), config, space, rng)


def crossover(
    v: Individual,
    x: Individual,
    crossover_prob: float,
    rng: np.random.Generator,
) -> Individual:
    """Per-gene mix: take the improved parent's gene when u <= CR, else keep x's.

    The child's fitness is left unset.
    """
    if v.genes.shape != x.genes.shape:
        raise ValueError(
            f"crossover parents have different dimensions: {v.genes.shape} vs {x.genes.shape}"
        )
    draws = rng.random(v.genes.shape[0])
    genes = np.where(draws <= crossover_prob, v.genes, x.genes)
    return Individual(genes)


def select(u: Individual, x: Individual, objective: Objective) -> Individual:
    """Greedy selection: the child u survives when it is no worse (ties favor u)."""
    trace = OptimizeTrace(evaluations=None)
    evaluator = _Evaluator(objective, None, trace)
    fu = evaluator.fitness(u)
    fx = evaluator.fitness(x)
    return u if fu <= fx else x


def optimize(
    objective: Objective,
    space: SearchSpace,
    config: BheConfig,
    stop_predicate: Optional[Callable[[Individual], bool]] = None,
    warm_starts: Optional[Sequence[Sequence[float]]] = None,
) -> OptimizeResult:
    """Run the full population loop and return the best survivor plus trace.

    Per generation each individual goes through basin hopping, crossover with
    its own pre-hop state, and greedy selection; the global best only ever
    improves.  Termination: stop_predicate on the global best, best fitness
    below epsilon, the generation cap, or the evaluation budget (also
    triggered by the objective raising EvaluationBudgetExceeded or
    StopRequested).  In bh_only mode the run degenerates to a single
    basin-hopping chain with no crossover or selection.
    """
    rng = np.random.default_rng(config.seed)
    trace = OptimizeTrace(evaluations=[] if config.record_evaluations else None)
    evaluator = _Evaluator(objective, config.query_budget, trace)
    size = 1 if config.bh_only else config.population
    population = init_population(config, space, rng, size=size)
    if warm_starts:
        for i, genes in enumerate(warm_starts[:size]):
            pinned = space.repair(np.asarray(genes, dtype=np.float64), rng)
            population[i] = Individual(pinned)

    best: Optional[Individual] = None
    stopped_by = "generations"

    def consider(candidate: Individual) -> None:
        nonlocal best
        if best is None or candidate.fitness <= best.fitness:
            best = candidate

    def should_stop() -> Optional[str]:
        if best is None:
            return None
        if stop_predicate is not None and stop_predicate(best):
            return "predicate"
        return None

    try:
        for ind in population:
            evaluator.fitness(ind)
            consider(ind)
        trace.generations.append(GenerationRecord(0, best.fitness, trace.total_evaluations))
        reason = should_stop()
        if reason is None and best.fitness < config.epsilon:
            reason = "epsilon"
        if reason is not None:
            return OptimizeResult(best, trace, reason)

        for gen in range(1, config.generations + 1):
            stop_reason = None
            improved: Optional[List[Individual]] = None
            if config.parallel_workers and len(population) > 1:
                improved = _parallel_bh_passes(population, evaluator, config, space, rng, trace, gen)
            for i, x in enumerate(population):
                v = (
                    improved[i]
                    if improved is not None
                    else _basin_hop(x, evaluator, config, space, rng, trace, gen, i)
                )
                if config.bh_only:
                    population[i] = v
                else:
                    u = crossover(v, x, config.crossover_prob, rng)
                    u.genes = space.repair(u.genes, rng)
                    accepted = evaluator.fitness(u) <= evaluator.fitness(x)
                    trace.selection_events.append(
                        SelectionEvent(gen, i, u.fitness, x.fitness, accepted)
                    )
                    population[i] = u if accepted else x
                consider(population[i])
                stop_reason = should_stop()
                if stop_reason is not None:
                    break
            trace.generations.append(
                GenerationRecord(gen, best.fitness, trace.total_evaluations)
            )
            if stop_reason is not None:
                stopped_by = stop_reason
                break
            if best.fitness < config.epsilon:
                stopped_by = "epsilon"
                break
    except (EvaluationBudgetExceeded, StopRequested) as exc:
        stopped_by = "budget" if isinstance(exc, EvaluationBudgetExceeded) else "predicate"
        if not trace.generations or trace.generations[-1].evals != trace.total_evaluations:
            fitness = best.fitness if best is not None else math.inf
            gen_index = len(trace.generations)
            trace.generations.append(
                GenerationRecord(gen_index, fitness, trace.total_evaluations)
            )
    return OptimizeResult(best, trace, stopped_by)


def _parallel_bh_passes(
    population: List[Individual],
    evaluator: _Evaluator,
    config: BheConfig,
    space: SearchSpace,
    rng: np.random.Generator,
    trace: OptimizeTrace,
    gen: int,
) -> List[Individual]:
    """Basin-hop all individuals across worker threads (objective must be
    safe for concurrent calls; trace ordering is not deterministic here)."""
    rngs = list(rng.spawn(len(population)))
    with ThreadPoolExecutor(max_workers=config.parallel_workers) as pool:
        futures = [
            pool.submit(_basin_hop, x, evaluator, config, space, rngs[i], trace, gen, i)
            for i, x in enumerate(population)
        ]
        return [f.result() for f in futures]
