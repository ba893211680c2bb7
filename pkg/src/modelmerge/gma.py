"""Genetic merge: evolve a population seeded with the sources and their average.

Each generation keeps every parent (reproduction), adds a one-bit mutation of
each parent with probability ``p1``, shuffles the parents and, for each
adjacent non-overlapping pair, adds the two crossover children with
probability ``p2`` and one linear interpolation with probability ``p3``.
The ``K`` members with the lowest fitness survive.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, OperatorInapplicableError
from .merge_core import (
    Crossover,
    Interpolate,
    MergeCoefficients,
    Mutate,
    Operator,
    SourceBank,
    average_init,
    direct_average,
    source_coefficients,
    track_operator,
)
from .nn import NORM_VAR, NORM_VAR_FLOOR, LayerParams, ModelParams, error_rate_of
from .soma import Fitness

MAX_MUTATION_ATTEMPTS = 100


@dataclass(frozen=True)
class GmaConfig:
    K: int = 15
    p1: float = 0.5
    p2: float = 0.1
    p3: float = 0.1
    max_generations: int = 100
    seed: int = 0
    patience: int | None = 10
    min_improvement: float = 1e-6

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be positive")
        for name in ("p1", "p2", "p3"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.max_generations < 0:
            raise ValueError("max_generations must be nonnegative")


@dataclass
class Member:
    model: ModelParams
    fitness: float | None = None
    coeffs: MergeCoefficients | None = None


# operators -------------------------------------------------------------------


def flip_bit(x: float, bit: int) -> float:
    """Flip bit ``bit`` (0 = least significant) of the IEEE-754 binary64 form of ``x``."""
    if not 0 <= bit < 64:
        raise ValueError("bit must lie in [0, 64)")
    word = np.array([x], dtype=np.float64).view(np.uint64)
    word ^= np.uint64(1) << np.uint64(bit)
    return float(word.view(np.float64)[0])


def _bits(x: float) -> int:
    return int(np.array([x], dtype=np.float64).view(np.uint64)[0])


def draw_mutation(model: ModelParams, rng: np.random.Generator) -> Mutate | None:
    """Pick a layer, a scalar in it, and a bit; resample flips that are not finite.

    Returns ``None`` after ``MAX_MUTATION_ATTEMPTS`` rejected draws.
    """
    for _ in range(MAX_MUTATION_ATTEMPTS):
        l = int(rng.integers(len(model.layers)))
        layer = model.layers[l]
        sizes = [t.size for t in layer.tensors.values()]
        pos = int(rng.integers(sum(sizes)))
        bit = int(rng.integers(64))
        for role, size in zip(layer.tensors, sizes):
            if pos < size:
                break
            pos -= size
        old = float(layer[role].ravel()[pos])
        new = flip_bit(old, bit)
        if not math.isfinite(new):
            continue
        if role == NORM_VAR:
            new = max(new, NORM_VAR_FLOOR)
        if _bits(new) == _bits(old):
            continue
        return Mutate(l, role, pos, new)
    return None


def apply_mutation(model: ModelParams, op: Mutate) -> ModelParams:
    layer = model.layers[op.layer]
    tensors = dict(layer.tensors)
    t = tensors[op.role].copy()
    t.ravel()[op.index] = op.value
    tensors[op.role] = t
    return model.replace_layer(op.layer, LayerParams(layer.name, tensors))


def mutate(model: ModelParams, rng: np.random.Generator) -> ModelParams | None:
    """Copy of ``model`` with exactly one bit of one scalar flipped (``None`` if no valid flip)."""
    op = draw_mutation(model, rng)
    return None if op is None else apply_mutation(model, op)


def crossover_at(a: ModelParams, b: ModelParams, point: int) -> tuple[ModelParams, ModelParams]:
    """Exchange the first ``point`` layers: ``(b[:point] + a[point:], a[:point] + b[point:])``."""
    a.check_compatible(b)
    L = len(a.layers)
    if L < 2:
        raise OperatorInapplicableError("crossover needs at least two layers")
    if not 1 <= point < L:
        raise IndexError(f"crossover point {point} outside [1, {L})")
    child1 = ModelParams(b.layers[:point] + a.layers[point:], a.architecture_id)
    child2 = ModelParams(a.layers[:point] + b.layers[point:], a.architecture_id)
    return child1, child2


def crossover(a: ModelParams, b: ModelParams, rng: np.random.Generator) -> tuple[ModelParams, ModelParams]:
    if len(a.layers) < 2:
        raise OperatorInapplicableError("crossover needs at least two layers")
    return crossover_at(a, b, int(rng.integers(1, len(a.layers))))


def interpolate(a: ModelParams, b: ModelParams, lam: float) -> ModelParams:
    """Scalar-wise ``lam * a + (1 - lam) * b`` for ``lam`` in the open interval (0, 1)."""
    if not 0.0 < lam < 1.0:
        raise ValueError("interpolation weight must lie in (0, 1)")
    a.check_compatible(b)
    layers = tuple(
        LayerParams(la.name, {r: lam * la[r] + (1 - lam) * lb[r] for r in la.tensors})
        for la, lb in zip(a.layers, b.layers)
    )
    return ModelParams(layers, a.architecture_id)


def apply_operator(parents, op: Operator) -> tuple[ModelParams, ...]:
    """Raw-model counterpart of :func:`modelmerge.merge_core.track_operator`."""
    if isinstance(op, Mutate):
        return (apply_mutation(parents[0], op),)
    if isinstance(op, Crossover):
        return crossover_at(parents[0], parents[1], op.point)
    if isinstance(op, Interpolate):
        return (interpolate(parents[0], parents[1], op.lam),)
    return (parents[0],)


def select_top_k(members: list[Member], K: int) -> list[Member]:
    """Keep the ``K`` lowest-fitness members; ties go to the earlier member."""
    if any(m.fitness is None for m in members):
        raise ValueError("every member needs a cached fitness before selection")
    if len(members) <= K:
        return list(members)
    order = sorted(range(len(members)), key=lambda i: members[i].fitness)
    return [members[i] for i in order[:K]]


# evolution loop --------------------------------------------------------------


@dataclass
class Offspring:
    op: Operator
    parents: tuple[int, ...]
    models: tuple[ModelParams, ...]


def breed(population: list[ModelParams], cfg: GmaConfig, rng: np.random.Generator) -> list[Offspring]:
    """New members of one generation (parents are kept by the caller)."""
    out: list[Offspring] = []
    for i, model in enumerate(population):
        if rng.random() < cfg.p1:
            op = draw_mutation(model, rng)
            if op is not None:
                out.append(Offspring(op, (i,), (apply_mutation(model, op),)))
    order = rng.permutation(len(population))
    L = len(population[0].layers) if population else 0
    for k in range(0, len(order) - 1, 2):
        i, j = int(order[k]), int(order[k + 1])
        a, b = population[i], population[j]
        if rng.random() < cfg.p2 and L >= 2:
            op = Crossover(int(rng.integers(1, L)))
            out.append(Offspring(op, (i, j), crossover_at(a, b, op.point)))
        if rng.random() < cfg.p3:
            lam = 0.0
            while lam == 0.0:
                lam = float(rng.random())
            op = Interpolate(lam)
            out.append(Offspring(op, (i, j), (interpolate(a, b, lam),)))
    return out


@dataclass
class GmaResult:
    model: ModelParams
    fitness: float
    log: list[dict] = field(default_factory=list)
    evaluation_curve: list[float] = field(default_factory=list)
    coeffs: MergeCoefficients | None = None
    history: list[list[Member]] | None = None

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["generation", "evaluations_so_far", "best_fitness"])
            for row in self.log:
                w.writerow([row["generation"], row["evaluations_so_far"], repr(float(row["best_fitness"]))])


def _evaluate(fitness: Fitness, model: ModelParams, valset) -> float:
    try:
        value = float(fitness(model, valset))
    except NumericError:
        return math.inf
    return value if math.isfinite(value) else math.inf


def gma_run(
    bank: SourceBank,
    valset,
    fitness: Fitness = error_rate_of,
    cfg: GmaConfig = GmaConfig(),
    *,
    track: bool = False,
    keep_history: bool = False,
    workers: int = 1,
) -> GmaResult:
    """Run the genetic merge and return the best member ever retained.

    With ``track=True`` every member also carries its merge coefficients,
    updated through :func:`track_operator`; ``keep_history`` stores each
    generation's surviving population.
    """
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    curve: list[float] = []

    def evaluate(members: list[Member]) -> None:
        todo = [m for m in members if m.fitness is None]
        if pool is not None:
            values = list(pool.map(lambda m: _evaluate(fitness, m.model, valset), todo))
        else:
            values = [_evaluate(fitness, m.model, valset) for m in todo]
        for m, v in zip(todo, values):
            m.fitness = v
            curve.append(min(v, curve[-1]) if curve else v)

    population = [
        Member(src, coeffs=source_coefficients(bank, i) if track else None)
        for i, src in enumerate(bank.sources)
    ]
    population.append(Member(direct_average(bank), coeffs=average_init(bank) if track else None))
    try:
        evaluate(population)
        population = select_top_k(population, cfg.K)
        best = min(m.fitness for m in population)
        log = [{"generation": 0, "evaluations_so_far": len(curve), "best_fitness": best}]
        history = [list(population)] if keep_history else None
        stall = 0
        for gen in range(1, cfg.max_generations + 1):
            rng = np.random.default_rng([cfg.seed, gen])
            children = breed([m.model for m in population], cfg, rng)
            nxt = list(population)
            for child in children:
                coeffs = (None,) * len(child.models)
                if track:
                    coeffs = track_operator([population[i].coeffs for i in child.parents], child.op, bank)
                nxt.extend(Member(_clamp_var(mod), coeffs=c) for mod, c in zip(child.models, coeffs))
            evaluate(nxt)
            population = select_top_k(nxt, cfg.K)
            new_best = _best(population).fitness
            stall = stall + 1 if best - new_best < cfg.min_improvement else 0
            best = min(best, new_best)
            log.append({"generation": gen, "evaluations_so_far": len(curve), "best_fitness": best})
            if history is not None:
                history.append(list(population))
            if cfg.patience is not None and stall >= cfg.patience:
                break
    finally:
        if pool is not None:
            pool.shutdown()
    winner = _best(population)
    return GmaResult(winner.model, winner.fitness, log, curve, winner.coeffs, history)


def _best(members: list[Member]) -> Member:
    return min(members, key=lambda m: m.fitness)


def _clamp_var(model: ModelParams) -> ModelParams:
    if not any(NORM_VAR in layer.tensors and np.any(layer[NORM_VAR] < NORM_VAR_FLOOR) for layer in model.layers):
        return model
    return model.map(lambda r, t: np.maximum(t, NORM_VAR_FLOOR) if r == NORM_VAR else t)
