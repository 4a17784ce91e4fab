"""Archive-based evolutionary search with an online surrogate.

The surrogate ranks individuals; only ``m`` per generation get a true
(high-fidelity) evaluation, and only true evaluations enter the archive.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import genome as gn
from .surrogate import SurrogateModel, finetune_high_fidelity

log = logging.getLogger(__name__)

Evaluator = Callable[[gn.Genome], float]


@dataclass
class EvoConfig:
    population: int = 20
    generations: int = 20
    per_generation: int = 3
    crossover_rate: float = 0.9
    mutation_rate: float = 1 / 32
    seed: int = 0
    finetune_epochs: int = 100
    finetune_lr: float = 1e-3

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if not 0 <= self.per_generation <= self.population:
            raise ValueError("per_generation must lie in [0, population]")
        if not (0.0 <= self.crossover_rate <= 1.0 and 0.0 <= self.mutation_rate <= 1.0):
            raise ValueError("rates must lie in [0, 1]")
        if self.generations < 0:
            raise ValueError("generations must be >= 0")


@dataclass
class SearchSpace:
    """Allowed values per gene position; defaults to the full space."""

    choices: list[list[int]] = field(default_factory=lambda: [list(range(c)) for c in gn.CARDINALITIES])

    def __post_init__(self):
        if len(self.choices) != gn.GENOME_LENGTH:
            raise ValueError("one choice list per gene required")
        for pos, (vals, card) in enumerate(zip(self.choices, gn.CARDINALITIES)):
            if not vals or any(not 0 <= v < card for v in vals):
                raise ValueError(f"illegal choices at gene {pos}: {vals}")

    @property
    def size(self) -> int:
        return int(np.prod([len(c) for c in self.choices], dtype=object))

    def sample(self, rng: np.random.Generator) -> gn.Genome:
        return tuple(int(vals[rng.integers(len(vals))]) for vals in self.choices)

    def resample_gene(self, pos: int, rng: np.random.Generator) -> int:
        vals = self.choices[pos]
        return int(vals[rng.integers(len(vals))])

    def enumerate(self) -> list[gn.Genome]:
        out: list[tuple[int, ...]] = [()]
        for vals in self.choices:
            out = [g + (v,) for g in out for v in vals]
        return out


@dataclass
class ArchiveEntry:
    ra: float
    generation: int


@dataclass
class SearchState:
    population: list[gn.Genome]
    archive: dict[gn.Genome, ArchiveEntry]
    generation: int
    rng: np.random.Generator
    surrogate: SurrogateModel
    evaluate: Evaluator
    config: EvoConfig
    space: SearchSpace
    plan: object = None
    trace: list[dict] = field(default_factory=list)

    def best(self) -> tuple[gn.Genome, float]:
        g = max(self.archive, key=lambda k: (self.archive[k].ra, -self.archive[k].generation))
        return g, self.archive[g].ra

    def record(self) -> None:
        _, ra = self.best()
        self.trace.append({"generation": self.generation, "best_ra": ra, "archive_size": len(self.archive)})


def _fresh(state: SearchState, taken: set, attempts: int = 1000) -> gn.Genome | None:
    for _ in range(attempts):
        g = state.space.sample(state.rng)
        if g not in state.archive and g not in taken:
            return g
    return None


def _evaluate_into_archive(state: SearchState, genomes: Sequence[gn.Genome],
                           strict: bool = False) -> list[tuple[gn.Genome, float]]:
    added = []
    for g in genomes:
        try:
            ra = float(state.evaluate(g))
            if not np.isfinite(ra):
                raise ValueError(f"non-finite RA {ra!r}")
        except Exception as exc:  # noqa: BLE001 - one bad individual must not end the run
            if strict:
                raise
            log.warning("evaluation of %s failed: %s", gn.to_text(g), exc)
            continue
        state.archive[g] = ArchiveEntry(ra, state.generation)
        added.append((g, ra))
    return added


def initialize(cfg: EvoConfig, evaluate: Evaluator, surrogate: SurrogateModel,
               space: SearchSpace | None = None, plan=None) -> SearchState:
    """Random valid population, all truly evaluated, archived and used to fine-tune."""
    space = space or SearchSpace()
    rng = np.random.default_rng(cfg.seed)
    state = SearchState([], {}, 0, rng, surrogate, evaluate, cfg, space, plan)
    taken: set = set()
    for _ in range(cfg.population):
        g = _fresh(state, taken) or space.sample(rng)
        taken.add(g)
        state.population.append(g)
    added = _evaluate_into_archive(state, state.population, strict=True)
    finetune_high_fidelity(surrogate, added, cfg.finetune_epochs, cfg.finetune_lr)
    state.record()
    return state


def _tournament(scores: np.ndarray, rng: np.random.Generator) -> int:
    a, b = rng.integers(len(scores), size=2)
    return int(a if scores[a] >= scores[b] else b)


def make_offspring(state: SearchState, scores: np.ndarray) -> list[gn.Genome]:
    cfg, rng, pop = state.config, state.rng, state.population
    children: list[gn.Genome] = []
    while len(children) < cfg.population:
        p1 = list(pop[_tournament(scores, rng)])
        p2 = list(pop[_tournament(scores, rng)])
        if rng.random() < cfg.crossover_rate:
            mask = rng.random(gn.GENOME_LENGTH) < 0.5
            c1 = [a if m else b for a, b, m in zip(p1, p2, mask)]
            c2 = [b if m else a for a, b, m in zip(p1, p2, mask)]
        else:
            c1, c2 = p1[:], p2[:]
        for child in (c1, c2):
            for pos in range(gn.GENOME_LENGTH):
                if rng.random() < cfg.mutation_rate:
                    child[pos] = state.space.resample_gene(pos, rng)
            children.append(gn.check(child))
    return children[: cfg.population]


def step_generation(state: SearchState) -> SearchState:
    cfg = state.config
    state.generation += 1
    scores = state.surrogate.predict_many(state.population)
    offspring = make_offspring(state, scores)

    pool: list[gn.Genome] = []
    for g in state.population + offspring:
        if g not in pool:
            pool.append(g)
    pool_scores = state.surrogate.predict_many(pool)
    ranked = [pool[i] for i in np.argsort(-pool_scores, kind="stable")]
    population = ranked[: cfg.population]
    taken = set(population)
    while len(population) < cfg.population:
        g = _fresh(state, taken) or state.space.sample(state.rng)
        taken.add(g)
        population.append(g)

    chosen = []
    for i in range(min(cfg.per_generation, len(population))):
        g = population[i]
        if g in state.archive:
            # diversity rule: an archived pick is regenerated at random
            fresh = _fresh(state, taken)
            if fresh is None:
                continue
            taken.add(fresh)
            population[i] = g = fresh
        chosen.append(g)
    state.population = population
    added = _evaluate_into_archive(state, chosen)
    finetune_high_fidelity(state.surrogate, added, cfg.finetune_epochs, cfg.finetune_lr)
    state.record()
    log.info("generation %d: archive %d, best %.4f", state.generation, len(state.archive), state.trace[-1]["best_ra"])
    return state


@dataclass
class SearchResult:
    best: gn.Genome
    best_ra: float
    archive: dict[gn.Genome, ArchiveEntry]
    trace: list[dict]


def run(cfg: EvoConfig, evaluate: Evaluator, surrogate: SurrogateModel, space: SearchSpace | None = None,
        plan=None) -> SearchResult:
    state = initialize(cfg, evaluate, surrogate, space, plan)
    for _ in range(cfg.generations):
        step_generation(state)
    best, ra = state.best()
    return SearchResult(best, ra, state.archive, state.trace)


def write_archive(path: str | Path, archive: dict[gn.Genome, ArchiveEntry]) -> None:
    with open(path, "w") as fh:
        for g, entry in archive.items():
            fh.write(json.dumps({"genome": gn.to_text(g), "ra": entry.ra, "generation": entry.generation}) + "\n")


def read_archive(path: str | Path) -> dict[gn.Genome, ArchiveEntry]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            out[gn.parse(rec["genome"])] = ArchiveEntry(float(rec["ra"]), int(rec["generation"]))
    return out


def write_trace(path: str | Path, trace: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["generation", "best_ra", "archive_size"])
        w.writeheader()
        for row in trace:
            w.writerow({**row, "best_ra": f"{row['best_ra']:.6f}"})
