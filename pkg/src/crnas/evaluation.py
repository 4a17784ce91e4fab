"""Robust accuracy, correlation analysis and evaluation merging."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import stats

from . import genome as gn
from .attacks import KINDS, AttackSpec, default_suite, run_attack, with_seed
from .data import Dataset
from .supernet import Supernet, extract


@dataclass(frozen=True)
class FidelityLevel:
    label: str
    samples: int

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("fidelity sample count must be >= 1")


LOW = FidelityLevel("low", 100)
HIGH = FidelityLevel("high", 5000)
DESK_LOW = FidelityLevel("low", 64)
DESK_HIGH = FidelityLevel("high", 512)


def check_levels(low: FidelityLevel, high: FidelityLevel) -> None:
    if high.samples <= low.samples:
        raise ValueError("high fidelity must use more samples than low fidelity")


def _as_model(model, genome):
    if isinstance(model, Supernet):
        if genome is None:
            raise ValueError("a genome is required to evaluate a supernet")
        return extract(model, genome)
    if isinstance(model, torch.nn.Module):
        model.eval()
    return model


def robust_accuracy(model, genome, spec: AttackSpec, data: Dataset, fidelity: FidelityLevel | None = None,
                    batch_size: int = 256) -> float:
    """Fraction of the first ``fidelity.samples`` examples still classified correctly after ``spec``."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    count = len(data) if fidelity is None else fidelity.samples
    if count > len(data):
        raise ValueError(f"fidelity needs {count} samples, dataset has {len(data)}")
    model = _as_model(model, genome)
    frozen = [p for p in model.parameters() if p.requires_grad] if hasattr(model, "parameters") else []
    for p in frozen:
        p.requires_grad_(False)
    try:
        correct = 0
        for b, start in enumerate(range(0, count, batch_size)):
            x = data.images[start : min(start + batch_size, count)]
            y = data.labels[start : min(start + batch_size, count)]
            result = run_attack(model, x, y, with_seed(spec, spec.seed + 7919 * b))
            correct += int(result.correct.sum())
    finally:
        for p in frozen:
            p.requires_grad_(True)
    return correct / count


@dataclass
class EvaluationReport:
    names: list[str]
    accuracies: list[float]
    fidelity: str
    genome: tuple[int, ...] | None = None
    wall_times: list[float] = field(default_factory=list)
    ra: float | None = None

    def __post_init__(self):
        if any(not 0.0 <= a <= 1.0 for a in self.accuracies):
            raise ValueError("accuracies must lie in [0, 1]")

    @property
    def total_time(self) -> float:
        return float(sum(self.wall_times))

    def to_dict(self) -> dict:
        return {
            "genome": gn.to_text(self.genome) if self.genome is not None else None,
            "fidelity": self.fidelity,
            "names": self.names,
            "accuracies": self.accuracies,
            "wall_times": self.wall_times,
            "ra": self.ra,
        }


def run_suite(model, genome, suite: Sequence[AttackSpec], data: Dataset, fidelity: FidelityLevel | None,
              indices: Sequence[int] | None = None) -> EvaluationReport:
    indices = range(len(suite)) if indices is None else indices
    accs, times = [], []
    for i in indices:
        t0 = time.perf_counter()
        accs.append(robust_accuracy(model, genome, suite[i], data, fidelity))
        times.append(time.perf_counter() - t0)
    return EvaluationReport([suite[i].kind for i in indices], accs,
                            fidelity.label if fidelity else "all",
                            gn.check(genome) if genome is not None else None, times)


def correlation_matrix(acc: np.ndarray, method: str = "pearson") -> np.ndarray:
    """Column correlations of a (samples x evaluations) matrix.

    Off-diagonal entries involving a zero-variance column are NaN (undefined);
    the diagonal is 1.
    """
    acc = np.asarray(acc, dtype=np.float64)
    if acc.ndim != 2 or acc.shape[0] < 2:
        raise ValueError("need at least two sampled architectures")
    if method == "spearman":
        acc = np.apply_along_axis(stats.rankdata, 0, acc)
    elif method != "pearson":
        raise ValueError(f"unknown correlation method {method!r}")
    centred = acc - acc.mean(axis=0)
    norms = np.sqrt((centred**2).sum(axis=0))
    defined = norms > 1e-12 * max(1.0, float(np.abs(acc).max()))
    safe = np.where(defined, norms, 1.0)
    corr = (centred.T @ centred) / np.outer(safe, safe)
    corr = np.clip(corr, -1.0, 1.0)
    corr[~(defined[:, None] & defined[None, :])] = np.nan
    np.fill_diagonal(corr, 1.0)
    return corr


def undefined_pairs(corr: np.ndarray) -> list[tuple[int, int]]:
    n = corr.shape[0]
    return [(i, j) for i in range(n) for j in range(i + 1, n) if math.isnan(corr[i, j])]


def sample_and_correlate(net: Supernet, count: int, suite: Sequence[AttackSpec], data: Dataset,
                         fidelity: FidelityLevel, seed: int = 0, method: str = "pearson",
                         ) -> tuple[list[tuple[int, ...]], np.ndarray, np.ndarray]:
    """Evaluate ``count`` random sub-networks on the full suite and correlate the evaluations.

    Returns ``(genomes, accuracies, correlation)``.
    """
    if count < 2:
        raise ValueError("count must be >= 2")
    rng = np.random.default_rng(seed)
    genomes = [gn.random_genome(rng) for _ in range(count)]
    acc = np.array([run_suite(net, g, suite, data, fidelity).accuracies for g in genomes])
    return genomes, acc, correlation_matrix(acc, method)


@dataclass
class MergePlan:
    """Partition of the evaluations; ``groups[i][0]`` is the representative."""

    groups: list[list[int]]
    coefficients: list[float]
    threshold: float
    names: list[str] = field(default_factory=lambda: list(KINDS))

    def __post_init__(self):
        members = sorted(i for g in self.groups for i in g)
        if members != list(range(len(self.names))):
            raise ValueError("groups must partition the evaluation list")
        if len(self.coefficients) != len(self.groups):
            raise ValueError("one coefficient per group required")
        if any(k < 1.0 - 1e-12 for k in self.coefficients):
            raise ValueError("coefficients must be >= 1")

    @property
    def n(self) -> int:
        return len(self.names)

    @property
    def m(self) -> int:
        return len(self.groups)

    @property
    def representatives(self) -> list[int]:
        return [g[0] for g in self.groups]

    @classmethod
    def identity(cls, names: Sequence[str] = KINDS) -> "MergePlan":
        return cls([[i] for i in range(len(names))], [1.0] * len(names), 1.0, list(names))

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "names": self.names,
            "groups": [
                {"representative": self.names[g[0]], "members": [self.names[i] for i in g], "coefficient": k}
                for g, k in zip(self.groups, self.coefficients)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MergePlan":
        names = list(d["names"])
        groups = [[names.index(name) for name in g["members"]] for g in d["groups"]]
        for g, raw in zip(groups, d["groups"]):
            if names[g[0]] != raw["representative"]:
                raise ValueError("representative must be listed first among members")
        return cls(groups, [float(g["coefficient"]) for g in d["groups"]], float(d["threshold"]), names)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "MergePlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def group_evaluations(corr: np.ndarray, tau: float, linkage: str = "leader") -> list[list[int]]:
    """Group evaluations whose correlation reaches ``tau``.

    ``leader``: scan in order; an unassigned evaluation opens a group and
    absorbs every later unassigned evaluation correlated with it at >= tau.
    ``transitive``: connected components of the >= tau graph.
    The earliest index represents its group in both cases. Undefined (NaN)
    correlations never merge.
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    corr = np.asarray(corr, dtype=np.float64)
    n = corr.shape[0]
    linked = np.nan_to_num(corr, nan=-np.inf) >= tau
    if linkage == "leader":
        groups, assigned = [], set()
        for i in range(n):
            if i in assigned:
                continue
            group = [i] + [j for j in range(i + 1, n) if j not in assigned and linked[i, j]]
            assigned.update(group)
            groups.append(group)
        return groups
    if linkage == "transitive":
        parent = list(range(n))

        def find(a: int) -> int:
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for i in range(n):
            for j in range(i + 1, n):
                if linked[i, j]:
                    ri, rj = find(i), find(j)
                    parent[max(ri, rj)] = min(ri, rj)
        comps: dict[int, list[int]] = {}
        for i in range(n):
            comps.setdefault(find(i), []).append(i)
        return [sorted(c) for _, c in sorted(comps.items())]
    raise ValueError(f"unknown linkage {linkage!r}")


def coefficient_rows(groups: Sequence[Sequence[int]], acc: np.ndarray) -> np.ndarray:
    """Per-architecture coefficients: group accuracy sum over representative accuracy.

    Entries are NaN where the representative scored 0 on that architecture.
    """
    acc = np.atleast_2d(np.asarray(acc, dtype=np.float64))
    rows = np.empty((acc.shape[0], len(groups)))
    for k, g in enumerate(groups):
        rep = acc[:, g[0]]
        total = acc[:, list(g)].sum(axis=1)
        rows[:, k] = np.where(rep > 0, total / np.where(rep > 0, rep, 1.0), np.nan)
    return rows


def average_coefficients(rows: np.ndarray, group_sizes: Sequence[int] | None = None) -> list[float]:
    """Column means ignoring undefined rows; an all-undefined column falls back to its group size."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    out = []
    for k in range(rows.shape[1]):
        col = rows[:, k][~np.isnan(rows[:, k])]
        if len(col):
            out.append(float(col.mean()))
        else:
            out.append(float(group_sizes[k]) if group_sizes is not None else 1.0)
    return out


def build_merge_plan(corr: np.ndarray, tau: float, sampled_acc: np.ndarray, names: Sequence[str] = KINDS,
                     linkage: str = "leader") -> MergePlan:
    groups = group_evaluations(corr, tau, linkage)
    rows = coefficient_rows(groups, sampled_acc)
    coeffs = average_coefficients(rows, [len(g) for g in groups])
    coeffs = [1.0 if len(g) == 1 else k for g, k in zip(groups, coeffs)]
    return MergePlan(groups, coeffs, tau, list(names))


def comprehensive_ra(merged: Sequence[float], plan: MergePlan, n: int | None = None) -> float:
    """``sum_i k_i * f_i / n`` over the representatives' accuracies."""
    if len(merged) != plan.m:
        raise ValueError(f"expected {plan.m} merged accuracies, got {len(merged)}")
    n = plan.n if n is None else n
    return float(sum(k * f for k, f in zip(plan.coefficients, merged)) / n)


def evaluate_suite(net, genome, plan: MergePlan, data: Dataset, fidelity: FidelityLevel | None,
                   suite: Sequence[AttackSpec] | None = None) -> EvaluationReport:
    """Run only the plan's representative evaluations and attach the comprehensive RA."""
    suite = default_suite() if suite is None else suite
    if len(suite) != plan.n:
        raise ValueError(f"suite has {len(suite)} evaluations, plan expects {plan.n}")
    report = run_suite(net, genome, suite, data, fidelity, plan.representatives)
    report.ra = comprehensive_ra(report.accuracies, plan)
    return report


def kendall_tau(a: Sequence[float], b: Sequence[float]) -> float:
    return float(stats.kendalltau(a, b).statistic)


def write_matrix_csv(path: str | Path, matrix: np.ndarray, names: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + list(names))
        for name, row in zip(names, matrix):
            w.writerow([name] + ["nan" if math.isnan(v) else f"{v:.6f}" for v in row])


def read_matrix_csv(path: str | Path) -> tuple[np.ndarray, list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]]), names
