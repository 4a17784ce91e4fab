"""32-gene encoding of a normal + reduction cell pair.

Layout: ``[normal cell | reduction cell]``, each cell is 4 intermediate nodes,
each node 2 edges, each edge ``(op, source)``. Sources 0 and 1 are the cell
inputs ``c_{k-2}`` and ``c_{k-1}``; source ``s >= 2`` is intermediate node
``s - 2``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

OPS = (
    "none",
    "max_pool_3x3",
    "avg_pool_3x3",
    "skip_connect",
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_conv_3x3",
    "dil_conv_5x5",
)
NUM_OPS = len(OPS)
NUM_NODES = 4
EDGES_PER_NODE = 2
CELL_GENES = NUM_NODES * EDGES_PER_NODE * 2
GENOME_LENGTH = 2 * CELL_GENES
CELL_KINDS = ("normal", "reduction")

Genome = tuple[int, ...]


class GenomeError(ValueError):
    def __init__(self, violations: list[str]):
        super().__init__("invalid genome: " + "; ".join(violations))
        self.violations = violations


def gene_position(cell: int, node: int, edge: int, field_: int) -> int:
    """Flat index of a gene; ``field_`` is 0 for op, 1 for source."""
    return cell * CELL_GENES + node * 4 + edge * 2 + field_


def cardinalities() -> list[int]:
    """Number of legal values at each of the 32 positions."""
    out = []
    for cell in range(2):
        for node in range(NUM_NODES):
            for _edge in range(EDGES_PER_NODE):
                out.extend([NUM_OPS, node + 2])
    return out


CARDINALITIES = tuple(cardinalities())


def validate(g: Sequence[int]) -> list[str]:
    """Return the list of violations; empty means valid."""
    if len(g) != GENOME_LENGTH:
        return [f"length {len(g)} != {GENOME_LENGTH}"]
    problems = []
    for pos, (value, card) in enumerate(zip(g, CARDINALITIES)):
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
            problems.append(f"gene {pos}: non-integer {value!r}")
        elif not 0 <= value < card:
            kind = "op" if pos % 2 == 0 else "source"
            problems.append(f"gene {pos}: {kind} {value} outside [0, {card - 1}]")
    return problems


def is_valid(g: Sequence[int]) -> bool:
    return not validate(g)


def check(g: Sequence[int]) -> Genome:
    problems = validate(g)
    if problems:
        raise GenomeError(problems)
    return tuple(int(v) for v in g)


def random_genome(rng: np.random.Generator) -> Genome:
    return tuple(int(rng.integers(card)) for card in CARDINALITIES)


def parse(text: str) -> Genome:
    """Parse the comma-separated text form."""
    try:
        values = [int(tok) for tok in text.replace(" ", "").split(",") if tok != ""]
    except ValueError as exc:
        raise GenomeError([f"unparseable genome text {text!r}"]) from exc
    return check(values)


def to_text(g: Sequence[int]) -> str:
    return ",".join(str(int(v)) for v in g)


@dataclass(frozen=True)
class Edge:
    source: int
    target: int
    op: str
    slot: int  # 0 or 1 within the target node
    stride: int = 1


@dataclass
class CellGraph:
    """Decoded cell: nodes 0-1 inputs, 2-5 intermediates, 6 output."""

    kind: str
    edges: list[Edge] = field(default_factory=list)

    @property
    def nodes(self) -> list[int]:
        return list(range(NUM_NODES + 3))

    @property
    def output(self) -> int:
        return NUM_NODES + 2

    def inbound(self, node: int) -> list[Edge]:
        return sorted((e for e in self.edges if e.target == node), key=lambda e: e.slot)

    def validate(self) -> list[str]:
        problems = []
        if self.kind not in CELL_KINDS:
            problems.append(f"unknown cell kind {self.kind!r}")
        for t in range(NUM_NODES):
            node = t + 2
            ins = self.inbound(node)
            if [e.slot for e in ins] != list(range(EDGES_PER_NODE)):
                problems.append(f"node {node}: inbound slots {[e.slot for e in ins]}")
            for e in ins:
                if not 0 <= e.source < node:
                    problems.append(f"node {node}: source {e.source} breaks acyclicity")
                if e.op not in OPS:
                    problems.append(f"node {node}: unknown op {e.op!r}")
        for e in self.edges:
            if not 2 <= e.target < self.output:
                problems.append(f"edge into non-intermediate node {e.target}")
        return problems


def decode(g: Sequence[int]) -> tuple[CellGraph, CellGraph]:
    g = check(g)
    cells = []
    for cell, kind in enumerate(CELL_KINDS):
        graph = CellGraph(kind)
        for t in range(NUM_NODES):
            for e in range(EDGES_PER_NODE):
                op = OPS[g[gene_position(cell, t, e, 0)]]
                src = g[gene_position(cell, t, e, 1)]
                stride = 2 if kind == "reduction" and src < 2 else 1
                graph.edges.append(Edge(src, t + 2, op, e, stride))
        cells.append(graph)
    return cells[0], cells[1]


def encode(cells: tuple[CellGraph, CellGraph]) -> Genome:
    genes = []
    for graph, kind in zip(cells, CELL_KINDS):
        problems = graph.validate()
        if graph.kind != kind:
            problems.append(f"expected {kind} cell, got {graph.kind}")
        if problems:
            raise GenomeError(problems)
        for t in range(NUM_NODES):
            for e in graph.inbound(t + 2):
                genes.extend([OPS.index(e.op), e.source])
    return check(genes)


def cell_segments(g: Sequence[int], cell: int = 0) -> list[list[tuple[int, int]]]:
    """Per-node ``[(op, source), (op, source)]`` view of one cell."""
    g = check(g)
    return [
        [(g[gene_position(cell, t, e, 0)], g[gene_position(cell, t, e, 1)]) for e in range(EDGES_PER_NODE)]
        for t in range(NUM_NODES)
    ]


def one_hot(g: Sequence[int]) -> np.ndarray:
    """Concatenated one-hot encoding, one block per gene."""
    g = check(g)
    out = np.zeros(sum(CARDINALITIES))
    offset = 0
    for value, card in zip(g, CARDINALITIES):
        out[offset + value] = 1.0
        offset += card
    return out


def used_edges(g: Sequence[int], cell: int) -> set[tuple[int, int]]:
    """(node, slot) pairs whose op is not 'none'."""
    g = check(g)
    return {
        (t, e)
        for t in range(NUM_NODES)
        for e in range(EDGES_PER_NODE)
        if g[gene_position(cell, t, e, 0)] != 0
    }
