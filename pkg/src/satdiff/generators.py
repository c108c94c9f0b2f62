"""Random 3-SAT and 3-Clique instance families."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from satdiff.formula import CnfFormula


def instance_rng(seed: int, index: int, *salt: int) -> np.random.Generator:
    """Independent stream for one instance of a dataset."""
    return np.random.default_rng([int(seed) & (2**64 - 1), int(index), *salt])


def threshold_clause_count(n: int) -> int:
    """Clause count at the 3-SAT satisfiability threshold, rounded half up."""
    if n < 3:
        raise ValueError(f"n must be >= 3, got {n}")
    raw = 4.258 * n + 58.26 * n ** (-2.0 / 3.0)
    return int(math.floor(raw + 0.5))


def gen_3sat(n: int, mode: str | float = "threshold", seed: int = 0) -> CnfFormula:
    """Random 3-SAT with distinct clauses.

    ``mode`` is ``"threshold"``, a clause/variable ratio as a number, or the
    string ``"ratio:R"``.
    """
    if n < 3:
        raise ValueError(f"n must be >= 3, got {n}")
    if mode == "threshold":
        m = threshold_clause_count(n)
    else:
        ratio = float(mode.split(":", 1)[1]) if isinstance(mode, str) else float(mode)
        m = int(math.floor(ratio * n + 0.5))
        if m < 1:
            raise ValueError(f"ratio {ratio} gives no clauses for n={n}")
    # 8 * C(n, 3) distinct clauses exist
    if m > 8 * math.comb(n, 3):
        raise ValueError(f"cannot draw {m} distinct 3-clauses over {n} variables")

    rng = np.random.default_rng(int(seed) & (2**64 - 1))
    seen: set[frozenset[int]] = set()
    clauses = []
    while len(clauses) < m:
        vs = rng.choice(n, size=3, replace=False) + 1
        signs = rng.integers(0, 2, size=3) * 2 - 1
        clause = tuple(int(v * s) for v, s in zip(vs, signs))
        key = frozenset(clause)
        if key in seen:
            continue
        seen.add(key)
        clauses.append(clause)
    return CnfFormula(n, tuple(clauses))


# --------------------------------------------------------------------- 3-Clique


@dataclass(frozen=True)
class GraphSpec:
    """Undirected simple graph on vertices 1..v."""

    v: int
    p: float
    edges: frozenset[tuple[int, int]]

    def __post_init__(self):
        norm = set()
        for a, b in self.edges:
            if a == b:
                raise ValueError(f"self-loop at {a}")
            if not (1 <= a <= self.v and 1 <= b <= self.v):
                raise ValueError(f"edge ({a}, {b}) outside 1..{self.v}")
            norm.add((min(a, b), max(a, b)))
        object.__setattr__(self, "edges", frozenset(norm))

    def adjacent(self, a: int, b: int) -> bool:
        return (min(a, b), max(a, b)) in self.edges

    def triangles(self) -> list[tuple[int, int, int]]:
        """Brute-force listing of triangles as sorted vertex triples."""
        return [
            t for t in itertools.combinations(range(1, self.v + 1), 3)
            if self.adjacent(t[0], t[1]) and self.adjacent(t[0], t[2]) and self.adjacent(t[1], t[2])
        ]


def clique_edge_probability(v: int) -> float:
    if v < 4:
        raise ValueError(f"v must be >= 4, got {v}")
    p = float(np.cbrt(3.0 / (v * (2 - 3 * v + v * v))))
    return min(p, 1.0)


def gen_er_graph(v: int, seed: int = 0, p: float | None = None) -> GraphSpec:
    if v < 4:
        raise ValueError(f"v must be >= 4, got {v}")
    if p is None:
        p = clique_edge_probability(v)
    rng = np.random.default_rng(int(seed) & (2**64 - 1))
    pairs = list(itertools.combinations(range(1, v + 1), 2))
    keep = rng.random(len(pairs)) < p
    return GraphSpec(v, p, frozenset(pr for pr, k in zip(pairs, keep) if k))


@dataclass(frozen=True)
class CliqueEncodingMap:
    """Slot/vertex to variable table: slot i in 1..3, vertex u in 1..v."""

    v: int

    def var(self, slot: int, vertex: int) -> int:
        if not (1 <= slot <= 3 and 1 <= vertex <= self.v):
            raise ValueError(f"no variable for slot {slot}, vertex {vertex}")
        return (slot - 1) * self.v + vertex

    def slot_vertex(self, var: int) -> tuple[int, int]:
        if not 1 <= var <= 3 * self.v:
            raise ValueError(f"variable {var} outside 1..{3 * self.v}")
        return (var - 1) // self.v + 1, (var - 1) % self.v + 1


def encode_3clique(g: GraphSpec) -> tuple[CnfFormula, CliqueEncodingMap]:
    """Slot encoding: each satisfying assignment is one ordered triangle."""
    enc = CliqueEncodingMap(g.v)
    vs = range(1, g.v + 1)
    clauses = []
    for i in (1, 2, 3):
        clauses.append(tuple(enc.var(i, u) for u in vs))
    for i in (1, 2, 3):
        for u, w in itertools.combinations(vs, 2):
            clauses.append((-enc.var(i, u), -enc.var(i, w)))
    for i, j in itertools.combinations((1, 2, 3), 2):
        for u in vs:
            for w in vs:
                if u == w or not g.adjacent(u, w):
                    clauses.append((-enc.var(i, u), -enc.var(j, w)))
    return CnfFormula(3 * g.v, tuple(clauses)), enc


def decode_clique(enc: CliqueEncodingMap, a) -> tuple[int, int, int]:
    values = np.asarray(a, dtype=bool)
    if values.shape != (3 * enc.v,):
        raise ValueError(f"assignment length {values.shape} != {3 * enc.v}")
    triple = []
    for i in (1, 2, 3):
        chosen = np.flatnonzero(values[(i - 1) * enc.v:i * enc.v]) + 1
        if len(chosen) != 1:
            raise ValueError(f"slot {i} has {len(chosen)} true vertices, expected exactly 1")
        triple.append(int(chosen[0]))
    return tuple(triple)
