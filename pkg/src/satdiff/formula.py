"""CNF formulas, DIMACS and solution-file I/O, evaluation, and factor graphs.

Variables are 1-indexed in DIMACS text and 0-indexed everywhere else.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class DimacsError(ValueError):
    """Malformed DIMACS or solution-file input."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


def _canonical_clause(clause: Iterable[int], num_vars: int) -> tuple[int, ...]:
    seen: dict[int, int] = {}
    out = []
    for lit in clause:
        lit = int(lit)
        if lit == 0:
            raise ValueError("literal 0 inside a clause")
        if abs(lit) > num_vars:
            raise ValueError(f"literal out of range: {lit} (num_vars={num_vars})")
        prev = seen.get(abs(lit))
        if prev is None:
            seen[abs(lit)] = lit
            out.append(lit)
        elif prev != lit:
            raise ValueError(f"tautological clause contains {abs(lit)} and -{abs(lit)}")
    if not out:
        raise ValueError("empty clause")
    return tuple(out)


@dataclass(frozen=True)
class CnfFormula:
    """A CNF formula over variables 1..num_vars.

    Clauses are canonicalized on construction: repeated literals are dropped
    (first occurrence kept), tautologies and empty clauses are rejected.
    Clause order is preserved.
    """

    num_vars: int
    clauses: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if int(self.num_vars) < 1:
            raise ValueError(f"num_vars must be positive, got {self.num_vars}")
        object.__setattr__(self, "num_vars", int(self.num_vars))
        object.__setattr__(
            self, "clauses", tuple(_canonical_clause(c, self.num_vars) for c in self.clauses)
        )

    @property
    def num_clauses(self) -> int:
        return len(self.clauses)

    @functools.cached_property
    def graph(self) -> FactorGraph:
        return build_factor_graph(self)

    def __repr__(self) -> str:
        return f"CnfFormula(num_vars={self.num_vars}, num_clauses={self.num_clauses})"


@dataclass(frozen=True, eq=False)
class FactorGraph:
    """Bipartite variable-clause graph; one edge per literal occurrence.

    Edges are stored as parallel arrays ordered by clause. ``var_offsets`` and
    ``clause_offsets`` delimit the component formulas of a merged graph
    (length parts + 1); a plain graph has a single part.
    """

    num_vars: int
    num_clauses: int
    var_index: np.ndarray
    clause_index: np.ndarray
    polarity: np.ndarray
    var_offsets: np.ndarray
    clause_offsets: np.ndarray

    @property
    def num_edges(self) -> int:
        return len(self.var_index)

    @property
    def num_parts(self) -> int:
        return len(self.var_offsets) - 1

    @property
    def edges(self) -> list[tuple[int, int, int]]:
        return list(zip(self.var_index.tolist(), self.clause_index.tolist(), self.polarity.tolist()))

    @functools.cached_property
    def clause_starts(self) -> np.ndarray:
        return np.searchsorted(self.clause_index, np.arange(self.num_clauses))

    def clause_satisfied(self, assignments: np.ndarray) -> np.ndarray:
        """Per-clause satisfaction for a (..., num_vars) boolean array."""
        a = np.asarray(assignments, dtype=bool)
        if a.shape[-1] != self.num_vars:
            raise ValueError(f"assignment length {a.shape[-1]} != num_vars {self.num_vars}")
        if self.num_clauses == 0:
            return np.ones(a.shape[:-1] + (0,), dtype=bool)
        lit_true = a[..., self.var_index] == (self.polarity > 0)
        return np.logical_or.reduceat(lit_true, self.clause_starts, axis=-1)

    def part_satisfied(self, assignments: np.ndarray) -> np.ndarray:
        """Whether each component formula is satisfied; shape (..., num_parts)."""
        sat = self.clause_satisfied(assignments)
        out = np.ones(sat.shape[:-1] + (self.num_parts,), dtype=bool)
        for p in range(self.num_parts):
            lo, hi = self.clause_offsets[p], self.clause_offsets[p + 1]
            if hi > lo:
                out[..., p] = sat[..., lo:hi].all(axis=-1)
        return out

    def split(self, values: np.ndarray) -> list[np.ndarray]:
        """Split a per-variable array (last axis) into its parts."""
        return [values[..., self.var_offsets[p]:self.var_offsets[p + 1]] for p in range(self.num_parts)]


def build_factor_graph(formula: CnfFormula) -> FactorGraph:
    lits = [lit for clause in formula.clauses for lit in clause]
    lengths = [len(c) for c in formula.clauses]
    lit_arr = np.asarray(lits, dtype=np.int64)
    return FactorGraph(
        num_vars=formula.num_vars,
        num_clauses=formula.num_clauses,
        var_index=np.abs(lit_arr) - 1,
        clause_index=np.repeat(np.arange(formula.num_clauses, dtype=np.int64), lengths),
        polarity=np.sign(lit_arr).astype(np.int8),
        var_offsets=np.array([0, formula.num_vars]),
        clause_offsets=np.array([0, formula.num_clauses]),
    )


def merge_graphs(graphs: Sequence[FactorGraph]) -> FactorGraph:
    """Block-diagonal union; every input graph becomes one part."""
    if not graphs:
        raise ValueError("nothing to merge")
    nv = np.array([g.num_vars for g in graphs])
    nc = np.array([g.num_clauses for g in graphs])
    v_off = np.concatenate([[0], np.cumsum(nv)])
    c_off = np.concatenate([[0], np.cumsum(nc)])
    return FactorGraph(
        num_vars=int(v_off[-1]),
        num_clauses=int(c_off[-1]),
        var_index=np.concatenate([g.var_index + v_off[i] for i, g in enumerate(graphs)]),
        clause_index=np.concatenate([g.clause_index + c_off[i] for i, g in enumerate(graphs)]),
        polarity=np.concatenate([g.polarity for g in graphs]),
        var_offsets=v_off,
        clause_offsets=c_off,
    )


def evaluate(formula: CnfFormula, a) -> tuple[bool, int]:
    """Return (satisfied, number of clauses with no true literal)."""
    values = np.asarray(a, dtype=bool)
    if values.shape != (formula.num_vars,):
        raise ValueError(
            f"assignment length {values.shape} does not match num_vars {formula.num_vars}"
        )
    unsat = int((~formula.graph.clause_satisfied(values)).sum())
    return unsat == 0, unsat


# --------------------------------------------------------------------------- DIMACS


def parse_dimacs(text: str) -> CnfFormula:
    header = None
    clauses: list[list[int]] = []
    current: list[int] = []
    current_line = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("c") or line.startswith("%"):
            continue
        if line.startswith("p"):
            if header is not None:
                raise DimacsError("duplicate header", lineno)
            parts = line.split()
            if len(parts) != 4 or parts[1] != "cnf":
                raise DimacsError(f"malformed header {line!r}", lineno)
            try:
                n, m = int(parts[2]), int(parts[3])
            except ValueError:
                raise DimacsError(f"malformed header {line!r}", lineno) from None
            if n < 1 or m < 0:
                raise DimacsError(f"malformed header {line!r}", lineno)
            header = (n, m)
            continue
        if header is None:
            raise DimacsError("missing 'p cnf' header before clauses", lineno)
        for tok in line.split():
            try:
                lit = int(tok)
            except ValueError:
                raise DimacsError(f"invalid literal {tok!r}", lineno) from None
            if lit == 0:
                if not current:
                    raise DimacsError("empty clause", lineno)
                try:
                    clauses.append(list(_canonical_clause(current, header[0])))
                except ValueError as exc:
                    raise DimacsError(str(exc), current_line) from None
                current = []
                continue
            if abs(lit) > header[0]:
                raise DimacsError(f"literal out of range: {lit}", lineno)
            if not current:
                current_line = lineno
            current.append(lit)
    if header is None:
        raise DimacsError("missing 'p cnf' header")
    if current:
        raise DimacsError("unterminated final clause", current_line)
    if len(clauses) != header[1]:
        raise DimacsError(f"header declares {header[1]} clauses, found {len(clauses)}")
    return CnfFormula(header[0], tuple(tuple(c) for c in clauses))


def write_dimacs(formula: CnfFormula) -> str:
    lines = [f"p cnf {formula.num_vars} {formula.num_clauses}"]
    lines.extend(" ".join(map(str, c)) + " 0" for c in formula.clauses)
    return "\n".join(lines) + "\n"


def read_dimacs(path) -> CnfFormula:
    with open(path) as fh:
        return parse_dimacs(fh.read())


# ------------------------------------------------------------------ solution files


def parse_solutions(text: str, num_vars: int | None = None) -> list[np.ndarray]:
    """Parse one solution per line (signed literals, 0-terminated)."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("c"):
            continue
        # tolerate solver-style "v" prefixes
        if line.startswith("v "):
            line = line[2:]
        try:
            lits = [int(tok) for tok in line.split()]
        except ValueError:
            raise DimacsError(f"invalid literal in {line!r}", lineno) from None
        if not lits or lits[-1] != 0:
            raise DimacsError("solution line not terminated by 0", lineno)
        lits = lits[:-1]
        n = num_vars if num_vars is not None else len(lits)
        values = np.zeros(n, dtype=bool)
        seen = np.zeros(n, dtype=bool)
        for lit in lits:
            if lit == 0 or abs(lit) > n:
                raise DimacsError(f"literal out of range: {lit}", lineno)
            if seen[abs(lit) - 1]:
                raise DimacsError(f"variable {abs(lit)} assigned twice", lineno)
            seen[abs(lit) - 1] = True
            values[abs(lit) - 1] = lit > 0
        if not seen.all():
            missing = int(np.flatnonzero(~seen)[0]) + 1
            raise DimacsError(f"solution does not assign variable {missing}", lineno)
        out.append(values)
    return out


def format_solution(a) -> str:
    values = np.asarray(a, dtype=bool)
    return " ".join(str(i + 1 if v else -(i + 1)) for i, v in enumerate(values)) + " 0"


def write_solutions(solutions: Iterable) -> str:
    return "".join(format_solution(s) + "\n" for s in solutions)
