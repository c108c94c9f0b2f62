"""Exact solution enumeration, uniform sampling, and the Bayes-optimal denoiser.

Everything here works from an explicit solution list and is exponential in
the worst case; it exists to test the diffusion machinery on small instances.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from satdiff.formula import CnfFormula, FactorGraph

DEFAULT_CAP = 100_000


def enumerate_solutions(formula: CnfFormula, cap: int = DEFAULT_CAP) -> tuple[list[np.ndarray], bool]:
    """All satisfying assignments in lexicographic order (False < True).

    Backtracking over variables 1..n with unit propagation. Returns
    ``(solutions, truncated)``; ``truncated`` is set iff ``cap`` was reached.
    """
    if cap < 1:
        raise ValueError("cap must be positive")
    n = formula.num_vars
    clauses = [list(c) for c in formula.clauses]
    occurs: list[list[int]] = [[] for _ in range(n + 1)]
    for ci, clause in enumerate(clauses):
        for lit in clause:
            occurs[abs(lit)].append(ci)

    # value[v]: 0 unassigned, +1 true, -1 false
    value = [0] * (n + 1)
    trail: list[int] = []
    solutions: list[np.ndarray] = []

    def lit_value(lit: int) -> int:
        v = value[abs(lit)]
        return v if lit > 0 else -v

    def assign(lit: int) -> bool:
        """Assign lit true and propagate; False on conflict."""
        queue = [lit]
        while queue:
            lit = queue.pop()
            cur = lit_value(lit)
            if cur == 1:
                continue
            if cur == -1:
                return False
            value[abs(lit)] = 1 if lit > 0 else -1
            trail.append(abs(lit))
            for ci in occurs[abs(lit)]:
                unassigned = None
                n_unassigned = 0
                satisfied = False
                for other in clauses[ci]:
                    ov = lit_value(other)
                    if ov == 1:
                        satisfied = True
                        break
                    if ov == 0:
                        n_unassigned += 1
                        unassigned = other
                if satisfied:
                    continue
                if n_unassigned == 0:
                    return False
                if n_unassigned == 1:
                    queue.append(unassigned)
        return True

    def undo(mark: int) -> None:
        while len(trail) > mark:
            value[trail.pop()] = 0

    def all_satisfied() -> bool:
        return all(any(lit_value(l) == 1 for l in c) for c in clauses)

    def emit_free(free: list[int]) -> bool:
        base = np.array([value[v] == 1 for v in range(1, n + 1)], dtype=bool)
        k = len(free)
        idx = np.array(free, dtype=np.int64) - 1
        for code in range(2 ** k):
            if len(solutions) >= cap:
                return False
            sol = base.copy()
            # first free variable is the most significant bit
            for j in range(k):
                sol[idx[j]] = (code >> (k - 1 - j)) & 1
            solutions.append(sol)
        return True

    def search(next_var: int) -> bool:
        while next_var <= n and value[next_var] != 0:
            next_var += 1
        if all_satisfied():
            return emit_free([v for v in range(next_var, n + 1) if value[v] == 0])
        if next_var > n:
            return True  # unreachable: a full assignment satisfies or conflicts
        for lit in (-next_var, next_var):
            mark = len(trail)
            if assign(lit) and not search(next_var + 1):
                undo(mark)
                return False
            undo(mark)
        return True

    # unit clauses at the root
    ok = True
    for clause in clauses:
        if len(clause) == 1 and not assign(clause[0]):
            ok = False
            break
    if ok:
        search(1)
    return solutions, len(solutions) >= cap


def brute_force_solutions(formula: CnfFormula) -> list[np.ndarray]:
    """Truth-table scan in lexicographic order; for cross-checking only."""
    n = formula.num_vars
    if n > 20:
        raise ValueError("truth-table scan limited to 20 variables")
    codes = np.arange(2 ** n, dtype=np.int64)
    table = ((codes[:, None] >> np.arange(n - 1, -1, -1)) & 1).astype(bool)
    ok = formula.graph.clause_satisfied(table).all(axis=1)
    return list(table[ok])


def sample_solution(solutions: Sequence[np.ndarray], rng: np.random.Generator) -> np.ndarray:
    if len(solutions) == 0:
        raise ValueError("cannot sample from an empty solution set")
    return np.asarray(solutions[int(rng.integers(len(solutions)))], dtype=bool).copy()


def exact_denoiser(solutions, x_t: np.ndarray, alpha_bar_t: float) -> np.ndarray:
    """Posterior marginals of x_0 given x_t under a uniform prior on solutions.

    ``x_t`` is one-hot with shape (..., n, 2); the result has the same shape.
    At ``alpha_bar_t == 1`` the likelihood is the limit, i.e. uniform over the
    solutions at minimum Hamming distance from x_t.
    """
    sols = np.asarray(solutions, dtype=bool)
    if sols.ndim != 2 or len(sols) == 0:
        raise ValueError("exact_denoiser needs a non-empty (count, n) solution array")
    if not 0.0 <= alpha_bar_t <= 1.0:
        raise ValueError(f"alpha_bar_t must lie in [0, 1], got {alpha_bar_t}")
    x = np.asarray(x_t, dtype=np.float64)
    n = sols.shape[1]
    if x.shape[-2:] != (n, 2):
        raise ValueError(f"x_t shape {x.shape} does not match {n} variables")
    bits = x[..., 1]
    s = sols.astype(np.float64)
    agree = bits @ s.T + (1.0 - bits) @ (1.0 - s).T
    if alpha_bar_t >= 1.0:
        logw = np.where(agree == agree.max(axis=-1, keepdims=True), 0.0, -np.inf)
    else:
        logw = agree * np.log((1.0 + alpha_bar_t) / 2.0) + (n - agree) * np.log((1.0 - alpha_bar_t) / 2.0)
    logw = logw - logw.max(axis=-1, keepdims=True)
    w = np.exp(logw)
    w /= w.sum(axis=-1, keepdims=True)
    p_true = w @ s
    return np.stack([1.0 - p_true, p_true], axis=-1)


class ExactDenoiser:
    """Denoiser callable backed by enumerated solutions.

    Holds one solution set per distinct instance; part ``p`` of the graph it
    is called on uses ``solution_sets[p % len(solution_sets)]``. Tiled copies
    of a single instance therefore need only one set.
    """

    def __init__(self, solution_sets):
        sets = [np.asarray(s, dtype=bool) for s in solution_sets]
        if not sets or any(s.ndim != 2 or len(s) == 0 for s in sets):
            raise ValueError("every instance needs a non-empty solution set")
        self.solution_sets = sets

    @classmethod
    def single(cls, solutions) -> ExactDenoiser:
        return cls([solutions])

    def __call__(self, graph: FactorGraph, x_t: np.ndarray, alpha_bar_t) -> np.ndarray:
        a = float(np.max(alpha_bar_t))
        out = np.empty(x_t.shape, dtype=np.float64)
        k = len(self.solution_sets)
        offsets = graph.var_offsets
        if graph.num_parts % k:
            raise ValueError(f"{graph.num_parts} parts cannot be matched to {k} solution sets")
        for j, sols in enumerate(self.solution_sets):
            parts = range(j, graph.num_parts, k)
            idx = np.concatenate([np.arange(offsets[p], offsets[p + 1]) for p in parts])
            block = x_t[idx].reshape(len(parts), -1, 2)
            out[idx] = exact_denoiser(sols, block, a).reshape(-1, 2)
        return out
