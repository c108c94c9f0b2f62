"""Categorical (multinomial) diffusion over boolean assignments.

A categorical state is a float array of shape (..., n, 2): column 0 is the
probability of False, column 1 of True. One-hot states are the same arrays
with entries in {0, 1}.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from satdiff.formula import CnfFormula, FactorGraph, merge_graphs

K = 2
EPS = 1e-8

Denoiser = Callable[[FactorGraph, np.ndarray, np.ndarray], np.ndarray]
"""(graph, x_t one-hot (N, 2), alpha_bar per variable (N,)) -> x0 estimate (N, 2)."""


def one_hot(assignment) -> np.ndarray:
    a = np.asarray(assignment, dtype=bool)
    return np.stack([~a, a], axis=-1).astype(np.float64)


def argmax_assignment(state: np.ndarray) -> np.ndarray:
    """Ties resolve to False."""
    return state[..., 1] > state[..., 0]


def check_state(state: np.ndarray, atol: float = 1e-9) -> None:
    s = np.asarray(state)
    if s.shape[-1] != K:
        raise ValueError(f"categorical state needs a last axis of {K}, got {s.shape}")
    if np.any(s < 0) or not np.allclose(s.sum(axis=-1), 1.0, atol=atol, rtol=0):
        raise ValueError("categorical state rows must be nonnegative and sum to 1")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Cumulative signal alpha_bar[t] = 1 - sqrt(t / T), t = 0..T.

    ``alpha`` and ``beta`` are stored with a leading 0-th entry so that
    ``alpha[t]`` is the step-t value for t = 1..T.
    """

    T: int
    alpha_bar: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray


def make_schedule(T: int) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    t = np.arange(T + 1, dtype=np.float64)
    alpha_bar = 1.0 - np.sqrt(t / T)
    alpha_bar[0], alpha_bar[T] = 1.0, 0.0
    alpha = np.empty(T + 1)
    alpha[0] = 1.0
    alpha[1:] = alpha_bar[1:] / alpha_bar[:-1]
    return NoiseSchedule(T, alpha_bar, alpha, 1.0 - alpha)


def q_probs(x0: np.ndarray, alpha_bar_t) -> np.ndarray:
    """Parameters of q(x_t | x_0); alpha_bar_t may be a scalar or per-variable."""
    a = np.asarray(alpha_bar_t, dtype=np.float64)
    if a.ndim:
        a = a[..., None]
    return a * x0 + (1.0 - a) / K


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one-hot samples from (..., 2) probabilities."""
    p_true = probs[..., 1] / probs.sum(axis=-1)
    return one_hot(rng.random(p_true.shape) < p_true)


def q_sample(x0: np.ndarray, alpha_bar_t, rng: np.random.Generator) -> np.ndarray:
    a = np.asarray(alpha_bar_t, dtype=np.float64)
    if np.any(a < 0) or np.any(a > 1):
        raise ValueError("alpha_bar_t must lie in [0, 1]")
    return sample_categorical(q_probs(x0, a), rng)


def posterior_terms(x_t: np.ndarray, t, s: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    """The x_t factor of the posterior and alpha_bar_{t-1}, per variable."""
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > s.T):
        raise ValueError(f"t must lie in 1..{s.T}")
    alpha_t = s.alpha[t]
    ab_prev = s.alpha_bar[t - 1]
    if t.ndim:
        alpha_t = alpha_t[..., None]
    likelihood = alpha_t * x_t + (1.0 - alpha_t) / K
    return likelihood, ab_prev


def posterior(x_t: np.ndarray, x0: np.ndarray, t, s: NoiseSchedule) -> np.ndarray:
    """theta_post(x_t, x_0) for scalar or per-variable t; x0 may be soft."""
    likelihood, ab_prev = posterior_terms(x_t, t, s)
    theta = likelihood * q_probs(x0, ab_prev)
    total = theta.sum(axis=-1, keepdims=True)
    # saturated soft x0 can underflow a whole row; clamp only those rows
    degenerate = total < EPS
    if np.any(degenerate):
        theta = np.where(degenerate, np.maximum(theta, EPS), theta)
        total = theta.sum(axis=-1, keepdims=True)
    return theta / total


def kl_categorical(p: np.ndarray, q: np.ndarray, reduction: str = "sum") -> float:
    """KL(p || q) summed over variables (or averaged with reduction='mean')."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    terms = p * (np.log(np.clip(p, EPS, 1.0)) - np.log(np.clip(q, EPS, 1.0)))
    per_var = terms.sum(axis=-1)
    if reduction == "sum":
        return float(per_var.sum())
    if reduction == "mean":
        return float(per_var.mean())
    raise ValueError(f"unknown reduction {reduction!r}")


# ------------------------------------------------------------ reverse process


@dataclass
class SampleTrace:
    """One reverse-diffusion run.

    ``predictions[k]`` is argmax of the x0 estimate at step ``steps[k]``;
    steps run T, T-1, ..., 1.
    """

    predictions: np.ndarray
    valid: np.ndarray
    T: int

    @property
    def steps(self) -> np.ndarray:
        return np.arange(self.T, 0, -1)

    @property
    def final(self) -> np.ndarray:
        return self.predictions[-1]

    @property
    def first_valid(self) -> int | None:
        hits = np.flatnonzero(self.valid)
        return int(self.T - hits[0]) if len(hits) else None

    @property
    def solved(self) -> bool:
        return bool(self.valid.any())

    def first_solution(self) -> np.ndarray | None:
        hits = np.flatnonzero(self.valid)
        return self.predictions[hits[0]] if len(hits) else None

    def sample(self) -> np.ndarray:
        """The latest valid prediction, or ``final`` if none was valid.

        This is the assignment a run reports: any valid step counts as a
        solution, and the latest one is the least noise-dominated.
        """
        hits = np.flatnonzero(self.valid)
        return self.predictions[hits[-1]] if len(hits) else self.final


def _as_graph(problem) -> FactorGraph:
    return problem.graph if isinstance(problem, CnfFormula) else problem


def reverse_sample_batch(problem, denoiser: Denoiser, s: NoiseSchedule,
                         rng: np.random.Generator, chains: int = 1) -> list[SampleTrace]:
    """Run ``chains`` independent reverse processes on every part of ``problem``.

    ``problem`` is a formula or a (possibly merged) factor graph. The graph is
    tiled ``chains`` times; traces are returned chain-major, i.e. trace
    ``c * parts + p`` is chain c of part p.
    """
    base = _as_graph(problem)
    if chains < 1:
        raise ValueError("chains must be >= 1")
    graph = base if chains == 1 else merge_graphs(
        [_part_graph(base, p) for _ in range(chains) for p in range(base.num_parts)]
    )
    n = graph.num_vars
    x = one_hot(rng.random(n) < 0.5)
    preds = np.empty((s.T, n), dtype=bool)
    for k, t in enumerate(range(s.T, 0, -1)):
        ab = np.full(n, s.alpha_bar[t])
        x0_hat = np.asarray(denoiser(graph, x, ab), dtype=np.float64)
        if x0_hat.shape != (n, K):
            raise ValueError(f"denoiser returned shape {x0_hat.shape}, expected {(n, K)}")
        preds[k] = argmax_assignment(x0_hat)
        if t > 1:
            x = sample_categorical(posterior(x, x0_hat, t, s), rng)
    valid = graph.part_satisfied(preds)  # (T, parts)
    return [
        SampleTrace(
            predictions=preds[:, graph.var_offsets[p]:graph.var_offsets[p + 1]].copy(),
            valid=valid[:, p].copy(),
            T=s.T,
        )
        for p in range(graph.num_parts)
    ]


def reverse_sample(problem, denoiser: Denoiser, s: NoiseSchedule,
                   rng: np.random.Generator) -> SampleTrace:
    graph = _as_graph(problem)
    if graph.num_parts != 1:
        raise ValueError("reverse_sample expects a single instance; use reverse_sample_batch")
    return reverse_sample_batch(graph, denoiser, s, rng)[0]


def _part_graph(graph: FactorGraph, p: int) -> FactorGraph:
    if graph.num_parts == 1:
        return graph
    vlo, vhi = graph.var_offsets[p], graph.var_offsets[p + 1]
    clo, chi = graph.clause_offsets[p], graph.clause_offsets[p + 1]
    elo, ehi = np.searchsorted(graph.clause_index, [clo, chi])
    return FactorGraph(
        num_vars=int(vhi - vlo),
        num_clauses=int(chi - clo),
        var_index=graph.var_index[elo:ehi] - vlo,
        clause_index=graph.clause_index[elo:ehi] - clo,
        polarity=graph.polarity[elo:ehi],
        var_offsets=np.array([0, vhi - vlo]),
        clause_offsets=np.array([0, chi - clo]),
    )
