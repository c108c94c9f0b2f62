"""Evaluation: accuracy, solution uniqueness, pairwise agreement, timing.

A *sampler* is any callable ``sampler(formula, count, rng) -> (count, n) bool
array``. Samples may be invalid; every metric filters them as documented.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from satdiff.diffusion import (
    Denoiser,
    argmax_assignment,
    make_schedule,
    one_hot,
    posterior,
    reverse_sample_batch,
)
from satdiff.formula import CnfFormula, merge_graphs
from satdiff.model import DenoiserModel, GnnDenoiser
from satdiff.oracle import DEFAULT_CAP, ExactDenoiser, enumerate_solutions

Sampler = Callable[[CnfFormula, int, np.random.Generator], np.ndarray]
TIMING_HEADER = ["family", "n", "m", "batch", "sec_per_sample"]


def as_denoiser(model) -> Denoiser:
    return GnnDenoiser(model) if isinstance(model, DenoiserModel) else model


def _chunks(formulas: Sequence[CnfFormula], max_vars: int) -> list[list[int]]:
    out: list[list[int]] = [[]]
    total = 0
    for i, f in enumerate(formulas):
        if out[-1] and total + f.num_vars > max_vars:
            out.append([])
            total = 0
        out[-1].append(i)
        total += f.num_vars
    return out


class SolutionCache:
    """Enumerated solutions keyed by formula."""

    def __init__(self, cap: int = DEFAULT_CAP):
        self.cap = cap
        self._store: dict[CnfFormula, np.ndarray] = {}

    def __call__(self, formula: CnfFormula) -> np.ndarray:
        if formula not in self._store:
            sols, _ = enumerate_solutions(formula, self.cap)
            self._store[formula] = np.array(sols, dtype=bool).reshape(-1, formula.num_vars)
        return self._store[formula]


# ------------------------------------------------------------------- samplers


class DiffusionSampler:
    """Reverse diffusion with a fixed denoiser, or the exact one per formula."""

    def __init__(self, denoiser=None, T: int = 32, max_vars: int = 4000,
                 oracle_cap: int | None = None):
        if denoiser is None and oracle_cap is None:
            raise ValueError("need a denoiser or an oracle cap")
        self.denoiser = as_denoiser(denoiser) if denoiser is not None else None
        self.schedule = make_schedule(T)
        self.max_vars = max_vars
        self.solutions = SolutionCache(oracle_cap) if oracle_cap is not None else None

    def _denoiser_for(self, formulas: Sequence[CnfFormula]) -> Denoiser:
        if self.solutions is None:
            return self.denoiser
        sets = [self.solutions(f) for f in formulas]
        if any(len(s) == 0 for s in sets):
            raise ValueError("oracle denoiser needs satisfiable formulas")
        return ExactDenoiser(sets)

    def traces(self, formulas: Sequence[CnfFormula], rng: np.random.Generator):
        """One trace per formula, batching formulas up to ``max_vars``."""
        out = [None] * len(formulas)
        for idx in _chunks(formulas, self.max_vars):
            chunk = [formulas[i] for i in idx]
            graph = merge_graphs([f.graph for f in chunk])
            for i, tr in zip(idx, reverse_sample_batch(graph, self._denoiser_for(chunk),
                                                       self.schedule, rng)):
                out[i] = tr
        return out

    def __call__(self, formula: CnfFormula, count: int, rng: np.random.Generator) -> np.ndarray:
        per_chunk = max(1, self.max_vars // formula.num_vars)
        samples = []
        remaining = count
        den = self._denoiser_for([formula])
        while remaining > 0:
            chains = min(per_chunk, remaining)
            traces = reverse_sample_batch(formula.graph, den, self.schedule, rng, chains=chains)
            samples.extend(tr.sample() for tr in traces)
            remaining -= chains
        return np.array(samples, dtype=bool).reshape(count, formula.num_vars)

    def sample_many(self, formulas: Sequence[CnfFormula], rng: np.random.Generator) -> list[np.ndarray]:
        return [tr.sample() for tr in self.traces(formulas, rng)]


class ArgmaxSampler:
    """Deterministic baseline: fixed all-False start, argmax instead of sampling."""

    def __init__(self, denoiser, T: int = 32):
        self.denoiser = as_denoiser(denoiser)
        self.schedule = make_schedule(T)

    def run(self, formula: CnfFormula) -> np.ndarray:
        s = self.schedule
        graph = formula.graph
        n = formula.num_vars
        x = one_hot(np.zeros(n, dtype=bool))
        pred = None
        for t in range(s.T, 0, -1):
            x0_hat = np.asarray(self.denoiser(graph, x, np.full(n, s.alpha_bar[t])))
            pred = argmax_assignment(x0_hat)
            x = one_hot(argmax_assignment(posterior(x, x0_hat, t, s)))
        return pred

    def __call__(self, formula: CnfFormula, count: int, rng: np.random.Generator) -> np.ndarray:
        return np.tile(self.run(formula), (count, 1))


class UniformSampler:
    """Uniform draws from the enumerated solution set (all valid)."""

    def __init__(self, cap: int = DEFAULT_CAP):
        self.solutions = SolutionCache(cap)

    def __call__(self, formula: CnfFormula, count: int, rng: np.random.Generator) -> np.ndarray:
        sols = self.solutions(formula)
        if len(sols) == 0:
            return np.zeros((0, formula.num_vars), dtype=bool)
        return sols[rng.integers(len(sols), size=count)]

    def sample_many(self, formulas: Sequence[CnfFormula], rng: np.random.Generator) -> list[np.ndarray]:
        return [self(f, 1, rng)[0] for f in formulas]


# -------------------------------------------------------------------- metrics


@dataclass
class Summary:
    mean: float
    std: float
    values: list[float] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def __str__(self) -> str:
        return f"{self.mean:.1f} ± {self.std:.1f}"


def eval_accuracy(model, instances: Sequence[CnfFormula], T: int = 32, runs: int = 5,
                  seed: int = 0, max_vars: int = 4000, oracle_cap: int | None = None) -> Summary:
    """Percent of instances solved at any diffusion step, mean and std over runs."""
    if not instances:
        raise ValueError("no instances to evaluate")
    if runs < 1:
        raise ValueError("runs must be >= 1")
    sampler = DiffusionSampler(model if oracle_cap is None else None, T, max_vars, oracle_cap)
    per_run = []
    for r in range(runs):
        rng = np.random.default_rng([seed, r])
        if oracle_cap is not None:
            # unsatisfiable instances cannot be denoised exactly; they count unsolved
            sat = [i for i, f in enumerate(instances) if len(sampler.solutions(f))]
            traces = sampler.traces([instances[i] for i in sat], rng) if sat else []
            solved = sum(tr.solved for tr in traces)
        else:
            solved = sum(tr.solved for tr in sampler.traces(instances, rng))
        per_run.append(100.0 * solved / len(instances))
    return Summary(float(np.mean(per_run)), float(np.std(per_run)), per_run)


def _valid_rows(formula: CnfFormula, samples: np.ndarray) -> np.ndarray:
    if len(samples) == 0:
        return samples
    return samples[formula.graph.clause_satisfied(samples).all(axis=-1)]


def eval_uniqueness(sampler: Sampler, instances: Sequence[CnfFormula],
                    samples_per_instance: int = 100, seed: int = 0) -> Summary:
    """100 * distinct valid samples / samples drawn, averaged over instances."""
    if samples_per_instance < 1:
        raise ValueError("samples_per_instance must be >= 1")
    values, invalid = [], []
    for i, f in enumerate(instances):
        rng = np.random.default_rng([seed, i])
        samples = np.asarray(sampler(f, samples_per_instance, rng), dtype=bool)
        valid = _valid_rows(f, samples)
        invalid.append(int(len(samples) - len(valid)))
        distinct = len({row.tobytes() for row in valid})
        values.append(100.0 * distinct / samples_per_instance)
    if not values:
        return Summary(0.0, 0.0, [], {"invalid": []})
    return Summary(float(np.mean(values)), float(np.std(values)), values, {"invalid": invalid})


def agreement(a, b) -> float:
    """Percent of variables equal between two assignments."""
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    return 100.0 * float(np.mean(a == b))


def eval_agreement(sampler: Sampler, instances: Sequence[CnfFormula], repetitions: int = 10,
                   retry_budget: int = 5, seed: int = 0) -> Summary:
    """Percent equal variables between pairs of valid samples.

    Each instance contributes the mean over ``repetitions`` pairs. Instances
    for which fewer than two valid samples appear within ``retry_budget``
    sampling rounds are skipped and listed in ``notes['skipped']``.
    """
    values, skipped = [], []
    need = 2 * repetitions
    for i, f in enumerate(instances):
        rng = np.random.default_rng([seed, i])
        valid = np.zeros((0, f.num_vars), dtype=bool)
        for _ in range(retry_budget):
            draw = np.asarray(sampler(f, need - len(valid), rng), dtype=bool)
            valid = np.concatenate([valid, _valid_rows(f, draw)])
            if len(valid) >= need:
                break
        pairs = len(valid) // 2
        if pairs == 0:
            skipped.append(i)
            continue
        values.append(float(np.mean([agreement(valid[2 * k], valid[2 * k + 1]) for k in range(pairs)])))
    if not values:
        return Summary(float("nan"), float("nan"), [], {"skipped": skipped})
    return Summary(float(np.mean(values)), float(np.std(values)), values, {"skipped": skipped})


@dataclass
class TimingCase:
    family: str
    formulas: list[CnfFormula]


def eval_timing(sample_many: Callable[[Sequence[CnfFormula], np.random.Generator], list],
                sweep: Sequence[TimingCase], path, repeats: int = 3, seed: int = 0) -> list[dict]:
    """Seconds per sample for batched sampling; writes a CSV and returns its rows.

    Each case is sampled as one batch; the best of ``repeats`` wall-clock
    times is divided by the batch size.
    """
    rows = []
    for case in sweep:
        if not case.formulas:
            raise ValueError(f"empty batch for {case.family}")
        best = float("inf")
        for r in range(repeats):
            rng = np.random.default_rng([seed, r])
            start = time.perf_counter()
            sample_many(case.formulas, rng)
            best = min(best, time.perf_counter() - start)
        rows.append({
            "family": case.family,
            "n": case.formulas[0].num_vars,
            "m": int(round(np.mean([f.num_clauses for f in case.formulas]))),
            "batch": len(case.formulas),
            "sec_per_sample": best / len(case.formulas),
        })
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TIMING_HEADER)
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "sec_per_sample": f"{row['sec_per_sample']:.6g}"})
    return rows


def write_summary_csv(path, rows: Sequence[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
