import csv

import numpy as np
import pytest

from satdiff.evaluate import (
    TIMING_HEADER,
    ArgmaxSampler,
    DiffusionSampler,
    TimingCase,
    UniformSampler,
    agreement,
    eval_accuracy,
    eval_agreement,
    eval_timing,
    eval_uniqueness,
)
from satdiff.formula import CnfFormula
from satdiff.generators import gen_3sat
from satdiff.model import ModelConfig, init_model
from satdiff.oracle import enumerate_solutions

UNSAT = CnfFormula(1, ((1,), (-1,)))


def satisfiable(count, lo=5, hi=10, seed=0):
    out, i = [], 0
    while len(out) < count:
        f = gen_3sat(lo + i % (hi - lo + 1), "ratio:3", seed=seed + i)
        if enumerate_solutions(f, cap=1)[0]:
            out.append(f)
        i += 1
    return out


def constant_sampler(row):
    def sampler(formula, count, rng):
        return np.tile(np.asarray(row, dtype=bool), (count, 1))
    return sampler


class TestAccuracy:
    def test_oracle_solves_everything(self):
        summary = eval_accuracy(None, satisfiable(50), T=32, runs=2, oracle_cap=10_000)
        assert summary.mean == 100.0 and summary.std == 0.0

    def test_unsat_counts_unsolved(self):
        summary = eval_accuracy(None, [UNSAT, CnfFormula(1, ((1,),))], T=8, runs=3, oracle_cap=100)
        assert summary.values == [50.0, 50.0, 50.0]

    def test_unsat_with_model(self):
        model = init_model(ModelConfig(d=8, R=2))
        assert eval_accuracy(model, [UNSAT], T=4, runs=2).mean == 0.0

    def test_single_run_std_zero(self):
        model = init_model(ModelConfig(d=8, R=2))
        summary = eval_accuracy(model, satisfiable(5), T=4, runs=1)
        assert summary.std == 0.0 and len(summary.values) == 1

    def test_errors(self):
        with pytest.raises(ValueError):
            eval_accuracy(None, [], oracle_cap=10)
        with pytest.raises(ValueError):
            eval_accuracy(None, satisfiable(1), runs=0, oracle_cap=10)


class TestUniqueness:
    def test_identical_valid_samples(self):
        f = CnfFormula(2, ((1,),))
        assert eval_uniqueness(constant_sampler([True, False]), [f]).mean == 1.0

    def test_all_distinct(self):
        f = CnfFormula(7, ())
        rows = np.array([[(i >> b) & 1 for b in range(7)] for i in range(100)], dtype=bool)
        assert eval_uniqueness(lambda f, c, rng: rows[:c], [f]).mean == 100.0

    def test_invalid_filtered(self):
        f = CnfFormula(2, ((1,),))
        summary = eval_uniqueness(constant_sampler([False, False]), [f], samples_per_instance=10)
        assert summary.mean == 0.0 and summary.notes["invalid"] == [10]

    def test_deterministic_on_single_solution(self):
        f = CnfFormula(3, ((1,), (-2,), (3,)))
        summary = eval_uniqueness(UniformSampler(), [f])
        assert summary.mean == 1.0

    def test_birthday_expectation(self):
        f = CnfFormula(10, ((1, 2),))  # 768 solutions
        m, n = 768, 100
        expected = 100.0 * m * (1 - (1 - 1 / m) ** n) / n
        summary = eval_uniqueness(UniformSampler(), [f] * 20, samples_per_instance=n, seed=3)
        assert abs(summary.mean - expected) < 5

    def test_bad_count(self):
        with pytest.raises(ValueError):
            eval_uniqueness(UniformSampler(), [UNSAT], samples_per_instance=0)


class TestAgreement:
    def test_pairwise(self):
        assert agreement([1, 0, 1], [1, 0, 1]) == 100.0
        assert agreement([1, 0, 1], [0, 1, 0]) == 0.0
        assert agreement([1, 0, 1, 1], [1, 1, 1, 0]) == 50.0

    def test_identical_samples(self):
        f = CnfFormula(3, ())
        assert eval_agreement(constant_sampler([1, 0, 1]), [f]).mean == 100.0

    def test_complementary_samples(self):
        f = CnfFormula(4, ())

        def alternate(formula, count, rng):
            return np.array([[k % 2] * 4 for k in range(count)], dtype=bool)

        assert eval_agreement(alternate, [f]).mean == 0.0

    def test_random_assignments_near_half(self):
        fs = [CnfFormula(40, ()) for _ in range(30)]

        def coin(formula, count, rng):
            return rng.random((count, formula.num_vars)) < 0.5

        assert abs(eval_agreement(coin, fs).mean - 50.0) < 3

    def test_symmetric_and_relabeling(self):
        rng = np.random.default_rng(0)
        a, b = rng.random(30) < 0.5, rng.random(30) < 0.5
        perm = rng.permutation(30)
        assert agreement(a, b) == agreement(b, a) == agreement(a[perm], b[perm])

    def test_skips_instances_without_valid_samples(self):
        summary = eval_agreement(constant_sampler([False]), [CnfFormula(1, ((1,),)), CnfFormula(1, ())])
        assert summary.notes["skipped"] == [0] and summary.values == [100.0]


class TestTiming:
    def sweep(self, sizes):
        return [TimingCase("3sat", [gen_3sat(n, "ratio:3", seed=n + b) for b in range(4)]) for n in sizes]

    def test_csv_format(self, tmp_path):
        sampler = DiffusionSampler(init_model(ModelConfig(d=8, R=2)), T=4)
        rows = eval_timing(sampler.sample_many, self.sweep([5, 10, 20]), tmp_path / "t.csv", repeats=1)
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "family,n,m,batch,sec_per_sample"
        assert TIMING_HEADER == lines[0].split(",")
        parsed = list(csv.DictReader(lines))
        assert [int(r["n"]) for r in parsed] == [5, 10, 20]
        assert [int(r["m"]) for r in parsed] == [15, 30, 60]
        assert all(int(r["batch"]) == 4 and float(r["sec_per_sample"]) > 0 for r in parsed)
        assert len(rows) == 3

    def test_repeat_runs_within_factor_two(self, tmp_path):
        sampler = DiffusionSampler(init_model(ModelConfig(d=16, R=4)), T=8)
        sweep = self.sweep([40, 80])
        a = eval_timing(sampler.sample_many, sweep, tmp_path / "a.csv", repeats=3)
        b = eval_timing(sampler.sample_many, sweep, tmp_path / "b.csv", repeats=3)
        for ra, rb in zip(a, b):
            ratio = ra["sec_per_sample"] / rb["sec_per_sample"]
            assert 0.5 <= ratio <= 2.0

    def test_unwritable_path(self):
        with pytest.raises(OSError):
            eval_timing(UniformSampler().sample_many, self.sweep([5]), "/nonexistent/dir/t.csv", repeats=1)


class TestSamplers:
    def test_argmax_is_deterministic(self):
        model = init_model(ModelConfig(d=8, R=2))
        f = satisfiable(1)[0]
        rows = ArgmaxSampler(model, T=4)(f, 5, np.random.default_rng(0))
        assert len({r.tobytes() for r in rows}) == 1

    def test_oracle_diffusion_samples_valid(self):
        f = CnfFormula(2, ((1, 2),))
        rows = DiffusionSampler(T=32, oracle_cap=10)(f, 300, np.random.default_rng(1))
        assert rows.shape == (300, 2)
        assert f.graph.clause_satisfied(rows).all()
        assert len({r.tobytes() for r in rows}) == 3

    def test_needs_denoiser(self):
        with pytest.raises(ValueError):
            DiffusionSampler()
