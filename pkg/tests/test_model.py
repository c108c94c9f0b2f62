import numpy as np
import pytest

from satdiff import autodiff as ad
from satdiff.diffusion import make_schedule, one_hot, q_sample
from satdiff.formula import CnfFormula
from satdiff.generators import gen_3sat
from satdiff.model import (
    CheckpointError,
    GnnDenoiser,
    ModelConfig,
    clause_unsat,
    forward,
    init_model,
    load_checkpoint,
    parameter_shapes,
    save_checkpoint,
)
from satdiff.train import batch_loss, make_batch, TrainExample
from satdiff.oracle import enumerate_solutions

# counted once from parameter_shapes and frozen
PARAMS_D64 = 51014
PARAMS_D32 = 13222
INIT_ENTROPY = 0.5819


def random_input(f, seed=0, alpha_bar=0.5):
    rng = np.random.default_rng(seed)
    return one_hot(rng.random(f.num_vars) < 0.5), np.full(f.num_vars, alpha_bar)


class TestInit:
    def test_output_head_shape(self):
        m = init_model(ModelConfig(d=64))
        assert m["out.W"].shape == (64, 2)

    def test_deterministic(self):
        a, b = init_model(ModelConfig(d=16, seed=3)), init_model(ModelConfig(d=16, seed=3))
        for name in a.params:
            np.testing.assert_array_equal(a[name].data, b[name].data)
        c = init_model(ModelConfig(d=16, seed=4))
        assert not np.array_equal(a["out.W"].data, c["out.W"].data)

    def test_parameter_count_frozen(self):
        assert init_model(ModelConfig()).num_parameters == PARAMS_D64
        assert init_model(ModelConfig(d=32)).num_parameters == PARAMS_D32

    def test_glorot_bounds_and_zero_biases(self):
        m = init_model(ModelConfig(d=16))
        for name, shape in parameter_shapes(m.config).items():
            data = m[name].data
            assert data.dtype == np.float32
            if len(shape) == 2:
                assert np.abs(data).max() <= np.sqrt(6.0 / sum(shape))
            elif name.endswith("norm.g"):
                np.testing.assert_array_equal(data, 1.0)
            else:
                np.testing.assert_array_equal(data, 0.0)

    @pytest.mark.parametrize("kwargs", [{"d": 3}, {"d": 0}, {"R": 0}, {"queries": 0}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            ModelConfig(**kwargs)


class TestForward:
    def setup_method(self):
        self.model = init_model(ModelConfig(d=16, R=4, seed=1))
        self.formula = gen_3sat(12, "threshold", seed=2)

    def test_rows_sum_to_one(self):
        x, ab = random_input(self.formula)
        out = forward(self.model, self.formula.graph, x, ab).data
        assert out.shape == (12, 2)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="does not match"):
            forward(self.model, self.formula.graph, one_hot(np.zeros(5, dtype=bool)), 0.5)

    def test_clause_permutation_invariance(self):
        rng = np.random.default_rng(0)
        x, ab = random_input(self.formula)
        base = forward(self.model, self.formula.graph, x, ab).data
        for _ in range(3):
            perm = rng.permutation(self.formula.num_clauses)
            g = CnfFormula(12, tuple(self.formula.clauses[i] for i in perm))
            out = forward(self.model, g.graph, x, ab).data
            np.testing.assert_allclose(out, base, atol=1e-5, rtol=0)

    def test_variable_relabeling_equivariance(self):
        rng = np.random.default_rng(1)
        x, ab = random_input(self.formula)
        base = forward(self.model, self.formula.graph, x, ab).data
        perm = rng.permutation(12)  # old variable i becomes perm[i]
        clauses = tuple(tuple(int(np.sign(l)) * (int(perm[abs(l) - 1]) + 1) for l in c)
                        for c in self.formula.clauses)
        g = CnfFormula(12, clauses)
        x_perm = np.empty_like(x)
        x_perm[perm] = x
        out = forward(self.model, g.graph, x_perm, ab).data
        np.testing.assert_allclose(out[perm], base, atol=1e-5, rtol=0)

    def test_untrained_entropy_near_ln2(self):
        model = init_model(ModelConfig(seed=0))
        entropies = []
        for seed in range(5):
            f = gen_3sat(20, "ratio:3", seed=seed)
            x, ab = random_input(f, seed, alpha_bar=0.3)
            p = forward(model, f.graph, x, ab).data.astype(np.float64)
            entropies.append(-(p * np.log(p)).sum(axis=-1).mean())
        # measured once at init and frozen; the maximum is ln 2
        assert np.mean(entropies) == pytest.approx(INIT_ENTROPY, abs=1e-3)
        assert 0.8 * np.log(2) < np.mean(entropies) <= np.log(2)

    def test_denoiser_adapter(self):
        x, ab = random_input(self.formula)
        den = GnnDenoiser(self.model)
        out = den(self.formula.graph, x, ab)
        assert out.dtype == np.float64
        np.testing.assert_allclose(out, forward(self.model, self.formula.graph, x, ab).data, atol=1e-7)

    def test_gradients_end_to_end(self):
        f = CnfFormula(5, ((1, -2, 3), (-1, 4), (2, -5), (-3, -4, 5), (1, 5), (-2, 3, -4), (4, -5), (-1, 2)))
        model = init_model(ModelConfig(d=4, R=2, queries=2, seed=0))
        sol = enumerate_solutions(f, cap=1)[0][0]
        batch = make_batch([TrainExample(f, sol)], make_schedule(8), np.random.default_rng(0), t=[5])
        report = ad.check_gradients(lambda: batch_loss(batch, model, make_schedule(8)), model.params)
        assert report.passed, report


class TestUnsat:
    def test_range_and_zero_at_satisfying_literal(self):
        f = CnfFormula(3, ((1, -2), (2, 3), (-1, -3)))
        model = init_model(ModelConfig(d=4, queries=1))
        q = np.array([[1.0], [1.0], [0.5]])
        u = clause_unsat(model, f.graph, q)
        np.testing.assert_allclose(u[:, 0], [0.0, 0.0, 0.5])
        q = np.array([[0.0], [1.0], [0.25]])
        np.testing.assert_allclose(clause_unsat(model, f.graph, q)[:, 0], [1.0, 0.0, 0.0])
        q = np.random.default_rng(0).random((3, 1))
        u = clause_unsat(model, f.graph, q)
        assert np.all((u >= 0) & (u <= 1))
        np.testing.assert_allclose(u[0, 0], (1 - q[0, 0]) * q[1, 0])


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        model = init_model(ModelConfig(d=8, R=3, seed=7))
        model.T, model.step = 32, 123
        path = tmp_path / "m.dsat"
        save_checkpoint(model, path)
        back = load_checkpoint(path)
        assert back.config.d == 8 and back.config.R == 3 and back.T == 32 and back.step == 123
        for name in model.params:
            assert back[name].data.tobytes() == model[name].data.tobytes()

    def test_extra_records(self, tmp_path):
        model = init_model(ModelConfig(d=4, R=1))
        path = tmp_path / "m.dsat"
        save_checkpoint(model, path, extra={"opt.m.out.b": np.array([1.0, 2.0])})
        np.testing.assert_array_equal(load_checkpoint(path).extra["opt.m.out.b"], [1.0, 2.0])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.dsat"
        save_checkpoint(init_model(ModelConfig(d=4, R=1)), path)
        data = bytearray(path.read_bytes())
        data[0:4] = b"XXXX"
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "m.dsat"
        save_checkpoint(init_model(ModelConfig(d=4, R=1)), path)
        data = bytearray(path.read_bytes())
        data[4] = 99
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.dsat"
        save_checkpoint(init_model(ModelConfig(d=4, R=1)), path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_shape_mismatch_names_tensor(self, tmp_path):
        path = tmp_path / "m.dsat"
        save_checkpoint(init_model(ModelConfig(d=64, R=1)), path)
        with pytest.raises(CheckpointError, match="noise.W"):
            load_checkpoint(path, ModelConfig(d=128, R=1))
