import numpy as np
import pytest

from satdiff import autodiff as ad


def param64(rng, *shape, low=-1.0, high=1.0):
    t = ad.parameter(rng.uniform(low, high, size=shape))
    t.data = t.data.astype(np.float64)
    return t


def check(build, params, tol=1e-5):
    report = ad.check_gradients(build, params, tolerance=tol, h=1e-6)
    assert report.passed, report


class TestOps:
    def test_forward_values(self):
        a = ad.constant([[1.0, 2.0]])
        b = ad.constant([[3.0, 5.0]])
        np.testing.assert_allclose((a + b).data, [[4, 7]])
        np.testing.assert_allclose((a - b).data, [[-2, -3]])
        np.testing.assert_allclose((a * b).data, [[3, 10]])
        np.testing.assert_allclose(ad.matmul(a, ad.constant([[1.0], [1.0]])).data, [[3]])
        np.testing.assert_allclose(ad.concat([a, b]).data, [[1, 2, 3, 5]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.add(ad.constant(np.ones((2, 2))), ad.constant(np.ones((2, 3))))

    def test_segment_sum_values(self):
        v = ad.constant([[1.0], [2.0], [4.0]])
        np.testing.assert_allclose(ad.segment_sum(v, [2, 0, 2], 3).data, [[2], [0], [5]])

    def test_segment_prod_values(self):
        v = ad.constant([[2.0], [3.0], [0.0], [5.0]])
        np.testing.assert_allclose(ad.segment_prod(v, [0, 0, 1, 1], 2).data, [[6], [0]])

    def test_segment_prod_needs_contiguous(self):
        with pytest.raises(ValueError):
            ad.segment_prod(ad.constant(np.ones((3, 1))), [0, 1, 0], 2)

    def test_segment_id_range(self):
        with pytest.raises(IndexError):
            ad.Segments([0, 3], 3)

    def test_gather_values(self):
        x = ad.constant([[1.0], [2.0], [3.0]])
        np.testing.assert_allclose(ad.gather(x, [2, 2, 0]).data, [[3], [3], [1]])

    def test_softmax_rows(self):
        y = ad.softmax(ad.constant([[1000.0, 1000.0], [0.0, np.log(3.0)]]))
        np.testing.assert_allclose(y.data, [[0.5, 0.5], [0.25, 0.75]], rtol=1e-6)

    def test_layer_norm_stats(self):
        rng = np.random.default_rng(0)
        y = ad.layer_norm(ad.constant(rng.normal(3, 2, size=(5, 16))))
        np.testing.assert_allclose(y.data.mean(axis=-1), 0, atol=1e-5)
        np.testing.assert_allclose(y.data.var(axis=-1), 1, atol=1e-3)

    def test_kl_div_value(self):
        q = ad.constant([[0.5, 0.5]])
        assert ad.kl_div(np.array([[1.0, 0.0]]), q).item() == pytest.approx(np.log(2), rel=1e-6)


class TestGradients:
    def setup_method(self):
        self.rng = np.random.default_rng(1)

    def test_elementwise(self):
        a, b = param64(self.rng, 3, 4), param64(self.rng, 3, 4)
        check(lambda: ad.sum_all(ad.mul(ad.tanh(ad.sub(a, b)), ad.sigmoid(ad.add(a, b)))), {"a": a, "b": b})

    def test_relu_scale(self):
        a = param64(self.rng, 4, 3)
        a.data[np.abs(a.data) < 0.05] = 0.3  # keep away from the kink
        check(lambda: ad.mean(ad.scale(ad.relu(a), 2.5)), {"a": a})

    def test_matmul_add_row(self):
        x, w, b = param64(self.rng, 5, 3), param64(self.rng, 3, 2), param64(self.rng, 2)
        check(lambda: ad.sum_all(ad.tanh(ad.add_row(ad.matmul(x, w), b))), {"x": x, "w": w, "b": b})

    def test_concat_reshape(self):
        a, b = param64(self.rng, 2, 3), param64(self.rng, 2, 1)
        weights = ad.constant(self.rng.normal(size=(4, 2)), np.float64)
        check(lambda: ad.sum_all(ad.mul(ad.reshape(ad.concat([a, b]), (4, 2)), weights)), {"a": a, "b": b})

    def test_gather_segment_sum(self):
        x = param64(self.rng, 4, 3)
        seg = ad.Segments([0, 3, 3, 1, 0], 4)
        w = ad.constant(self.rng.normal(size=(3, 3)), np.float64)
        check(lambda: ad.sum_all(ad.tanh(ad.segment_sum(ad.gather(x, seg), [2, 0, 2, 1, 1], 3) @ w)),
              {"x": x})

    def test_segment_prod(self):
        x = param64(self.rng, 6, 2, low=0.1, high=1.0)
        check(lambda: ad.sum_all(ad.tanh(ad.segment_prod(x, [0, 0, 0, 1, 2, 2], 3))), {"x": x})

    def test_segment_prod_with_zeros(self):
        x = ad.parameter(np.array([[0.0], [2.0], [0.0], [0.0], [3.0]]))
        y = ad.segment_prod(x, [0, 0, 1, 1, 2], 3)
        g = ad.backward(ad.sum_all(y), [x])[0]
        # one zero: gradient at the zero is the product of the rest; two zeros: all zero
        np.testing.assert_allclose(g[:, 0], [2.0, 0.0, 0.0, 0.0, 1.0])

    def test_softmax_normalize(self):
        x = param64(self.rng, 3, 4)
        y = param64(self.rng, 3, 2, low=0.2, high=1.0)
        w = ad.constant(self.rng.normal(size=(3, 4)), np.float64)
        v = ad.constant(self.rng.normal(size=(3, 2)), np.float64)
        check(lambda: ad.add(ad.sum_all(ad.mul(ad.softmax(x), w)), ad.sum_all(ad.mul(ad.normalize_rows(y), v))),
              {"x": x, "y": y})

    def test_layer_norm(self):
        x, g, b = param64(self.rng, 4, 6), param64(self.rng, 6), param64(self.rng, 6)
        w = ad.constant(self.rng.normal(size=(4, 6)), np.float64)
        check(lambda: ad.sum_all(ad.mul(ad.layer_norm(x, g, b), w)), {"x": x, "g": g, "b": b})

    def test_kl_div(self):
        x = param64(self.rng, 5, 2)
        p = self.rng.dirichlet([1, 1], size=5)
        check(lambda: ad.kl_div(p, ad.softmax(x)), {"x": x})

    def test_shared_subexpression(self):
        x = param64(self.rng, 3)
        check(lambda: ad.sum_all(ad.mul(x, x)), {"x": x})
        x.grad = None
        g = ad.backward(ad.sum_all(ad.mul(x, x)), [x])[0]
        np.testing.assert_allclose(g, 2 * x.data)


class TestBackward:
    def test_non_scalar_rejected(self):
        x = ad.parameter(np.ones(3))
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(ad.tanh(x))

    def test_unused_parameter_gets_zeros(self):
        x, y = ad.parameter(np.ones(3)), ad.parameter(np.ones(2))
        grads = ad.backward(ad.sum_all(x), {"x": x, "y": y})
        np.testing.assert_array_equal(grads["y"], np.zeros(2))
        np.testing.assert_array_equal(grads["x"], np.ones(3))

    def test_gradients_accumulate_until_zeroed(self):
        x = ad.parameter(np.ones(2))
        ad.backward(ad.sum_all(x))
        ad.backward(ad.sum_all(x))
        np.testing.assert_array_equal(x.grad, [2, 2])
        ad.zero_grad([x])
        assert x.grad is None

    def test_no_grad(self):
        x = ad.parameter(np.ones(2))
        with ad.no_grad():
            y = ad.sum_all(ad.mul(x, x))
        assert not y.requires_grad and y.parents == ()

    def test_float32_preserved(self):
        x = ad.parameter(np.ones((2, 2)))
        y = ad.layer_norm(ad.matmul(x, x))
        assert x.dtype == np.float32 and y.dtype == np.float32

    def test_deep_chain_no_recursion_limit(self):
        x = ad.parameter(np.ones(1))
        y = x
        for _ in range(5000):
            y = ad.scale(y, 1.0)
        g = ad.backward(ad.sum_all(y), [x])[0]
        np.testing.assert_allclose(g, [1.0])


class TestGradCheck:
    def test_detects_wrong_gradient(self):
        x = param64(np.random.default_rng(0), 3)

        def bad_square(t):
            def back(g):
                ad._accumulate(t, g * t.data)  # missing factor 2
            return ad._node(t.data ** 2, (t,), back, "bad")

        report = ad.check_gradients(lambda: ad.sum_all(bad_square(x)), {"x": x})
        assert not report.passed
        assert report.worst_param == "x"

    def test_restores_parameters(self):
        x = ad.parameter(np.array([0.5, -0.25]))
        before = x.data.copy()
        ad.check_gradients(lambda: ad.sum_all(ad.tanh(x)), {"x": x})
        assert x.dtype == np.float32
        np.testing.assert_array_equal(x.data, before)

    def test_size_limit(self):
        x = ad.parameter(np.zeros(20))
        with pytest.raises(ValueError, match="exceed"):
            ad.check_gradients(lambda: ad.sum_all(x), {"x": x}, max_params=10)
