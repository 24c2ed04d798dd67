"""Tensor/tape engine tests: frozen oracle values, finite differences,
accumulation and determinism properties."""

import numpy as np
import pytest

import drvec.autodiff as ad
from drvec.autodiff import Tape, Tensor, backward, grad_check
from drvec.errors import ContractError, DimensionError


def _triple_loop_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 0.0], [0.0, 1.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(ad.matmul(a, b).data, b.data)

    def test_zero_annihilator(self):
        a = Tensor(np.zeros((2, 3)))
        b = Tensor(np.arange(6.0).reshape(3, 2))
        np.testing.assert_array_equal(ad.matmul(a, b).data, np.zeros((2, 2)))

    def test_against_triple_loop_oracle(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        expected = _triple_loop_matmul(a.data, b.data)
        np.testing.assert_array_equal(expected, [[19.0, 22.0], [43.0, 50.0]])
        np.testing.assert_allclose(ad.matmul(a, b).data, expected)

    def test_random_against_oracle(self):
        rng = np.random.default_rng(7)
        a = Tensor(rng.standard_normal((4, 5)))
        b = Tensor(rng.standard_normal((5, 3)))
        np.testing.assert_allclose(ad.matmul(a, b).data,
                                   _triple_loop_matmul(a.data, b.data), atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_gradients(self):
        rng = np.random.default_rng(3)
        a0 = rng.standard_normal((3, 4))
        b0 = rng.standard_normal((4, 2))
        b = Tensor(b0)
        err = grad_check(lambda a: ad.sum_all(ad.matmul(a, b)), Tensor(a0))
        assert err < 1e-6
        a = Tensor(a0)
        err = grad_check(lambda bb: ad.sum_all(ad.matmul(a, bb)), Tensor(b0))
        assert err < 1e-6


class TestActivation:
    def test_leaky_relu_negative_scaling(self):
        out = ad.leaky_relu(Tensor([-1.0]), alpha=0.2)
        np.testing.assert_allclose(out.data, [-0.2])

    def test_leaky_relu_identity_on_positives(self):
        out = ad.leaky_relu(Tensor([2.0]), alpha=0.2)
        np.testing.assert_allclose(out.data, [2.0])

    def test_tanh_at_zero(self):
        assert ad.tanh(Tensor([0.0])).data[0] == 0.0

    def test_leaky_relu_derivative_at_zero_is_alpha(self):
        x = Tensor([0.0], requires_grad=True)
        with Tape() as tape:
            y = ad.sum_all(ad.leaky_relu(x, alpha=0.2))
            backward(tape, y)
        np.testing.assert_allclose(x.grad, [0.2])

    @pytest.mark.parametrize("kind", ["tanh", "sigmoid", "softplus"])
    def test_smooth_gradients(self, kind):
        rng = np.random.default_rng(11)
        x = Tensor(rng.standard_normal(40))
        err = grad_check(lambda t: ad.sum_all(ad.activation(t, kind)), x)
        assert err < 1e-8

    def test_leaky_relu_gradient_off_zero(self):
        rng = np.random.default_rng(5)
        x0 = rng.standard_normal(50)
        x0 = x0[np.abs(x0) > 1e-2]  # finite differences straddle the kink otherwise
        err = grad_check(lambda t: ad.sum_all(ad.leaky_relu(t)), Tensor(x0))
        assert err < 1e-8

    def test_unknown_kind_rejected(self):
        with pytest.raises(ContractError):
            ad.activation(Tensor([1.0]), "swish")

    def test_sigmoid_extreme_inputs_finite(self):
        y = ad.sigmoid(Tensor([-800.0, 800.0]))
        assert np.all(np.isfinite(y.data))
        np.testing.assert_allclose(y.data, [0.0, 1.0], atol=1e-12)


class TestConcat:
    def test_definition_on_vectors(self):
        a = Tensor([1.0, 2.0])
        b = Tensor([3.0, 4.0, 5.0])
        out = ad.concat([a, b], axis=0)
        np.testing.assert_array_equal(out.data, [1.0, 2.0, 3.0, 4.0, 5.0])

    def test_single_input_identity(self):
        a = Tensor([[1.0, 2.0]])
        np.testing.assert_array_equal(ad.concat([a], axis=1).data, a.data)

    def test_mismatched_off_axis_dims(self):
        with pytest.raises(DimensionError):
            ad.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))], axis=0)

    def test_backward_splits_gradient(self):
        rng = np.random.default_rng(2)
        a0 = rng.standard_normal((2, 3))
        b0 = rng.standard_normal((4, 3))
        w = rng.standard_normal((6, 3))  # weights make per-segment grads distinct

        def f_a(a):
            return ad.sum_all(ad.mul(ad.concat([a, Tensor(b0)], axis=0), Tensor(w)))

        def f_b(b):
            return ad.sum_all(ad.mul(ad.concat([Tensor(a0), b], axis=0), Tensor(w)))

        assert grad_check(f_a, Tensor(a0)) < 1e-8
        assert grad_check(f_b, Tensor(b0)) < 1e-8


class TestReduce:
    def test_mean_arithmetic(self):
        assert ad.reduce(Tensor([1.0, 2.0, 3.0]), "mean").item() == 2.0

    def test_sum_of_zeros(self):
        assert ad.reduce(Tensor(np.zeros((3, 3))), "sum").item() == 0.0

    def test_axis_out_of_range(self):
        with pytest.raises(DimensionError):
            ad.reduce(Tensor(np.zeros((2, 2))), "sum", axis=2)

    def test_mean_backward_distributes_evenly(self):
        x = Tensor(np.array([1.0, 5.0, 9.0, 2.0]), requires_grad=True)
        with Tape() as tape:
            y = ad.reduce(x, "mean")
            backward(tape, y)
        np.testing.assert_allclose(x.grad, np.full(4, 0.25))

    def test_mean_gradient_finite_difference(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.standard_normal((3, 5)))
        w = Tensor(rng.standard_normal((3, 1)))
        err = grad_check(lambda t: ad.sum_all(ad.mul(ad.reduce(t, "mean", axis=1), w)), x)
        assert err < 1e-8


class TestShapeOps:
    def test_narrow_values_and_gradient(self):
        rng = np.random.default_rng(4)
        x0 = rng.standard_normal((3, 6))
        out = ad.narrow(Tensor(x0), axis=1, start=2, length=3)
        np.testing.assert_array_equal(out.data, x0[:, 2:5])
        assert grad_check(lambda t: ad.sum_all(ad.mul(ad.narrow(t, 1, 2, 3), 2.0)), Tensor(x0)) < 1e-8

    def test_gather_rows_with_repeats(self):
        x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        with Tape() as tape:
            y = ad.sum_all(ad.gather_rows(x, [0, 0, 2]))
            backward(tape, y)
        np.testing.assert_array_equal(x.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])

    def test_diag_part(self):
        x0 = np.arange(9.0).reshape(3, 3)
        np.testing.assert_array_equal(ad.diag_part(Tensor(x0)).data, [0.0, 4.0, 8.0])
        assert grad_check(lambda t: ad.sum_all(ad.diag_part(t)), Tensor(x0)) < 1e-10

    def test_reshape_round_trip_gradient(self):
        x0 = np.arange(12.0).reshape(3, 4)
        w = np.random.default_rng(0).standard_normal((2, 6))
        f = lambda t: ad.sum_all(ad.mul(ad.reshape(t, (2, 6)), Tensor(w)))
        assert grad_check(f, Tensor(x0)) < 1e-8


class TestBackward:
    def test_identity_root(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        with Tape() as tape:
            backward(tape, x)
        np.testing.assert_array_equal(x.grad, 1.0)

    def test_sum_of_squares_analytic(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = ad.sum_all(ad.mul(x, x))
            backward(tape, y)
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_non_scalar_root_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = ad.mul(x, x)
            with pytest.raises(ContractError):
                backward(tape, y)

    def test_composite_graph_finite_difference(self):
        rng = np.random.default_rng(12)
        w = Tensor(rng.standard_normal((4, 4)))

        def f(x):
            h = ad.tanh(ad.matmul(x, w))
            return ad.sum_all(ad.mul(h, h))

        assert grad_check(f, Tensor(rng.standard_normal((2, 4)))) < 1e-4

    def test_accumulation_matches_duplicated_variable(self):
        # y = x*x + 3x uses x three times; compare against the formulation
        # with independent copies u*v + 3w evaluated at u=v=w=x0.
        x0 = np.array([1.5, -0.5])
        x = Tensor(x0, requires_grad=True)
        with Tape() as tape:
            y = ad.sum_all(ad.add(ad.mul(x, x), ad.mul(x, 3.0)))
            backward(tape, y)
        u, v, w = (Tensor(x0, requires_grad=True) for _ in range(3))
        with Tape() as tape2:
            y2 = ad.sum_all(ad.add(ad.mul(u, v), ad.mul(w, 3.0)))
            backward(tape2, y2)
        np.testing.assert_allclose(x.grad, u.grad + v.grad + w.grad)

    def test_forward_and_gradient_determinism(self):
        def run():
            rng = np.random.default_rng(77)
            x = Tensor(rng.standard_normal((5, 5)), requires_grad=True)
            w = Tensor(rng.standard_normal((5, 5)), requires_grad=True)
            with Tape() as tape:
                y = ad.sum_all(ad.tanh(ad.matmul(x, w)))
                backward(tape, y)
            return y.item(), x.grad.copy(), w.grad.copy()

        y1, gx1, gw1 = run()
        y2, gx2, gw2 = run()
        assert y1 == y2
        np.testing.assert_array_equal(gx1, gx2)
        np.testing.assert_array_equal(gw1, gw2)

    def test_tape_topological_invariant(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            y = ad.mul(ad.add(x, 1.0), ad.exp(x))
            ad.sum_all(y)
        outs = [id(node.out) for node in tape.nodes]
        for k, node in enumerate(tape.nodes):
            for parent in node.parents:
                if id(parent) in outs:
                    assert outs.index(id(parent)) < k


class TestGradCheck:
    def test_linear_function_near_exact(self):
        x = Tensor(np.random.default_rng(1).standard_normal(10))
        assert grad_check(ad.sum_all, x) < 1e-10

    def test_sum_tanh(self):
        x = Tensor(np.random.default_rng(2).standard_normal(25))
        assert grad_check(lambda t: ad.sum_all(ad.tanh(t)), x) < 1e-7

    def test_detects_wrong_derivative(self, monkeypatch):
        monkeypatch.setitem(ad._ACTIVATION_GRADS, "tanh", lambda x, y: np.ones_like(y))
        x = Tensor(np.array([0.7, -1.3]))
        assert grad_check(lambda t: ad.sum_all(ad.tanh(t)), x) > 1e-2

    def test_max_coords_subsampling(self):
        x = Tensor(np.random.default_rng(3).standard_normal(100))
        full = grad_check(lambda t: ad.sum_all(ad.sigmoid(t)), x)
        sampled = grad_check(lambda t: ad.sum_all(ad.sigmoid(t)), x, max_coords=10)
        assert sampled <= full + 1e-12


class TestTensorInvariants:
    def test_values_is_flat_row_major(self):
        t = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(t.values, [1.0, 2.0, 3.0, 4.0])
        assert t.values.shape == (t.size,)

    def test_zero_dimension_rejected(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((0, 3)))

    def test_grad_matches_value_count(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        with Tape() as tape:
            backward(tape, ad.sum_all(x))
        assert x.grad.size == x.size

    def test_int_input_promoted_to_float(self):
        t = Tensor([[1, 2], [3, 4]])
        assert t.dtype == np.float64


class TestThreadConfinement:
    def test_distinct_tapes_on_distinct_threads(self):
        import threading

        results = {}

        def worker(name, scale):
            x = Tensor(np.full(4, scale), requires_grad=True)
            with Tape() as tape:
                y = ad.sum_all(ad.mul(x, x))
                for _ in range(200):  # widen the interleaving window
                    ad.tanh(x)
                backward(tape, y)
            results[name] = x.grad.copy()

        threads = [threading.Thread(target=worker, args=(f"t{i}", float(i + 1)))
                   for i in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for i in range(4):
            np.testing.assert_allclose(results[f"t{i}"], np.full(4, 2.0 * (i + 1)))
