import numpy as np
import pytest

from ingrain import autodiff as ad
from gradcheck import check_op, numeric_grad, rel_err

TOL = 1e-4


def random_shapes(seed, n=10, lo=1, hi=6):
    rng = np.random.default_rng(seed)
    return [tuple(int(v) for v in rng.integers(lo, hi, size=2)) for _ in range(n)]


ELEMENTWISE = {
    "sigmoid": ad.sigmoid,
    "tanh": ad.tanh,
    "transpose": ad.transpose,
    "row_norms": ad.row_norms,
    "row_sq_norms": ad.row_sq_norms,
    "sum_all": ad.sum_all,
    "mean_all": ad.mean_all,
    "scale": lambda a: ad.scale(a, -1.7),
    "softmax_rows": ad.softmax_rows,
}


class TestFiniteDifferences:
    @pytest.mark.parametrize("name", sorted(ELEMENTWISE))
    def test_unary_ops(self, name):
        rng = np.random.default_rng(1)
        for shape in random_shapes(2):
            x = rng.normal(size=shape)
            assert check_op(ELEMENTWISE[name], [x]) < TOL, (name, shape)

    def test_relu_and_absolute_away_from_kink(self):
        rng = np.random.default_rng(3)
        for shape in random_shapes(4):
            x = rng.normal(size=shape)
            x = np.where(np.abs(x) < 0.05, 0.5, x)
            assert check_op(ad.relu, [x]) < TOL
            assert check_op(ad.absolute, [x]) < TOL

    def test_matmul(self):
        rng = np.random.default_rng(5)
        for (m, k), n in zip(random_shapes(6), rng.integers(1, 6, size=10)):
            a, b = rng.normal(size=(m, k)), rng.normal(size=(k, int(n)))
            assert check_op(ad.matmul, [a, b]) < TOL

    @pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul])
    def test_binary_same_shape_and_row_broadcast(self, op):
        rng = np.random.default_rng(7)
        for shape in random_shapes(8):
            a, b = rng.normal(size=shape), rng.normal(size=shape)
            assert check_op(op, [a, b]) < TOL
            row = rng.normal(size=(1, shape[1]))
            assert check_op(op, [a, row]) < TOL

    def test_structural(self):
        rng = np.random.default_rng(9)
        for r, c in random_shapes(10, lo=2):
            a, b = rng.normal(size=(r, c)), rng.normal(size=(r, c + 1))
            assert check_op(lambda x, y: ad.concat_cols([x, y]), [a, b]) < TOL
            d = rng.normal(size=(r + 2, c))
            assert check_op(lambda x, y: ad.concat_rows([x, y]), [a, d]) < TOL
            assert check_op(lambda x: ad.slice_rows(x, 1, r), [a]) < TOL
            assert check_op(lambda x: ad.slice_cols(x, 0, c - 1), [a]) < TOL
            idx = rng.integers(0, r, size=r + 3)
            assert check_op(lambda x: ad.gather_rows(x, idx), [a]) < TOL

    def test_masked_softmax(self):
        rng = np.random.default_rng(11)
        for r, c in random_shapes(12, lo=2):
            allowed = rng.random((r, c)) < 0.6
            allowed[np.arange(r), rng.integers(0, c, size=r)] = True
            x = rng.normal(size=(r, c))
            assert check_op(lambda a: ad.softmax_rows(a, allowed), [x]) < TOL

    def test_layer_norm(self):
        rng = np.random.default_rng(13)
        for r, c in random_shapes(14, lo=2):
            x = rng.normal(size=(r, c))
            gain, bias = rng.normal(size=(1, c)), rng.normal(size=(1, c))
            assert check_op(ad.layer_norm, [x, gain, bias]) < TOL


class TestForwardValues:
    def test_matmul_gradient_example(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        tape = ad.Tape()
        A = tape.leaf(a)
        g = tape.backward(ad.sum_all(ad.matmul(A, ad.const(b)))).of(A)
        np.testing.assert_allclose(g, np.ones((3, 2)) @ b.T, rtol=1e-12)

    def test_softmax_rows_sum_to_one_and_large_inputs(self):
        x = np.array([[1000.0, 1000.0, -1000.0], [0.0, 1.0, 2.0]])
        out = ad.softmax_rows(ad.const(x)).value
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(out[0], [0.5, 0.5, 0.0], atol=1e-12)

    def test_masked_entries_get_exactly_zero(self):
        x = np.random.default_rng(1).normal(size=(3, 4))
        allowed = np.array([[1, 1, 0, 0], [0, 0, 1, 1], [1, 0, 0, 0]], dtype=bool)
        out = ad.softmax_rows(ad.const(x), allowed).value
        assert np.all(out[~allowed] == 0.0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
        assert out[2, 0] == 1.0

    def test_sigmoid_extremes_are_finite(self):
        out = ad.sigmoid(ad.const([[-800.0, 0.0, 800.0]])).value
        np.testing.assert_array_equal(out, [[0.0, 0.5, 1.0]])

    def test_layer_norm_normalises_rows(self):
        x = np.random.default_rng(2).normal(3.0, 5.0, size=(4, 8))
        out = ad.layer_norm(ad.const(x), ad.const(np.ones((1, 8))), ad.const(np.zeros((1, 8)))).value
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=1), 1.0, rtol=1e-5)

    def test_row_norms_zero_row_has_zero_gradient(self):
        tape = ad.Tape()
        x = tape.leaf([[0.0, 0.0], [3.0, 4.0]])
        g = tape.backward(ad.sum_all(ad.row_norms(x))).of(x)
        np.testing.assert_array_equal(g[0], [0.0, 0.0])
        np.testing.assert_allclose(g[1], [0.6, 0.8], rtol=1e-15)

    def test_absolute_subgradient_at_zero(self):
        tape = ad.Tape()
        x = tape.leaf([[0.0, -2.0, 2.0]])
        g = tape.backward(ad.sum_all(ad.absolute(x))).of(x)
        np.testing.assert_array_equal(g, [[0.0, -1.0, 1.0]])

    def test_operators(self):
        a = ad.const([[1.0, 2.0]])
        b = ad.const([[3.0, 5.0]])
        np.testing.assert_array_equal((a + b).value, [[4.0, 7.0]])
        np.testing.assert_array_equal((a - b).value, [[-2.0, -3.0]])
        np.testing.assert_array_equal((a * b).value, [[3.0, 10.0]])
        np.testing.assert_array_equal((a @ b.T).value, [[13.0]])
        np.testing.assert_array_equal((-a).value, [[-1.0, -2.0]])

    def test_outputs_finite_for_bounded_inputs(self):
        rng = np.random.default_rng(3)
        x = ad.const(rng.uniform(-50, 50, size=(5, 6)))
        for name, op in ELEMENTWISE.items():
            assert np.all(np.isfinite(op(x).value)), name


class TestContracts:
    def test_only_two_dimensional(self):
        with pytest.raises(ad.DimensionError):
            ad.DiffArray(np.zeros(3))
        with pytest.raises(ad.DimensionError):
            ad.DiffArray(np.zeros((2, 2, 2)))

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ad.DimensionError):
            ad.matmul(ad.const(np.zeros((2, 3))), ad.const(np.zeros((2, 3))))

    def test_only_row_vector_broadcast(self):
        a = ad.const(np.zeros((3, 4)))
        with pytest.raises(ad.DimensionError):
            ad.add(a, ad.const(np.zeros((3, 1))))
        with pytest.raises(ad.DimensionError):
            ad.mul(ad.const(np.zeros((1, 4))), a)
        assert ad.add(a, ad.const(np.ones((1, 4)))).shape == (3, 4)

    def test_backward_needs_scalar(self):
        tape = ad.Tape()
        x = tape.leaf(np.ones((2, 2)))
        with pytest.raises(ad.ContractError):
            tape.backward(x)

    def test_mixed_tapes_rejected(self):
        a = ad.Tape().leaf(np.ones((1, 1)))
        b = ad.Tape().leaf(np.ones((1, 1)))
        with pytest.raises(ad.ContractError):
            ad.add(a, b)

    def test_duplicate_parameter_name(self):
        tape = ad.Tape()
        tape.param("w", np.ones((1, 1)))
        with pytest.raises(ad.ContractError):
            tape.param("w", np.ones((1, 1)))

    def test_slices_out_of_range(self):
        a = ad.const(np.zeros((2, 2)))
        with pytest.raises(ad.DimensionError):
            ad.slice_rows(a, 0, 3)
        with pytest.raises(ad.DimensionError):
            ad.gather_rows(a, [2])


class TestTape:
    def test_named_parameter_gradients(self):
        tape = ad.Tape()
        w = tape.param("w", np.full((2, 3), 2.0))
        grads = tape.backward(ad.sum_all(ad.mul(w, w)))
        np.testing.assert_array_equal(grads["w"], np.full((2, 3), 4.0))
        assert set(grads.as_dict()) == {"w"}

    def test_unreached_parameter_gets_zero(self):
        tape = ad.Tape()
        w = tape.param("w", np.ones((2, 2)))
        tape.param("unused", np.ones((3, 1)))
        grads = tape.backward(ad.sum_all(w))
        np.testing.assert_array_equal(grads["unused"], np.zeros((3, 1)))

    def test_stop_gradient_blocks_flow(self):
        tape = ad.Tape()
        w = tape.param("w", np.ones((1, 2)))
        loss = ad.sum_all(ad.mul(w, ad.stop_gradient(w)))
        np.testing.assert_array_equal(tape.backward(loss)["w"], [[1.0, 1.0]])

    def test_fan_out_accumulates(self):
        tape = ad.Tape()
        x = tape.leaf([[1.5]])
        y = ad.add(ad.mul(x, x), ad.scale(x, 3.0))
        np.testing.assert_allclose(tape.backward(y).of(x), [[6.0]])

    def test_leaf_copies_its_value(self):
        v = np.ones((1, 2))
        tape = ad.Tape()
        x = tape.leaf(v)
        v[0, 0] = 5.0
        assert x.value[0, 0] == 1.0

    def test_numeric_helper_on_quadratic(self):
        g = numeric_grad(lambda v: float(np.sum(v**2)), np.array([[1.0, -2.0]]))
        assert rel_err(g, [[2.0, -4.0]]) < 1e-9
