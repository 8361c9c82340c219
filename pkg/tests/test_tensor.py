import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from quoterec import tensor as T
from quoterec.tensor import ContractError, DimensionError, GradTape, NumericError, Tensor


def leaf(a):
    return Tensor(np.array(a, dtype=float), requires_grad=True)


def numeric_grad(f, x, step=1e-5):
    g = np.zeros_like(x.data)
    flat, gf = x.data.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f().item()
        flat[i] = orig - step
        down = f().item()
        flat[i] = orig
        gf[i] = (up - down) / (2 * step)
    return g


def rel_err(a, n):
    return np.abs(a - n).max() / max(np.abs(a).max(), np.abs(n).max(), 1e-12)


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor(np.eye(2)), Tensor([[1, 2], [3, 4]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_row_times_column(self):
        assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        A, B = leaf(rng.normal(size=(3, 3))), leaf(rng.normal(size=(3, 3)))
        with GradTape() as tape:
            tape.backward(T.sum(T.matmul(A, B)))
        num = numeric_grad(lambda: T.sum(T.matmul(A, B)), A)
        assert rel_err(A.grad, num) < 1e-6
        # closed form: g @ B^T with g = ones
        np.testing.assert_allclose(A.grad, np.ones((3, 3)) @ B.data.T)
        np.testing.assert_allclose(B.grad, A.data.T @ np.ones((3, 3)))

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_shared_right_operand(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, a @ b)

    def test_mismatched_batch_extents(self):
        with pytest.raises(DimensionError):
            T.matmul(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((3, 4, 5))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)

    def test_analytic(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, math.log(2)])).data, [1 / 3, 2 / 3], atol=1e-15)

    def test_large_logits_do_not_overflow(self):
        with np.errstate(over="raise", invalid="raise"):
            out = T.softmax(Tensor([1000.0, 0.0])).data
        assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-300)

    def test_nan_input(self):
        with pytest.raises(NumericError):
            T.softmax(Tensor([0.0, np.nan]))

    def test_mask_gives_exact_zero(self):
        out = T.softmax(Tensor([[1.0, 2.0, 3.0]]), mask=np.array([[True, True, False]])).data
        assert out[0, 2] == 0.0
        assert out.sum() == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                  elements=st.floats(-50, 50, allow_nan=False)),
           st.randoms(use_true_random=False))
    def test_sums_to_one_and_permutation_equivariant(self, x, rnd):
        out = T.softmax(Tensor(x), axis=-1).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)
        assert (out >= 0).all()
        perm = list(range(x.shape[1]))
        rnd.shuffle(perm)
        np.testing.assert_allclose(T.softmax(Tensor(x[:, perm]), axis=-1).data, out[:, perm], atol=1e-15)


class TestElementwise:
    def test_sqdist_of_equal_is_zero(self):
        v = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
        assert T.sqdist(v, v).item() == 0.0

    def test_sqdist_basis(self):
        assert T.sqdist(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 2.0

    def test_tanh_gradient_at_zero(self):
        x = leaf([0.0])
        with GradTape() as tape:
            tape.backward(T.sum(T.tanh(x)))
        assert x.grad[0] == 1.0

    def test_no_broadcasting(self):
        with pytest.raises(DimensionError):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))
        with pytest.raises(DimensionError):
            T.mul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
        with pytest.raises(DimensionError):
            T.sqdist(Tensor(np.zeros(2)), Tensor(np.zeros(3)))

    def test_scalar_with_tensor(self):
        x = Tensor([1.0, 2.0])
        np.testing.assert_array_equal((x * 2.0 + 1.0).data, [3.0, 5.0])
        np.testing.assert_array_equal((1.0 - x).data, [0.0, -1.0])

    def test_concat_slice_mean(self):
        a, b = Tensor([[1.0, 2.0]]), Tensor([[3.0]])
        c = T.concat([a, b], axis=-1)
        np.testing.assert_array_equal(c.data, [[1, 2, 3]])
        np.testing.assert_array_equal(c[:, 1:].data, [[2, 3]])
        assert T.mean(c).item() == 2.0

    def test_relu_sigmoid(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.5])).data, [0.0, 0.5])
        assert T.sigmoid(Tensor([0.0])).data[0] == 0.5


def _ops_cases():
    """(name, builder) where builder(rng, shape) -> (loss_fn, leaves)."""

    def unary(fn):
        def build(rng, shape):
            x = leaf(rng.normal(size=shape))
            w = Tensor(rng.normal(size=fn(x).shape))
            return (lambda: T.sum(fn(x) * w)), [x]
        return build

    def binary(fn):
        def build(rng, shape):
            a, b = leaf(rng.normal(size=shape)), leaf(rng.normal(size=shape))
            w = Tensor(rng.normal(size=fn(a, b).shape))
            return (lambda: T.sum(fn(a, b) * w)), [a, b]
        return build

    def mm(rng, shape):
        m, k = shape
        a, b = leaf(rng.normal(size=(m, k))), leaf(rng.normal(size=(k, m + 1)))
        w = rng.normal(size=(m, m + 1))
        return (lambda: T.sum(T.matmul(a, b) * Tensor(w))), [a, b]

    def sq(rng, shape):
        a, b = leaf(rng.normal(size=shape)), leaf(rng.normal(size=shape))
        return (lambda: T.sqdist(a, b)), [a, b]

    def ln(rng, shape):
        x, g, b = leaf(rng.normal(size=shape)), leaf(rng.normal(size=shape[-1])), leaf(rng.normal(size=shape[-1]))
        w = rng.normal(size=shape)
        return (lambda: T.sum(T.layer_norm(x, g, b) * Tensor(w))), [x, g, b]

    return [
        ("add", binary(T.add)), ("sub", binary(T.sub)), ("mul", binary(T.mul)),
        ("tanh", unary(T.tanh)), ("sigmoid", unary(T.sigmoid)),
        ("softmax", unary(lambda x: T.softmax(x, axis=-1))),
        ("log_softmax", unary(lambda x: T.log_softmax(x, axis=-1))),
        ("transpose", unary(lambda x: T.transpose(x))),
        ("slice", unary(lambda x: x[:, :1])),
        ("concat", binary(lambda a, b: T.concat([a, b], axis=0))),
        ("matmul", mm), ("sqdist", sq), ("layer_norm", ln),
    ]


class TestGradients:
    @pytest.mark.parametrize("name,build", _ops_cases(), ids=[c[0] for c in _ops_cases()])
    def test_primitive_against_finite_differences(self, name, build):
        # 20 random shapes/seeds per primitive
        for seed in range(20):
            rng = np.random.default_rng(seed)
            shape = (int(rng.integers(1, 4)), int(rng.integers(2, 5)))
            f, leaves = build(rng, shape)
            with GradTape() as tape:
                tape.backward(f())
            for x in leaves:
                num = numeric_grad(f, x)
                err = np.abs(x.grad - num).max() / max(np.abs(x.grad).max(), np.abs(num).max(), 1e-8)
                assert err < 1e-4, (name, seed, err)

    def test_sum_gives_ones(self):
        x = leaf(np.random.default_rng(0).normal(size=(2, 3, 4)))
        with GradTape() as tape:
            tape.backward(T.sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_sqdist_of_linear_map(self):
        rng = np.random.default_rng(5)
        M, r, t = leaf(rng.normal(size=(4, 4))), Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
        f = lambda: T.sqdist(T.matmul(M, r), t)  # noqa: E731
        with GradTape() as tape:
            tape.backward(f())
        assert rel_err(M.grad, numeric_grad(f, M)) < 1e-5

    def test_two_backwards_double(self):
        rng = np.random.default_rng(2)
        x = leaf(rng.normal(size=(3,)))
        with GradTape() as tape:
            loss = T.sum(T.tanh(x) * T.tanh(x))
            tape.backward(loss)
            once = x.grad.copy()
            tape.backward(loss)
        np.testing.assert_array_equal(x.grad, 2 * once)

    def test_non_scalar_loss(self):
        x = leaf([1.0, 2.0])
        with GradTape() as tape:
            with pytest.raises(ContractError):
                tape.backward(T.tanh(x))

    def test_untouched_parameter_gets_zero_grad(self):
        a, b = leaf([1.0, 2.0]), leaf([3.0])
        with GradTape() as tape:
            y = T.sum(a)
            _ = T.tanh(b)  # registered but not on the path to the loss
            tape.backward(y)
        np.testing.assert_array_equal(b.grad, [0.0])

    def test_constant_never_accumulates(self):
        c, x = Tensor([1.0, 2.0]), leaf([3.0, 4.0])
        with GradTape() as tape:
            tape.backward(T.sum(c * x))
        assert c.grad is None and c.tape_id is None
        np.testing.assert_array_equal(x.grad, [1.0, 2.0])

    def test_outside_tape_nothing_recorded(self):
        x = leaf([1.0])
        y = T.tanh(x)
        assert y.tape_id is None

    def test_tape_topological_order(self):
        x = leaf(np.ones((2, 2)))
        with GradTape() as tape:
            T.sum(T.matmul(T.tanh(x), x))
        seen = set()
        for node in tape.nodes:
            for t in node.inputs:
                if t.tape_id is not None:
                    assert t.tape_id[1] in seen
            seen.add(node.output.tape_id[1])


def test_forward_is_bit_identical():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))

    def run():
        return T.sum(T.softmax(T.matmul(Tensor(a), Tensor(b)), axis=0)).data.tobytes()

    assert run() == run()


def test_dropout_range_checked():
    with pytest.raises(ValueError):
        T.dropout(Tensor([1.0]), 1.0, True, np.random.default_rng(0))
    with pytest.raises(ValueError):
        T.dropout(Tensor([1.0]), -0.1, False)
