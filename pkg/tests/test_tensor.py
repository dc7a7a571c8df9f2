import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cgsolver import tensor as T
from cgsolver.exceptions import DimensionError, NonFiniteError, TapeStateError
from fd_oracle import central_grad, rel_err


def leaf(arr):
    return T.Tensor(np.array(arr, dtype=np.float64), requires_grad=True)


def check_op_fd(fn, arrays, weights, tol=1e-6):
    """Reverse-mode gradient of sum(fn(*arrays) * weights) vs central differences."""
    leaves = [leaf(a) for a in arrays]
    out = fn(*leaves)
    T.reduce_sum(T.mul(out, T.Tensor(weights))).backward()
    for t in leaves:
        def f():
            with T.no_grad():
                return float((fn(*[T.Tensor(s.data) for s in leaves]).data * weights).sum())

        fd = central_grad(f, t.data)
        assert rel_err(t.grad, fd) <= tol


# matmul ----------------------------------------------------------------------
def test_matmul_identity():
    out = T.matmul(T.Tensor(np.eye(2)), T.Tensor([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_basis_vector_selection():
    out = T.Tensor([[1.0, 0.0]]) @ T.Tensor([[5.0], [7.0]])
    np.testing.assert_array_equal(out.data, [[5.0]])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    check_op_fd(T.matmul, [a, b], rng.normal(size=(3, 3)), tol=1e-6)


def test_linear_matches_matmul_plus_bias():
    rng = np.random.default_rng(1)
    x, W, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)
    np.testing.assert_allclose(T.linear(T.Tensor(x), T.Tensor(W), T.Tensor(b)).data, x @ W + b)
    check_op_fd(T.linear, [x, W, b], rng.normal(size=(4, 2)))


# elementwise ------------------------------------------------------------------
def test_sigmoid_at_zero():
    x = leaf([0.0])
    y = T.sigmoid(x)
    assert y.data[0] == 0.5
    y.backward(np.ones(1))
    assert x.grad[0] == 0.25


def test_sigmoid_stays_inside_open_interval():
    y = T.sigmoid(T.Tensor([-30.0, -5.0, 0.0, 5.0, 30.0])).data
    assert np.all(y > 0) and np.all(y < 1)


def test_leaky_relu_negative_branch():
    assert T.leaky_relu(T.Tensor([-2.0]), slope=0.01).data[0] == pytest.approx(-0.02)
    assert T.elementwise("leaky_relu", T.Tensor([-2.0])).data[0] == pytest.approx(-0.02)


@pytest.mark.parametrize("name", ["sigmoid", "tanh", "leaky_relu", "swish"])
def test_unary_gradients_match_finite_differences(name):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(5, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep leaky_relu away from its kink
    check_op_fd(lambda a: T.elementwise(name, a), [x], rng.normal(size=(5, 4)), tol=1e-6)


@pytest.mark.parametrize("name", ["add", "sub", "mul"])
def test_binary_gradients_match_finite_differences(name):
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    check_op_fd(lambda x, y: T.elementwise(name, x, y), [a, b], rng.normal(size=(3, 4)))


def test_scalar_broadcast_gradient_is_summed():
    x = leaf(np.ones((2, 3)))
    s = leaf(2.0)
    T.reduce_sum(T.mul(x, s)).backward()
    assert s.grad == pytest.approx(6.0)
    np.testing.assert_array_equal(x.grad, np.full((2, 3), 2.0))


def test_binary_shape_mismatch():
    with pytest.raises(DimensionError):
        T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((3, 2))))


def test_activation_helpers_agree_with_recorded_ops():
    x = np.linspace(-2, 2, 9)
    for name in ("sigmoid", "tanh", "leaky_relu", "swish"):
        np.testing.assert_allclose(T.activation_apply(name, x), T.elementwise(name, T.Tensor(x)).data)
        xt = leaf(x)
        T.elementwise(name, xt).backward(np.ones_like(x))
        np.testing.assert_allclose(T.activation_grad(name, x), xt.grad, rtol=1e-12)


def test_nan_is_an_immediate_error():
    with pytest.raises(NonFiniteError):
        T.mul(T.Tensor([np.inf]), T.Tensor([0.0]))


def test_non_finite_leaf_rejected():
    with pytest.raises(NonFiniteError):
        T.Tensor([1.0, np.nan])


# graph ops ----------------------------------------------------------------------
def test_segment_sum_hand_example():
    out = T.segment_sum(T.Tensor([[1.0], [2.0], [3.0]]), [0, 0, 1], 2)
    np.testing.assert_array_equal(out.data, [[3.0], [3.0]])


def test_segment_sum_empty_segments_are_zero():
    out = T.segment_sum(T.Tensor([[1.0, 2.0], [3.0, 4.0]]), [1, 1], 3)
    np.testing.assert_array_equal(out.data, [[0, 0], [4, 6], [0, 0]])


def test_segment_sum_out_of_range():
    with pytest.raises(IndexError):
        T.segment_sum(T.Tensor([[1.0]]), [2], 2)


def test_segment_sum_gradient_routes_by_id():
    rng = np.random.default_rng(4)
    v = rng.normal(size=(6, 2))
    ids = [2, 0, 2, 1, 0, 2]
    w = rng.normal(size=(3, 2))
    check_op_fd(lambda a: T.segment_sum(a, ids, 3), [v], w)
    x = leaf(v)
    T.reduce_sum(T.segment_sum(x, ids, 3)).backward()
    np.testing.assert_array_equal(x.grad, np.ones_like(v))


def test_gather_rows_gradient():
    rng = np.random.default_rng(5)
    check_op_fd(lambda a: T.gather_rows(a, [0, 2, 2, 1]), [rng.normal(size=(3, 2))], rng.normal(size=(4, 2)))


def test_getitem_gradient():
    rng = np.random.default_rng(6)
    check_op_fd(lambda a: a[1:3], [rng.normal(size=(4, 2))], rng.normal(size=(2, 2)))


def test_concat_shape_and_gradient():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(4, 2)), rng.normal(size=(4, 3))
    assert T.concat([T.Tensor(a), T.Tensor(b)], axis=1).shape == (4, 5)
    check_op_fd(lambda x, y: T.concat([x, y], axis=1), [a, b], rng.normal(size=(4, 5)))
    with pytest.raises(DimensionError):
        T.concat([T.Tensor(a), T.Tensor(np.ones((3, 3)))], axis=1)


def test_mse_value_and_gradient():
    assert T.mse_loss(T.Tensor([1.0, 2.0]), T.Tensor([1.0, 4.0])).data == pytest.approx(2.0)
    rng = np.random.default_rng(8)
    p, t = rng.normal(size=5), rng.normal(size=5)
    x = leaf(p)
    T.mse_loss(x, T.Tensor(t)).backward()

    def f():
        return float(np.mean((p - t) ** 2))

    assert np.abs(x.grad - central_grad(f, p)).max() <= 1e-8
    np.testing.assert_allclose(x.grad, 2 * (p - t) / 5)
    with pytest.raises(DimensionError):
        T.mse_loss(T.Tensor([1.0]), T.Tensor([1.0, 2.0]))


def test_reductions():
    x = leaf(np.arange(6.0).reshape(2, 3))
    T.reduce_mean(x).backward()
    np.testing.assert_allclose(x.grad, np.full((2, 3), 1 / 6))
    assert T.reduce_sum(T.Tensor(np.arange(4.0))).data == 6.0


@given(
    rows=st.integers(1, 5),
    cols=st.integers(1, 5),
    inner=st.integers(1, 5),
    seed=st.integers(0, 2**31 - 1),
)
def test_random_composite_gradients(rows, cols, inner, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(rows, inner)), rng.normal(size=(inner, cols))

    def fn(x, y):
        return T.tanh(T.matmul(T.swish(x), y))

    check_op_fd(fn, [a, b], rng.normal(size=(rows, cols)), tol=1e-5)


# tape semantics -------------------------------------------------------------------
def test_backward_accumulates_additively():
    x = leaf([1.0, 2.0])
    T.reduce_sum(T.mul(x, x)).backward()
    first = x.grad.copy()
    T.reduce_sum(T.mul(x, T.Tensor([3.0, 3.0]))).backward()
    np.testing.assert_allclose(x.grad, first + 3.0)


def test_shared_subexpression_sums_both_paths():
    x = leaf([2.0])
    y = T.mul(x, x)
    T.reduce_sum(T.add(y, y)).backward()
    assert x.grad[0] == pytest.approx(8.0)


def test_tape_is_topologically_ordered():
    x = leaf([1.0])
    y = T.sigmoid(x)
    z = T.add(T.mul(y, x), y)
    tape = T.build_tape(z)
    pos = {id(n): k for k, n in enumerate(tape)}
    for node in tape:
        for parent in node._parents:
            if id(parent) in pos:
                assert pos[id(parent)] < pos[id(node)]


def test_identity_hook_leaves_gradients_unchanged():
    rng = np.random.default_rng(9)
    a = rng.normal(size=(3, 2))
    x1, x2 = leaf(a), leaf(a)
    T.reduce_sum(T.tanh(T.mul(x1, x1))).backward()
    z = T.custom_backward_hook(T.mul(x2, x2), lambda g: g)
    T.reduce_sum(T.tanh(z)).backward()
    np.testing.assert_array_equal(x1.grad, x2.grad)


def test_doubling_hook_doubles_leaf_gradients():
    rng = np.random.default_rng(10)
    a = rng.normal(size=(3, 2))
    x1, x2 = leaf(a), leaf(a)
    T.reduce_sum(T.sigmoid(x1)).backward()
    T.reduce_sum(T.custom_backward_hook(T.sigmoid(x2), lambda g: 2 * g)).backward()
    np.testing.assert_allclose(x2.grad, 2 * x1.grad)


def test_hook_on_detached_tensor_is_a_state_error():
    with pytest.raises(TapeStateError):
        T.custom_backward_hook(T.Tensor([1.0]), lambda g: g)
    with T.no_grad():
        y = T.sigmoid(leaf([1.0]))
    with pytest.raises(TapeStateError):
        T.custom_backward_hook(y, lambda g: g)


def test_backward_requires_scalar_or_explicit_grad():
    x = leaf([1.0, 2.0])
    with pytest.raises(DimensionError):
        T.mul(x, x).backward()
    with pytest.raises(TapeStateError):
        T.Tensor([1.0]).backward()


def test_no_grad_is_thread_local():
    seen = {}

    def worker():
        seen["other"] = T.is_grad_enabled()

    with T.no_grad():
        t = threading.Thread(target=worker)
        t.start()
        t.join()
        assert not T.is_grad_enabled()
    assert seen["other"] is True
    assert T.is_grad_enabled()


def test_forward_replay_is_bit_identical():
    def run():
        rng = np.random.default_rng(11)
        x = T.Tensor(rng.normal(size=(5, 4)))
        W = T.Tensor(rng.normal(size=(4, 3)))
        return T.leaky_relu(T.linear(x, W, T.Tensor(rng.normal(size=3)))).data

    assert run().tobytes() == run().tobytes()
