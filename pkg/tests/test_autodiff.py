import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from voxinit import ops
from voxinit.autodiff import ShapeError, Tape, Tensor, backward, no_grad
from voxinit.gradcheck import check_gradients


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_matmul_identity_and_hand_values():
    A = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(ops.matmul(Tensor(np.eye(3)), Tensor(A)).data, A)
    out = ops.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    a, b = leaf(rng.normal(size=(4, 5))), leaf(rng.normal(size=(5, 3)))
    w = rng.normal(size=(4, 3))
    assert check_gradients(lambda: ops.sum(ops.mul(ops.matmul(a, b), w)), [a, b]) < 1e-6


def test_sum_gives_ones():
    x = leaf([1.0, -2.0, 5.0])
    with Tape() as tape:
        loss = ops.sum(x)
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, np.ones(3))


def test_mean_of_squares_hand_gradient():
    x = leaf([1.0, 2.0, 3.0])
    with Tape() as tape:
        loss = ops.mean(ops.power(x, 2))
    backward(tape, loss)
    np.testing.assert_allclose(x.grad, [2 / 3, 4 / 3, 2.0], rtol=1e-15)


def test_non_scalar_loss_rejected():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = ops.mul(x, 2.0)
    with pytest.raises(ValueError, match="scalar"):
        backward(tape, y)


def test_tape_is_topologically_ordered():
    x = leaf(np.ones((2, 2)))
    with Tape() as tape:
        y = ops.exp(ops.mul(x, x))
        ops.sum(ops.add(y, x))
    produced = {x.node_id}
    for e in tape.entries:
        assert all(i in produced for i in e.input_ids)
        produced.add(e.output_id)


def test_unreached_wrt_gets_zero_gradient():
    x, unused = leaf([1.0]), leaf([[2.0, 3.0]])
    with Tape() as tape:
        loss = ops.sum(ops.mul(x, 3.0))
    backward(tape, loss, wrt=[x, unused])
    np.testing.assert_array_equal(unused.grad, np.zeros((1, 2)))
    np.testing.assert_array_equal(x.grad, [3.0])


def test_shared_subexpression_accumulates():
    x = leaf([2.0])
    with Tape() as tape:
        y = ops.mul(x, x)
        loss = ops.sum(ops.add(y, y))
    backward(tape, loss)
    np.testing.assert_allclose(x.grad, [8.0])


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with Tape() as tape:
        with no_grad():
            ops.mul(x, 2.0)
        ops.mul(x, 3.0)
    assert tape.ops() == ["mul"]


def test_replay_is_deterministic():
    rng = np.random.default_rng(0)
    a, b = Tensor(rng.normal(size=(6, 7))), Tensor(rng.normal(size=(7, 2)))
    first = ops.exp(ops.matmul(a, b)).data.copy()
    np.testing.assert_array_equal(ops.exp(ops.matmul(a, b)).data, first)


ELEMENTWISE = {
    "add": lambda a, b: ops.add(a, b),
    "sub": lambda a, b: ops.sub(a, b),
    "mul": lambda a, b: ops.mul(a, b),
    "div": lambda a, b: ops.div(a, ops.add(ops.mul(b, b), 1.0)),
    "power": lambda a, b: ops.power(ops.add(ops.mul(a, a), 1.0), 1.5),
    "exp": lambda a, b: ops.exp(a),
    "log": lambda a, b: ops.log(ops.add(ops.mul(a, a), 0.5)),
    "sqrt": lambda a, b: ops.sqrt(ops.add(ops.mul(b, b), 0.5)),
    "clamp_min": lambda a, b: ops.clamp_min(a, 0.1),
    "neg": lambda a, b: ops.neg(b),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_elementwise_gradients(name):
    rng = np.random.default_rng(3)
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4,)))
    w = rng.normal(size=(3, 4))
    fn = ELEMENTWISE[name]
    assert check_gradients(lambda: ops.sum(ops.mul(fn(a, b), w)), [a, b]) < 1e-6


@pytest.mark.parametrize("build", [
    lambda x: ops.sum(x, axis=1, keepdims=True),
    lambda x: ops.mean(x, axis=(0, 2)),
    lambda x: ops.reshape(x, (6, 4)),
    lambda x: ops.transpose(x, (2, 0, 1)),
    lambda x: x[:, 1:, ::2],
    lambda x: x[np.array([0, 0, 1])],
    lambda x: ops.concat([x, ops.mul(x, 2.0)], axis=1),
])
def test_shape_op_gradients(build):
    rng = np.random.default_rng(4)
    x = leaf(rng.normal(size=(2, 3, 4)))
    w = rng.normal(size=build(Tensor(x.data)).shape)
    assert check_gradients(lambda: ops.sum(ops.mul(build(x), w)), [x]) < 1e-6


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=4),
                  elements=st.floats(-10, 10)))
def test_gradient_shape_matches_data(arr):
    x = leaf(arr)
    with Tape() as tape:
        loss = ops.sum(ops.mul(ops.exp(ops.mul(x, 0.1)), x))
    backward(tape, loss)
    assert x.grad.shape == x.shape
    assert np.all(np.isfinite(x.grad))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
def test_broadcast_add_gradient_reduces_to_input_shape(m, n, k):
    a, b = leaf(np.ones((m, n, k))), leaf(np.ones((n, 1)))
    with Tape() as tape:
        loss = ops.sum(ops.add(a, b))
    backward(tape, loss)
    np.testing.assert_array_equal(b.grad, np.full((n, 1), m * k))
