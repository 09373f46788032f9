import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxinit import nn, ops
from voxinit.autodiff import ShapeError, Tape, Tensor, backward
from voxinit.gradcheck import check_gradients
from voxinit.optim import SGD, AdamW, NumericalError, make_optimizer


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def weighted(out, rng):
    return rng.normal(size=out.shape)


def naive_conv3d(x, w, b, s, p):
    """Direct loop oracle for cross-correlation."""
    xp = np.pad(x, ((0, 0), (0, 0)) + ((p, p),) * 3)
    B, _, H, W, D = xp.shape
    Co, _, k, _, _ = w.shape
    oh, ow, od = ((H - k) // s + 1, (W - k) // s + 1, (D - k) // s + 1)
    out = np.zeros((B, Co, oh, ow, od))
    for i in range(oh):
        for j in range(ow):
            for l in range(od):
                patch = xp[:, :, i * s:i * s + k, j * s:j * s + k, l * s:l * s + k]
                out[:, :, i, j, l] = np.tensordot(patch, w, axes=([1, 2, 3, 4], [1, 2, 3, 4]))
    return out + b.reshape(1, -1, 1, 1, 1)


# -- conv3d ------------------------------------------------------------

def test_unit_kernel_is_identity():
    x = np.random.default_rng(0).normal(size=(1, 1, 3, 4, 5))
    out = nn.conv3d(Tensor(x), Tensor(np.ones((1, 1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_ones_kernel_counts_to_eight():
    out = nn.conv3d(Tensor(np.ones((1, 1, 2, 2, 2))), Tensor(np.ones((1, 1, 2, 2, 2))))
    assert out.shape == (1, 1, 1, 1, 1) and out.data.item() == 8.0


@pytest.mark.parametrize("method,stride,pad,k", [
    ("im2col", 1, 1, 3), ("im2col", 2, 1, 3), ("shift", 1, 1, 3), ("shift", 1, 0, 2), ("patch", 2, 0, 2),
])
def test_conv_methods_match_loop_oracle(method, stride, pad, k):
    rng = np.random.default_rng(2)
    x, w, b = rng.normal(size=(2, 2, 6, 6, 6)), rng.normal(size=(3, 2, k, k, k)), rng.normal(size=3)
    out = nn.conv3d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad, method=method)
    np.testing.assert_allclose(out.data, naive_conv3d(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("method", ["im2col", "shift"])
def test_conv_gradient(method):
    rng = np.random.default_rng(5)
    x, w, b = leaf(rng.normal(size=(1, 2, 5, 5, 5))), leaf(rng.normal(size=(3, 2, 3, 3, 3))), leaf(rng.normal(size=3))
    g = rng.normal(size=(1, 3, 5, 5, 5))
    err = check_gradients(lambda: ops.sum(ops.mul(nn.conv3d(x, w, b, padding=1, method=method), g)), [x, w, b])
    assert err < 1e-5


def test_strided_conv_gradient():
    rng = np.random.default_rng(6)
    x, w = leaf(rng.normal(size=(1, 2, 8, 8, 8))), leaf(rng.normal(size=(2, 2, 4, 4, 4)))
    g = rng.normal(size=(1, 2, 2, 2, 2))
    assert check_gradients(lambda: ops.sum(ops.mul(nn.conv3d(x, w, stride=4), g)), [x, w]) < 1e-5


def test_kernel_larger_than_input_rejected():
    with pytest.raises(ShapeError):
        nn.conv3d(Tensor(np.zeros((1, 1, 2, 2, 2))), Tensor(np.zeros((1, 1, 3, 3, 3))))


def test_channel_mismatch_rejected():
    with pytest.raises(ShapeError, match="channels"):
        nn.conv3d(Tensor(np.zeros((1, 2, 4, 4, 4))), Tensor(np.zeros((1, 3, 1, 1, 1))))


# -- transposed conv -----------------------------------------------------

def test_transposed_unit_kernel_is_identity():
    x = np.random.default_rng(0).normal(size=(1, 1, 3, 3, 3))
    out = nn.conv_transpose3d(Tensor(x), Tensor(np.ones((1, 1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 0, 2), (2, 1, 3), (1, 1, 3)])
def test_adjoint_identity(stride, pad, k):
    """<conv(x), y> == <x, conv_transpose(y)> with the same weights."""
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, 2, 5, 5, 5))
    w = rng.normal(size=(3, 2, k, k, k))
    cx = nn.conv3d(Tensor(x), Tensor(w), stride=stride, padding=pad, method="im2col").data
    y = rng.normal(size=cx.shape)
    ty = nn.conv_transpose3d(Tensor(y), Tensor(w), stride=stride, padding=pad).data
    if ty.shape != x.shape:  # stride leaves a tail of x unseen by conv
        x = x[:, :, :ty.shape[2], :ty.shape[3], :ty.shape[4]]
        cx = nn.conv3d(Tensor(x), Tensor(w), stride=stride, padding=pad, method="im2col").data
    lhs, rhs = float((cx * y).sum()), float((x * ty).sum())
    assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), 1.0)


@pytest.mark.parametrize("method,stride,k", [("patch", 2, 2), ("scatter", 2, 2), ("scatter", 1, 3)])
def test_transposed_gradient(method, stride, k):
    rng = np.random.default_rng(8)
    x, w, b = leaf(rng.normal(size=(1, 2, 3, 3, 3))), leaf(rng.normal(size=(2, 3, k, k, k))), leaf(rng.normal(size=3))
    out_shape = nn.conv_transpose3d(Tensor(x.data), Tensor(w.data), stride=stride).shape
    g = rng.normal(size=out_shape)
    err = check_gradients(lambda: ops.sum(ops.mul(nn.conv_transpose3d(x, w, b, stride=stride, method=method), g)),
                          [x, w, b])
    assert err < 1e-5


# -- normalization & activations ----------------------------------------

def test_layer_norm_constant_input_is_zero():
    out = nn.layer_norm(Tensor(np.full((2, 5), 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_layer_norm_two_values():
    out = nn.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-10)


def test_layer_norm_gradient():
    rng = np.random.default_rng(9)
    x, ga, be = leaf(rng.normal(size=(3, 4, 6))), leaf(rng.normal(size=6)), leaf(rng.normal(size=6))
    g = rng.normal(size=(3, 4, 6))
    assert check_gradients(lambda: ops.sum(ops.mul(nn.layer_norm(x, ga, be), g)), [x, ga, be]) < 1e-5


@pytest.mark.parametrize("fn", [nn.gelu, nn.leaky_relu, lambda t: nn.softmax(t, axis=1),
                                lambda t: nn.log_softmax(t, axis=0)])
def test_activation_gradients(fn):
    rng = np.random.default_rng(11)
    # keep leaky-relu inputs away from its kink
    x = leaf(rng.choice([-1, 1], size=(4, 5)) * rng.uniform(0.1, 2.0, size=(4, 5)))
    g = rng.normal(size=(4, 5))
    assert check_gradients(lambda: ops.sum(ops.mul(fn(x), g)), [x]) < 1e-5


def test_gelu_known_values():
    out = nn.gelu(Tensor([0.0, 1.0, -1.0])).data
    np.testing.assert_allclose(out, [0.0, 0.8413447460685429, -0.15865525393145707], rtol=1e-12)


def test_leaky_relu_slope():
    np.testing.assert_array_equal(nn.leaky_relu(Tensor([-2.0, 3.0])).data, [-0.02, 3.0])


# -- attention -------------------------------------------------------------

def test_single_token_attention_returns_values():
    rng = np.random.default_rng(12)
    q, k, v = (Tensor(rng.normal(size=(2, 1, 8))) for _ in range(3))
    np.testing.assert_allclose(nn.attention(q, k, v, heads=2).data, v.data, rtol=1e-14)


def test_identical_keys_give_uniform_weights():
    rng = np.random.default_rng(13)
    q = rng.normal(size=(1, 5, 8))
    k = np.tile(rng.normal(size=(1, 1, 8)), (1, 5, 1))
    np.testing.assert_allclose(nn.attention_weights(q, k, heads=4), 0.2, rtol=1e-12)


def test_attention_gradient():
    rng = np.random.default_rng(14)
    q, k, v = (leaf(rng.normal(size=(2, 3, 8))) for _ in range(3))
    g = rng.normal(size=(2, 3, 8))
    assert check_gradients(lambda: ops.sum(ops.mul(nn.attention(q, k, v, heads=2), g)), [q, k, v]) < 1e-4


def test_attention_rejects_indivisible_heads():
    t = Tensor(np.zeros((1, 2, 6)))
    with pytest.raises(ValueError, match="divisible"):
        nn.attention(t, t, t, heads=4)


# -- optimizers --------------------------------------------------------------

def _param(v):
    return {"theta": Tensor(np.asarray(v, dtype=np.float64), requires_grad=True)}


def test_adamw_zero_gradient_leaves_params():
    p = _param([1.0, -2.0])
    opt = AdamW(p, lr=0.1)
    p["theta"].grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p["theta"].data, [1.0, -2.0])


def test_adamw_first_step_closed_form():
    p = _param([0.5])
    opt = AdamW(p, lr=0.1, betas=(0.9, 0.999), weight_decay=0.0)
    p["theta"].grad = np.ones(1)
    opt.step()
    # m_hat = v_hat = 1 so the step is lr / (1 + eps)
    np.testing.assert_allclose(p["theta"].data, [0.5 - 0.1 / (1 + 1e-8)], rtol=1e-14)


def test_adamw_quadratic_descent_matches_scalar_recurrence():
    p = _param([1.0])
    opt = AdamW(p, lr=0.01)
    theta, m, v = 1.0, 0.0, 0.0
    for t in range(1, 101):
        x = p["theta"]
        with Tape() as tape:
            loss = ops.sum(ops.mul(x, x))
        opt.zero_grad()
        backward(tape, loss)
        opt.step()
        g = 2 * theta
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert abs(p["theta"].data[0] - theta) < 1e-12
    assert abs(theta) < 0.5


def test_adamw_decoupled_weight_decay():
    p = _param([2.0])
    opt = AdamW(p, lr=0.1, weight_decay=0.5)
    p["theta"].grad = np.zeros(1)
    opt.step()
    np.testing.assert_allclose(p["theta"].data, [2.0 * (1 - 0.05)])


def test_nan_gradient_names_parameter():
    p = _param([1.0])
    opt = make_optimizer("adamw", p, 0.1)
    p["theta"].grad = np.array([np.nan])
    with pytest.raises(NumericalError, match="theta"):
        opt.step()


def test_sgd_momentum_recurrence():
    p = _param([1.0])
    opt = SGD(p, lr=0.1, momentum=0.5)
    for _ in range(2):
        p["theta"].grad = np.ones(1)
        opt.step()
    # velocities 1 then 1.5
    np.testing.assert_allclose(p["theta"].data, [1.0 - 0.1 - 0.15])


@settings(max_examples=25, deadline=None)
@given(st.floats(1e-4, 0.5), st.integers(1, 20))
def test_adamw_step_counter_and_moment_shapes(lr, steps):
    p = {"a": Tensor(np.ones((2, 3)), requires_grad=True), "b": Tensor(np.ones(4), requires_grad=True)}
    opt = AdamW(p, lr=lr)
    for i in range(steps):
        for t in p.values():
            t.grad = np.full(t.shape, float(i))
        opt.step()
        assert opt.state.step == i + 1
    for n, t in p.items():
        assert opt.state.exp_avg[n].shape == t.shape == opt.state.exp_avg_sq[n].shape
