import numpy as np
import pytest

from mstts.numerics import Tensor, backward, no_grad, ops, parameter, tensor
from mstts.numerics.gradcheck import finite_difference_check
from mstts.numerics.layers import BiLSTM, Conv1d, Conv2d, Linear, LSTMCell, _reversal_index, run_lstm


def test_backward_sum_is_ones():
    x = parameter(np.array([1.0, 2.0, 3.0]))
    g = backward(ops.sum_(x), params={"x": x})
    assert np.array_equal(g["x"], [1.0, 1.0, 1.0])


def test_backward_square():
    x = parameter(np.array(2.0, dtype=np.float64))
    g = backward(ops.mul(x, x), params={"x": x})
    assert g["x"] == pytest.approx(4.0)


def test_backward_rejects_non_scalar():
    x = parameter(np.ones(3))
    with pytest.raises(ValueError):
        backward(ops.mul(x, x))


def test_unreachable_param_gets_zeros():
    x = parameter(np.ones(3))
    y = parameter(np.ones((2, 2)))
    g = backward(ops.sum_(x), params={"x": x, "y": y})
    assert np.array_equal(g["y"], np.zeros((2, 2)))


def test_backward_linearity():
    rng = np.random.default_rng(0)
    x = parameter(rng.normal(size=(4,)).astype(np.float64))

    def loss_a():
        return ops.sum_(ops.mul(x, x))

    def loss_b():
        return ops.sum_(ops.tanh(x))

    ga = backward(loss_a(), params={"x": x})["x"]
    gb = backward(loss_b(), params={"x": x})["x"]
    gsum = backward(ops.add(loss_a(), loss_b()), params={"x": x})["x"]
    assert np.allclose(gsum, ga + gb, atol=1e-12)


def test_two_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(11)
    w1 = parameter(rng.normal(size=(5, 8), scale=0.5))
    b1 = parameter(np.zeros(8, dtype=np.float64))
    w2 = parameter(rng.normal(size=(8, 3), scale=0.5))
    b2 = parameter(np.zeros(3, dtype=np.float64))
    x = rng.normal(size=(4, 5))
    target = rng.normal(size=(4, 3))
    params = {"w1": w1, "b1": b1, "w2": w2, "b2": b2}

    def build():
        h = ops.tanh(ops.add(ops.matmul(tensor(x), w1), b1))
        y = ops.add(ops.matmul(h, w2), b2)
        d = ops.sub(y, target)
        return ops.mean(ops.mul(d, d))

    assert finite_difference_check(build, params) < 1e-4


def test_repeated_backward_does_not_accumulate_stale_grads():
    x = parameter(np.array([1.0, 2.0], dtype=np.float64))
    for _ in range(3):
        g = backward(ops.sum_(ops.mul(x, x)), params={"x": x})
    assert np.allclose(g["x"], 2 * x.data)


def test_same_tensor_used_twice_accumulates():
    x = parameter(np.array([1.0, 2.0], dtype=np.float64))
    y = ops.stack([x, x], axis=0)
    g = backward(ops.sum_(ops.mul(y, y)), params={"x": x})
    assert np.allclose(g["x"], 4 * x.data)


def test_no_grad_blocks_recording():
    x = parameter(np.ones(3))
    with no_grad():
        y = ops.mul(x, x)
    assert y._parents == ()
    g = backward(ops.sum_(ops.mul(x, 1.0)), params={"x": x})
    assert np.array_equal(g["x"], np.ones(3))


def test_default_dtype_is_float32():
    assert tensor([1, 2, 3]).dtype == np.float32
    assert tensor(np.ones(2, dtype=np.float64)).dtype == np.float64


OP_CASES = {
    "exp": lambda t: ops.exp(ops.mul(t, 0.1)),
    "log": lambda t: ops.log(ops.add(ops.mul(t, t), 1.0)),
    "sqrt": lambda t: ops.sqrt(ops.add(ops.mul(t, t), 1.0)),
    "tanh": ops.tanh,
    "sigmoid": ops.sigmoid,
    "softplus": ops.softplus,
    "relu": lambda t: ops.relu(ops.add(t, 0.05)),
    "clamp_min": lambda t: ops.clamp_min(t, 0.2),
    "softmax": lambda t: ops.softmax(t, axis=-1),
    "logsumexp": lambda t: ops.logsumexp(t, axis=-1),
    "mean": ops.mean,
    "l2_normalize": lambda t: ops.l2_normalize(t, axis=-1),
    "pow": lambda t: ops.pow_(ops.add(ops.mul(t, t), 0.5), 1.7),
    "div": lambda t: ops.div(1.0, ops.add(ops.mul(t, t), 1.0)),
    "getitem": lambda t: t[1:, :2],
    "transpose": lambda t: ops.transpose(t, (1, 0)),
    "reshape": lambda t: ops.reshape(t, (8,)),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    x = parameter(rng.normal(size=(2, 4)) + 0.1)
    fn = OP_CASES[name]

    def build():
        y = fn(x)
        return ops.sum_(ops.mul(y, y))

    assert finite_difference_check(build, {"x": x}) < 1e-4


def test_matmul_batched_gradient():
    rng = np.random.default_rng(5)
    a = parameter(rng.normal(size=(2, 1, 4)))
    b = parameter(rng.normal(size=(2, 4, 3)))

    def build():
        return ops.sum_(ops.mul(ops.matmul(a, b), 1.5))

    assert finite_difference_check(build, {"a": a, "b": b}) < 1e-4


def test_embedding_gradient_with_repeated_ids():
    rng = np.random.default_rng(9)
    table = parameter(rng.normal(size=(5, 3)))
    ids = np.array([[0, 2, 2], [4, 0, 1]])

    def build():
        y = ops.embedding(table, ids)
        return ops.sum_(ops.mul(y, y))

    assert finite_difference_check(build, {"table": table}) < 1e-4


def test_conv1d_gradients_all_paddings():
    rng = np.random.default_rng(2)
    for padding, dilation, stride in [
        ("same", 1, 1),
        ("same", 2, 1),
        ("causal", 4, 1),
        ("valid", 1, 2),
    ]:
        x = parameter(rng.normal(size=(2, 9, 3)))
        w = parameter(rng.normal(size=(3, 3, 4)))
        b = parameter(rng.normal(size=(4,)))

        def build():
            y = ops.conv1d(x, w, b, dilation=dilation, stride=stride, padding=padding)
            return ops.sum_(ops.mul(y, y))

        err = finite_difference_check(build, {"x": x, "w": w, "b": b})
        assert err < 1e-4, (padding, dilation, stride, err)


def test_conv1d_causal_sees_no_future():
    rng = np.random.default_rng(8)
    conv = Conv1d(rng, 1, 2, kernel=2, dilation=4, padding="causal", dtype=np.float64)
    x = rng.normal(size=(1, 20, 1))
    y0 = conv(tensor(x)).data.copy()
    x2 = x.copy()
    x2[0, 10:, 0] += 100.0
    y1 = conv(tensor(x2)).data
    assert np.array_equal(y0[:, :10], y1[:, :10])
    assert not np.allclose(y0[:, 10:], y1[:, 10:])


def test_conv2d_gradient_and_same_shape():
    rng = np.random.default_rng(4)
    x = parameter(rng.normal(size=(2, 6, 5, 3)))
    conv = Conv2d(rng, 3, 4, kernel=(3, 3), stride=(2, 2), dtype=np.float64)
    y = conv(x)
    assert y.shape == (2, 3, 3, 4)  # ceil(6/2), ceil(5/2)

    def build():
        out = conv(x)
        return ops.sum_(ops.mul(out, out))

    assert finite_difference_check(build, {"x": x, **conv.params("c")}) < 1e-4


def test_linear_broadcasts_over_time():
    rng = np.random.default_rng(1)
    lin = Linear(rng, 4, 6)
    y = lin(tensor(rng.normal(size=(2, 5, 4)).astype(np.float32)))
    assert y.shape == (2, 5, 6)
    assert set(lin.params("l")) == {"l.w", "l.b"}


def test_lstm_cell_gradcheck():
    rng = np.random.default_rng(6)
    cell = LSTMCell(rng, 3, 4, dtype=np.float64)
    x = parameter(rng.normal(size=(2, 5, 3)))
    params = {"x": x, **cell.params("c")}

    def build():
        y = run_lstm(cell, x, 2, 5)
        return ops.sum_(ops.mul(y, y))

    assert finite_difference_check(build, params) < 1e-4


def test_lstm_forget_bias_starts_open():
    cell = LSTMCell(np.random.default_rng(0), 2, 3)
    assert np.array_equal(cell.b.data[3:6], np.ones(3, dtype=np.float32))


def test_reversal_index_is_involution_and_fixes_padding():
    idx = _reversal_index(np.array([3, 5]), 5)
    assert idx.tolist() == [[2, 1, 0, 3, 4], [4, 3, 2, 1, 0]]
    twice = np.take_along_axis(idx, idx, axis=1)
    assert np.array_equal(twice, np.tile(np.arange(5), (2, 1)))


def test_bilstm_backward_direction_ignores_padding():
    # row with length 3 must produce the same backward features as the same
    # sequence without padding
    rng = np.random.default_rng(12)
    bi = BiLSTM(rng, 3, 4, dtype=np.float64)
    seq = rng.normal(size=(1, 3, 3))
    padded = np.zeros((1, 5, 3))
    padded[:, :3] = seq
    full = bi(tensor(padded), np.array([3])).data
    short = bi(tensor(seq), np.array([3])).data
    assert np.allclose(full[:, :3], short, atol=1e-12)


def test_dropout_inference_identity_and_scaling():
    rng = np.random.default_rng(0)
    x = tensor(np.ones((1000,)))
    y = ops.dropout(x, 0.0, rng)
    assert y is x or np.array_equal(y.data, x.data)
    z = ops.dropout(x, 0.5, np.random.default_rng(1))
    kept = z.data != 0
    assert np.all(z.data[kept] == 2.0)
    assert 0.3 < kept.mean() < 0.7
