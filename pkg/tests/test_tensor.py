import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from helpers import conv2d_oracle, gradcheck, leaf, weighted_sum
from vitgan import tensor as T
from vitgan.tensor import (BoundsError, ConfigError, ContractError, DimensionError, Tape, Tensor,
                           backward)

finite = st.floats(-3, 3, allow_nan=False, width=64)


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    a = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(T.matmul(a, b).data, [[3, 4], [5, 6]])


def test_matmul_hand_value():
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_gradcheck(rng):
    a, b = leaf(rng.standard_normal((4, 5))), leaf(rng.standard_normal((5, 3)))
    gradcheck(lambda: T.matmul(a, b).sum(), [a, b])


def test_matmul_batched_broadcast_gradcheck(rng):
    a, b = leaf(rng.standard_normal((2, 3, 4))), leaf(rng.standard_normal((4, 2)))
    gradcheck(lambda: weighted_sum(T.matmul(a, b)), [a, b])


def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


# --------------------------------------------------------------- softmax

def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)


def test_softmax_single_element():
    assert T.softmax(Tensor([[7.5]]), axis=-1).data.tolist() == [[1.0]]


def test_softmax_large_magnitude_matches_shifted():
    out = T.softmax(Tensor([1000.0, 0.0])).data
    shifted = np.exp(np.array([0.0, -1000.0]))
    np.testing.assert_allclose(out, shifted / shifted.sum())
    assert np.isfinite(out).all()


def test_softmax_bad_axis():
    with pytest.raises(DimensionError):
        T.softmax(Tensor(np.ones((2, 3))), axis=2)


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5),
                  elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)
    assert (out >= 0).all() and (out <= 1).all()


def test_softmax_gradcheck(rng):
    x = leaf(rng.standard_normal((3, 4)))
    gradcheck(lambda: weighted_sum(T.softmax(x, axis=0)), [x])


# ------------------------------------------------------------ elementwise

def test_relu_definition():
    assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0, 0, 2]


def test_leaky_relu_definition():
    np.testing.assert_allclose(T.leaky_relu(Tensor([-1.0]), 0.2).data, [-0.2])
    np.testing.assert_allclose(T.elementwise("leaky_relu", Tensor([-1.0])).data, [-0.2])


def test_sigmoid_gradient_at_zero():
    x = leaf([0.0])
    with Tape() as tape:
        y = T.sigmoid(x).sum()
    assert backward(y, tape)[x][0] == pytest.approx(0.25)
    gradcheck(lambda: T.sigmoid(x).sum(), [x])


def test_elementwise_dispatch():
    x, y = Tensor([1.0, -2.0]), Tensor([3.0, 4.0])
    assert T.elementwise("add", x, y).data.tolist() == [4, 2]
    assert T.elementwise("sub", x, y).data.tolist() == [-2, -6]
    assert T.elementwise("mul", x, y).data.tolist() == [3, -8]
    assert T.elementwise("scale", x, c=2.0).data.tolist() == [2, -4]
    np.testing.assert_allclose(T.elementwise("tanh", x).data, np.tanh([1.0, -2.0]))


def test_broadcast_failure():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


@pytest.mark.parametrize("op", ["relu", "leaky_relu", "tanh", "sigmoid", "gelu", "exp", "abs"])
def test_unary_gradcheck(op, rng):
    # keep clear of the kinks at 0
    x = leaf(rng.uniform(0.1, 1.5, (3, 4)) * rng.choice([-1, 1], (3, 4)))
    fn = {"relu": T.relu, "leaky_relu": T.leaky_relu, "tanh": T.tanh, "sigmoid": T.sigmoid,
          "gelu": T.gelu, "exp": T.exp, "abs": T.abs_}[op]
    gradcheck(lambda: weighted_sum(fn(x)), [x])


@pytest.mark.parametrize("op", [T.add, T.sub, T.mul, T.div])
def test_binary_broadcast_gradcheck(op, rng):
    a = leaf(rng.standard_normal((2, 3, 4)))
    b = leaf(rng.uniform(0.5, 2.0, (3, 1)))
    gradcheck(lambda: weighted_sum(op(a, b)), [a, b])


def test_power_log_gradcheck(rng):
    x = leaf(rng.uniform(0.5, 2.0, (5,)))
    gradcheck(lambda: weighted_sum(T.power(x, -0.5) + T.log(x)), [x])


# ------------------------------------------------------ reshape/transpose

def test_reshape_round_trip():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    back = T.reshape(T.reshape(x, (3, 2)), (2, 3))
    np.testing.assert_array_equal(back.data, x.data)


def test_transpose_definition():
    x = np.arange(6.0).reshape(2, 3)
    out = T.transpose(Tensor(x), (1, 0)).data
    for i in range(2):
        for j in range(3):
            assert out[j, i] == x[i, j]


def test_reshape_count_mismatch():
    with pytest.raises(DimensionError):
        T.reshape(Tensor(np.ones(6)), (4, 2))


def test_reshape_gradient_is_identity(rng):
    x = leaf(rng.standard_normal((2, 6)))
    with Tape() as tape:
        loss = T.reshape(x, (3, 4)).sum()
    np.testing.assert_array_equal(backward(loss, tape)[x], np.ones((2, 6)))
    gradcheck(lambda: weighted_sum(T.transpose(T.reshape(x, (3, 2, 2)), (2, 0, 1))), [x])


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=4, max_side=4),
                  elements=finite), st.randoms(use_true_random=False))
def test_transpose_inverse_is_bit_exact(x, r):
    perm = list(range(x.ndim))
    r.shuffle(perm)
    inv = list(np.argsort(perm))
    back = T.transpose(T.transpose(Tensor(x), perm), inv)
    np.testing.assert_array_equal(back.data, x)


# --------------------------------------------------------------- backward

def test_backward_sum_is_ones():
    x = leaf(np.zeros((2, 3)))
    with Tape() as tape:
        loss = x.sum()
    np.testing.assert_array_equal(backward(loss, tape)[x], np.ones((2, 3)))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square():
    x = leaf([1.0, 2.0, 3.0])
    with Tape() as tape:
        loss = (x * x).sum()
    assert backward(loss, tape)[x].tolist() == [2, 4, 6]


def test_backward_fan_out_accumulates():
    x = leaf(np.ones((3,)))
    with Tape() as tape:
        loss = x.sum() + x.sum()
    assert backward(loss, tape)[x].tolist() == [2, 2, 2]


def test_backward_non_scalar_is_contract_error():
    x = leaf(np.ones(3))
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        backward(y, tape)


def test_backward_detached_gives_empty_map():
    x = leaf(np.ones(3))
    with Tape():
        loss = x.sum().detach()
    assert backward(loss) == {}


def test_no_tape_records_nothing():
    x = leaf(np.ones(3))
    y = (x * x).sum()
    assert y._node is None and backward(y) == {}


def test_composite_conv_norm_attention_graph(rng):
    from vitgan.nn import AttentionConfig, BatchNorm2d, Conv2d, MultiHeadAttention
    conv = Conv2d(2, 4, 3, rng, padding=1).astype(np.float64)
    bn = BatchNorm2d(4).astype(np.float64)
    mha = MultiHeadAttention(AttentionConfig(4, 2), rng).astype(np.float64)
    x = leaf(rng.standard_normal((2, 2, 3, 3)))

    def fn():
        h = bn(conv(x))  # (2, 4, 3, 3)
        tokens = T.transpose(T.reshape(h, (2, 4, 9)), (0, 2, 1))
        return weighted_sum(mha(tokens))

    params = conv.parameters() + bn.parameters() + mha.parameters() + [x]
    gradcheck(fn, params, max_coords=12)


def test_debug_guard_catches_non_finite_from_finite_inputs():
    assert T.DEBUG_CHECKS
    with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
        T.exp(Tensor([1e4]))


# -------------------------------------------------------------- embedding

def test_embedding_lookup_exact(rng):
    table = Tensor(rng.standard_normal((5, 3)))
    out = T.embedding(table, np.array([3, 0]))
    np.testing.assert_array_equal(out.data[0], table.data[3])
    np.testing.assert_array_equal(out.data[1], table.data[0])


def test_embedding_repeated_row_accumulates(rng):
    table = leaf(rng.standard_normal((4, 2)))
    with Tape() as tape:
        loss = T.embedding(table, np.array([1, 1, 2])).sum()
    g = backward(loss, tape)[table]
    np.testing.assert_array_equal(g, [[0, 0], [2, 2], [1, 1], [0, 0]])
    gradcheck(lambda: weighted_sum(T.embedding(table, np.array([1, 1, 2]))), [table])


def test_embedding_out_of_range():
    with pytest.raises(BoundsError):
        T.embedding(Tensor(np.ones((3, 2))), np.array([3]))
    with pytest.raises(BoundsError):
        T.embedding(Tensor(np.ones((3, 2))), np.array([-1]))


# ------------------------------------------------------------------- conv

def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 4, 4))
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv_all_ones():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.data.reshape(-1).tolist() == [9.0]


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv_matches_loop_oracle(stride, padding, rng):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding).data
    np.testing.assert_allclose(out, conv2d_oracle(x, w, b, stride, padding), atol=1e-6)


def test_conv_non_integral_output_is_config_error():
    with pytest.raises(ConfigError):
        T.conv2d(Tensor(np.ones((1, 1, 6, 6))), Tensor(np.ones((1, 1, 3, 3))), stride=2)


def test_conv_gradcheck(rng):
    x = leaf(rng.standard_normal((2, 2, 5, 5)))
    w = leaf(rng.standard_normal((3, 2, 3, 3)))
    b = leaf(rng.standard_normal(3))
    gradcheck(lambda: weighted_sum(T.conv2d(x, w, b, 2, 1)), [x, w, b])


def test_conv_transpose_unit_kernel(rng):
    x = rng.standard_normal((1, 2, 3, 3))
    w = np.zeros((2, 2, 1, 1))
    w[0, 0] = w[1, 1] = 1.0
    np.testing.assert_array_equal(T.conv_transpose2d(Tensor(x), Tensor(w)).data, x)


def test_conv_transpose_block_scatter():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = T.conv_transpose2d(Tensor(x), Tensor(np.ones((1, 1, 2, 2))), stride=2).data[0, 0]
    expected = np.kron(x[0, 0], np.ones((2, 2)))
    np.testing.assert_array_equal(out, expected)


def test_conv_transpose_equals_conv_input_gradient(rng):
    x = leaf(rng.standard_normal((2, 3, 8, 8)))
    w = rng.standard_normal((4, 3, 4, 4))
    y = rng.standard_normal((2, 4, 4, 4))
    with Tape() as tape:
        loss = (T.conv2d(x, Tensor(w), stride=2, padding=1) * Tensor(y)).sum()
    grad_x = backward(loss, tape)[x]
    # conv2d weight (c_out, c_in, k, k) read as conv_transpose weight (c_in', c_out')
    adj = T.conv_transpose2d(Tensor(y), Tensor(w), stride=2, padding=1).data
    np.testing.assert_allclose(adj, grad_x, atol=1e-10)


@given(st.integers(0, 10_000), st.sampled_from([(1, 0), (2, 1), (1, 1)]))
def test_conv_transpose_is_adjoint(seed, sp):
    stride, pad = sp
    r = np.random.default_rng(seed)
    x = r.standard_normal((1, 2, 6, 6))
    w = r.standard_normal((3, 2, 4, 4)) if stride == 2 else r.standard_normal((3, 2, 3, 3))
    cx = T.conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad).data
    y = r.standard_normal(cx.shape)
    cty = T.conv_transpose2d(Tensor(y), Tensor(w), stride=stride, padding=pad).data
    assert np.sum(cx * y) == pytest.approx(np.sum(x * cty), abs=1e-5)


def test_conv_transpose_doubles_size():
    out = T.conv_transpose2d(Tensor(np.ones((1, 2, 8, 8))), Tensor(np.ones((2, 3, 4, 4))),
                             stride=2, padding=1)
    assert out.shape == (1, 3, 16, 16)
    assert T.conv_transpose_output_size(8, 4, 2, 1) == 16


def test_conv_transpose_gradcheck(rng):
    x = leaf(rng.standard_normal((2, 2, 3, 3)))
    w = leaf(rng.standard_normal((2, 3, 4, 4)))
    b = leaf(rng.standard_normal(3))
    gradcheck(lambda: weighted_sum(T.conv_transpose2d(x, w, b, 2, 1)), [x, w, b])


def test_conv_transpose_invalid_config():
    with pytest.raises(ConfigError):
        T.conv_transpose2d(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones((1, 1, 1, 1))),
                           stride=1, padding=1)


# ---------------------------------------------------------------- BCE

def test_bce_with_logits_gradcheck(rng):
    z = leaf(rng.standard_normal((2, 1, 3, 3)) * 3)
    gradcheck(lambda: T.bce_with_logits(z, 1.0) + T.bce_with_logits(z, 0.0) * 0.3, [z])


def test_bce_with_logits_matches_direct_formula(rng):
    z = rng.standard_normal(20) * 4
    for t in (0.0, 1.0):
        p = 1 / (1 + np.exp(-z))
        direct = -np.mean(t * np.log(p) + (1 - t) * np.log(1 - p))
        assert T.bce_with_logits(Tensor(z), t).item() == pytest.approx(direct, rel=1e-12)
