import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from cstn import tensor as T
from cstn.gradcheck import check
from cstn.tensor import ShapeError, Tensor


def grad_of(fn, *arrays):
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    T.backward(fn(*leaves))
    return [leaf.grad for leaf in leaves]


# ---------------------------------------------------------------- elementwise

def test_add_values():
    np.testing.assert_array_equal(T.add(T.tensor([1, 2]), T.tensor([3, 4])).data, [4, 6])


def test_mul_by_one_is_exact():
    x = np.random.default_rng(0).standard_normal(10).astype(np.float32)
    np.testing.assert_array_equal(T.mul(T.tensor(x), 1.0).data, x)


def test_grad_of_sum_of_squares():
    (g,) = grad_of(lambda x: T.tsum(x * x), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(g, [2, 4, 6])


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        T.add(T.zeros((2, 3)), T.zeros((4,)))


def test_scalar_operands_broadcast():
    x = T.tensor([1.0, 2.0], requires_grad=True)
    y = 3.0 - x / 2.0
    np.testing.assert_allclose(y.data, [2.5, 2.0])
    T.backward(T.tsum(y))
    np.testing.assert_allclose(x.grad, [-0.5, -0.5])


# ---------------------------------------------------------------- matmul / conv

def test_matmul_identity_and_hand_case():
    a = T.tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal(T.matmul(a, T.tensor(np.eye(2))).data, a.data)
    np.testing.assert_array_equal(T.matmul(a, T.tensor([[5], [6]])).data, [[17], [39]])


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(T.zeros((2, 3)), T.zeros((4, 2)))


def test_matmul_gradcheck_4x5x3():
    rng = np.random.default_rng(1)
    r = check("matmul", T.matmul, [rng.uniform(-1, 1, (4, 5)), rng.uniform(-1, 1, (5, 3))])
    assert r.max_rel_err < 1e-3


def test_conv_1x1_unit_kernel_is_identity():
    x = np.random.default_rng(2).standard_normal((1, 3, 5, 4)).astype(np.float32)
    w = np.zeros((3, 3, 1, 1), np.float32)
    w[[0, 1, 2], [0, 1, 2]] = 1
    out = T.conv2d(T.tensor(x), T.tensor(w), T.zeros(3))
    np.testing.assert_array_equal(out.data, x)


def test_conv_averaging_constant_with_reflect_border():
    x = np.full((1, 1, 6, 7), 2.5, np.float32)
    w = np.full((1, 1, 3, 3), 1 / 9, np.float32)
    out = T.conv2d(T.tensor(x), T.tensor(w), padding_mode="reflect")
    np.testing.assert_allclose(out.data, 2.5, atol=1e-6)


def test_conv_zero_padding_darkens_border():
    x = np.ones((1, 1, 5, 5), np.float32)
    w = np.full((1, 1, 3, 3), 1 / 9, np.float32)
    out = T.conv2d(T.tensor(x), T.tensor(w)).data[0, 0]
    assert out[2, 2] == pytest.approx(1.0)
    assert out[0, 0] == pytest.approx(4 / 9)


def test_conv_matches_direct_correlation():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 2, 6, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    out = T.conv2d(T.tensor(x), T.tensor(w), padding="valid").data
    ref = np.zeros((2, 3, 4, 3))
    for n in range(2):
        for o in range(3):
            for i in range(4):
                for j in range(3):
                    ref[n, o, i, j] = np.sum(x[n, :, i:i + 3, j:j + 3] * w[o])
    np.testing.assert_allclose(out, ref, atol=1e-5)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError, match="channels"):
        T.conv2d(T.zeros((1, 2, 4, 4)), T.zeros((1, 3, 3, 3)))


def test_conv_even_kernel_rejected():
    with pytest.raises(ShapeError, match="odd"):
        T.conv2d(T.zeros((1, 1, 4, 4)), T.zeros((1, 1, 2, 2)))


def test_conv_nhwc_agrees_with_nchw():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 7, 6)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    a = T.conv2d(T.tensor(x), T.tensor(w)).data
    b = T.conv2d_nhwc(T.tensor(x.transpose(0, 2, 3, 1)), T.tensor(w)).data.transpose(0, 3, 1, 2)
    np.testing.assert_array_equal(a, b)


def test_conv_gradcheck_spec_sizes():
    rng = np.random.default_rng(5)
    r = check("conv2d", T.conv2d, [rng.uniform(-1, 1, (1, 2, 6, 6)), rng.uniform(-1, 1, (3, 2, 3, 3)),
                                   rng.uniform(-1, 1, 3)])
    assert r.max_rel_err < 1e-3


# ---------------------------------------------------------------- layer norm / softmax / gelu

def test_layer_norm_constant_row_collapses_to_beta():
    out = T.layer_norm(T.tensor([[1.0, 1.0, 1.0]]), T.ones(3), T.zeros(3))
    np.testing.assert_array_equal(out.data, [[0, 0, 0]])


def test_layer_norm_population_variance():
    out = T.layer_norm(T.tensor([[0.0, 2.0]]), T.ones(2), T.zeros(2))
    np.testing.assert_allclose(out.data, [[-1, 1]], atol=1e-5)


def test_layer_norm_gradcheck():
    rng = np.random.default_rng(6)
    r = check("layer_norm", T.layer_norm, [rng.uniform(-1, 1, (2, 4, 8)), rng.uniform(-1, 1, 8),
                                           rng.uniform(-1, 1, 8)])
    assert r.max_rel_err < 1e-3


def test_softmax_cases():
    np.testing.assert_allclose(T.softmax(T.tensor([0.0, 0.0])).data, [0.5, 0.5])
    big = T.softmax(T.tensor([3.0, 1003.0])).data
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, [0, 1], atol=1e-6)


def test_gelu_zero_and_tanh_form():
    assert T.gelu(T.tensor([0.0])).data[0] == 0
    x = np.linspace(-3, 3, 13)
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(T.gelu(T.tensor(x)).data, ref, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=3, min_side=1, max_side=6),
                  elements=st.floats(-50, 50, width=32)),
       st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    p = T.softmax(T.tensor(x), axis=-1).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
    q = T.softmax(T.tensor(x + np.float32(c)), axis=-1).data
    np.testing.assert_allclose(p, q, atol=1e-5)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 5), st.integers(1, 3)),
                  elements=st.floats(-1e3, 1e3, width=32)))
def test_no_nan_from_bounded_inputs(x):
    t = T.tensor(x)
    outs = [T.gelu(t), T.softmax(t, axis=1), T.layer_norm(t, T.ones(x.shape[-1]), T.zeros(x.shape[-1])),
            T.tabs(t), T.texp(t * 0.01)]
    for o in outs:
        assert np.all(np.isfinite(o.data))


@settings(max_examples=30, deadline=None)
@given(st.permutations([0, 1, 2, 3]), st.integers(0, 2 ** 31 - 1))
def test_reshape_and_permute_round_trip_exactly(perm, seed):
    x = np.random.default_rng(seed).standard_normal((2, 3, 4, 5)).astype(np.float32)
    t = T.tensor(x)
    back = T.permute(T.permute(t, perm), tuple(np.argsort(perm)))
    np.testing.assert_array_equal(back.data, x)
    np.testing.assert_array_equal(T.reshape(T.reshape(t, (6, 20)), x.shape).data, x)


# ---------------------------------------------------------------- tape / backward

def test_sum_grad_is_ones():
    (g,) = grad_of(T.tsum, np.zeros(3))
    np.testing.assert_array_equal(g, [1, 1, 1])


def test_disconnected_leaf_gets_zero_grad():
    x = T.tensor([1.0, 2.0], requires_grad=True)
    y = T.tensor([5.0, 6.0, 7.0], requires_grad=True)
    T.backward(T.tsum(x * x), [x, y])
    np.testing.assert_array_equal(y.grad, np.zeros(3))


def test_backward_twice_fails():
    x = T.tensor([1.0], requires_grad=True)
    loss = T.tsum(x * 2.0)
    T.backward(loss)
    with pytest.raises(RuntimeError):
        T.backward(loss)


def test_backward_needs_scalar():
    x = T.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        T.backward(x * 2.0)


def test_tape_cleared_after_backward():
    x = T.tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.tsum(T.gelu(x) * x))
    assert len(T.get_tape()) == 0


def test_tape_records_in_execution_order():
    T.get_tape().clear()
    x = T.tensor([1.0, 2.0], requires_grad=True)
    y = T.tsum(T.texp(x) + x)
    names = [r.name for r in T.get_tape().records]
    assert names == ["exp", "add", "sum"]
    T.backward(y)


def test_no_grad_records_nothing():
    x = T.tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad
    assert len(T.get_tape()) == 0


def test_gradients_accumulate_over_reused_input():
    (g,) = grad_of(lambda x: T.tsum(x * 2.0 + x * 3.0), np.ones(2))
    np.testing.assert_allclose(g, [5, 5])


def test_composite_pipeline_gradcheck():
    rng = np.random.default_rng(7)

    def pipe(x, w):
        f = T.conv2d(x, w).permute(0, 2, 3, 1)
        return T.softmax(T.layer_norm(f, T.ones(3), T.zeros(3)), axis=-1)

    r = check("pipe", pipe, [rng.uniform(-1, 1, (1, 2, 5, 5)), rng.uniform(-1, 1, (3, 2, 3, 3))])
    assert r.max_rel_err < 1e-3


def test_default_dtype_switch():
    with T.default_dtype(np.float64):
        assert T.zeros(2).dtype == np.float64
    assert T.zeros(2).dtype == np.float32


# ---------------------------------------------------------------- shape ops

def test_concat_and_slice_grads():
    a, b = grad_of(lambda a, b: T.tsum(T.concat([a, b], axis=0)[1:] * 2.0), np.ones((2, 2)), np.ones((1, 2)))
    np.testing.assert_array_equal(a, [[0, 0], [2, 2]])
    np.testing.assert_array_equal(b, [[2, 2]])


def test_pad_reflect_matches_numpy():
    x = np.arange(12, dtype=np.float32).reshape(3, 4)
    out = T.pad(T.tensor(x), ((1, 2), (2, 1)), mode="reflect").data
    np.testing.assert_array_equal(out, np.pad(x, ((1, 2), (2, 1)), mode="reflect"))


def test_roll_matches_numpy():
    x = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    np.testing.assert_array_equal(T.roll(T.tensor(x), (1, -2), (1, 2)).data, np.roll(x, (1, -2), (1, 2)))


def test_take_accumulates_repeated_rows():
    (g,) = grad_of(lambda t: T.tsum(T.take(t, np.array([0, 0, 2]))), np.zeros((3, 2)))
    np.testing.assert_array_equal(g, [[2, 2], [0, 0], [1, 1]])
