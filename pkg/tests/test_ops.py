import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sacseg import ops
from sacseg.tensor import ShapeError, Tensor
from sacseg.verify import conv2d_loops


def conv_inputs(draw, max_k=7):
    seed = draw(st.integers(0, 2 ** 32 - 1))
    rng = np.random.default_rng(seed)
    n, c, o = draw(st.integers(1, 2)), draw(st.integers(1, 4)), draw(st.integers(1, 4))
    h, w = draw(st.integers(1, 8)), draw(st.integers(1, 8))
    k = draw(st.sampled_from([k for k in (1, 3, 5, 7) if k <= max_k]))
    return rng.normal(size=(n, c, h, w)), rng.normal(size=(o, c, k, k)), rng.normal(size=o)


def rel(a, b):
    a, b = np.asarray(getattr(a, "data", a)), np.asarray(getattr(b, "data", b))
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-300)


# -- convolution -------------------------------------------------------------

def test_identity_kernel():
    x = Tensor(np.arange(9.0).reshape(1, 1, 3, 3))
    y = ops.conv2d_direct(x, Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(y.data, x.data)


def test_all_ones_window_sums():
    y = ops.conv2d_direct(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1)
    assert y.data[0, 0, 1, 1] == 9.0
    for p, q in [(0, 0), (0, 2), (2, 0), (2, 2)]:
        assert y.data[0, 0, p, q] == 4.0


def test_direct_matches_scalar_loops(rng):
    x, w, b = rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    got = ops.conv2d_direct(Tensor(x), Tensor(w), Tensor(b), padding=1)
    assert rel(got, conv2d_loops(x, w, b, 1, 1)) <= 1e-12


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (2, 0), (3, 2)])
def test_strided_conv_matches_loops(rng, stride, padding):
    x, w, b = rng.normal(size=(2, 2, 7, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    ref = conv2d_loops(x, w, b, stride, padding)
    assert rel(ops.conv2d_direct(Tensor(x), Tensor(w), Tensor(b), stride, padding), ref) <= 1e-12
    assert rel(ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding), ref) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_im2col_conv_equals_direct(data):
    x, w, b = conv_inputs(data.draw)
    k = w.shape[-1]
    direct = ops.conv2d_direct(Tensor(x), Tensor(w), Tensor(b), 1, k // 2)
    assert rel(ops.conv2d_im2col(Tensor(x), Tensor(w), Tensor(b)), direct) <= 1e-10
    assert rel(ops.conv2d(Tensor(x), Tensor(w), Tensor(b), 1, k // 2), direct) <= 1e-10


def test_conv_rejects_channel_mismatch(rng):
    with pytest.raises(ShapeError, match="channels"):
        ops.conv2d_direct(Tensor(rng.normal(size=(1, 2, 4, 4))), Tensor(rng.normal(size=(1, 3, 3, 3))))


def test_conv_rejects_even_kernel(rng):
    with pytest.raises(ValueError, match="odd"):
        ops.conv2d_direct(Tensor(rng.normal(size=(1, 1, 4, 4))), Tensor(rng.normal(size=(1, 1, 2, 2))))


def test_conv_rejects_empty_output(rng):
    with pytest.raises(ShapeError):
        ops.conv2d_direct(Tensor(rng.normal(size=(1, 1, 2, 2))), Tensor(rng.normal(size=(1, 1, 3, 3))))


def test_conv_is_deterministic(rng):
    x, w = Tensor(rng.normal(size=(2, 3, 6, 6))), Tensor(rng.normal(size=(2, 3, 3, 3)))
    a = ops.conv2d_direct(x, w, padding=1).data
    b = ops.conv2d_direct(x, w, padding=1).data
    assert a.tobytes() == b.tobytes()


# -- im2col --------------------------------------------------------------------

def test_im2col_degenerate():
    out = ops.im2col(Tensor(np.full((1, 1, 1, 1), 2.5)), 1)
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 2.5


def test_im2col_corner_window():
    out = ops.im2col(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), 3, padding=1)
    np.testing.assert_array_equal(out.data[0, :, 0, 0], [0, 0, 0, 0, 1, 2, 0, 3, 4])


def test_im2col_channel_order(rng):
    x = rng.normal(size=(1, 2, 4, 5))
    cols = ops.im2col(Tensor(x), 3).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    for c in range(2):
        for i in range(3):
            for j in range(3):
                np.testing.assert_array_equal(cols[0, ops.col_index(c, i, j, 3)], xp[0, c, i:i + 4, j:j + 5])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([1, 3, 5, 7]))
def test_im2col_centre_inverse(seed, k):
    x = np.random.default_rng(seed).normal(size=(2, 3, 5, 4))
    cols = ops.im2col(Tensor(x), k).data
    np.testing.assert_array_equal(ops.im2col_center(cols, 3, k), x)


def test_im2col_rejects_even_kernel(rng):
    with pytest.raises(ValueError):
        ops.im2col(Tensor(rng.normal(size=(1, 1, 3, 3))), 2)


def test_im2col_requires_same_padding(rng):
    with pytest.raises(ValueError):
        ops.im2col(Tensor(rng.normal(size=(1, 1, 3, 3))), 3, padding=0)


# -- pointwise -------------------------------------------------------------------

def test_mul_by_ones_is_identity(rng):
    x = Tensor(rng.normal(size=(2, 3, 4)))
    np.testing.assert_array_equal(ops.pointwise("mul", x, np.ones((2, 3, 4))).data, x.data)


def test_sigmoid_of_zero():
    assert ops.pointwise("sigmoid", Tensor(np.zeros(1))).data[0] == 0.5


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-60, 60), min_size=1, max_size=16))
def test_sigmoid_strictly_inside_unit_interval(vals):
    s = ops.sigmoid(Tensor(np.array(vals))).data
    assert np.all(s > 0) and np.all(s < 1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 7))
def test_log_softmax_normalises(seed, c):
    v = np.random.default_rng(seed).normal(scale=10, size=(2, c, 3, 2))
    out = ops.pointwise("log_softmax_over_channels", Tensor(v)).data
    np.testing.assert_allclose(np.exp(out).sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_broadcasting_over_channel_and_kernel_blocks(rng):
    x = rng.normal(size=(2, 4, 3, 3))
    a = rng.normal(size=(2, 1, 3, 3))
    np.testing.assert_array_equal(ops.mul(Tensor(x), Tensor(a)).data, x * a)


def test_non_broadcastable_rejected(rng):
    with pytest.raises(ShapeError):
        ops.add(Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(4,))))


def test_leaky_activation_slope():
    out = ops.pointwise("relu_like_activation", Tensor(np.array([-2.0, 3.0]))).data
    np.testing.assert_array_equal(out, [-0.2, 3.0])


def test_unknown_pointwise_kind():
    with pytest.raises(ValueError):
        ops.pointwise("tanh", Tensor(np.zeros(1)))


# -- pooling --------------------------------------------------------------------------

def test_global_avg_of_constant():
    out = ops.pool(Tensor(np.full((2, 3, 4, 5), 1.75)), "global_avg")
    assert out.shape == (2, 3, 1, 1)
    np.testing.assert_array_equal(out.data, 1.75)


def test_max_pool_3x3_stride1():
    out = ops.pool(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), "max", k=3)
    np.testing.assert_array_equal(out.data[0, 0], [[4, 4], [4, 4]])


def test_max_pool_matches_window_max(rng):
    x = rng.normal(size=(1, 2, 6, 5))
    out = ops.max_pool(Tensor(x), 3).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    for p in range(6):
        for q in range(5):
            np.testing.assert_array_equal(out[0, :, p, q], xp[0, :, p:p + 3, q:q + 3].max(axis=(1, 2)))


def test_avg_downsample_2x2():
    out = ops.pool(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), "avg_downsample_2x2")
    np.testing.assert_array_equal(out.data, [[[[2.5]]]])


def test_pool_rejects_empty():
    with pytest.raises(ShapeError):
        ops.pool(Tensor(np.zeros((1, 1, 0, 3))), "global_avg")


def test_unknown_pool_kind():
    with pytest.raises(ValueError):
        ops.pool(Tensor(np.zeros((1, 1, 2, 2))), "median")


# -- transposed convolution --------------------------------------------------------

def test_conv_transpose_doubles_resolution(rng):
    out = ops.conv_transpose2d(Tensor(rng.normal(size=(1, 3, 4, 5))), Tensor(rng.normal(size=(3, 2, 4, 4))))
    assert out.shape == (1, 2, 8, 10)


def test_conv_transpose_is_adjoint_of_strided_conv(rng):
    # <convT(x), y> == <x, conv(y)> with matching kernel
    x = rng.normal(size=(1, 3, 4, 4))
    y = rng.normal(size=(1, 2, 8, 8))
    w = rng.normal(size=(3, 2, 4, 4))
    up = ops.conv_transpose2d(Tensor(x), Tensor(w)).data
    # strided cross-correlation with the same (in=2 -> out=3) kernel, even size done by loops
    down = np.zeros_like(x)
    yp = np.pad(y, ((0, 0), (0, 0), (1, 1), (1, 1)))
    for p in range(4):
        for q in range(4):
            patch = yp[0, :, 2 * p:2 * p + 4, 2 * q:2 * q + 4]
            down[0, :, p, q] = np.einsum("oij,coij->c", patch, w)
    assert abs(np.vdot(up, y) - np.vdot(x, down)) <= 1e-10 * abs(np.vdot(up, y))
