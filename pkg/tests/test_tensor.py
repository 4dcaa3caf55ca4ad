import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.signal import correlate

from retina_grader import tensor as T
from retina_grader.tensor import ShapeError, Tensor


def naive_conv(x, k, b, stride, pads):
    """Direct loop oracle: zero-pad, correlate each filter, subsample."""
    pt, pb, pl, pr = pads
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    n, f = x.shape[0], k.shape[0]
    outs = []
    for i in range(n):
        maps = [correlate(xp[i], k[j], mode="valid")[0] + b[j] for j in range(f)]
        outs.append(np.stack(maps)[:, ::stride, ::stride])
    return np.stack(outs)


@pytest.mark.parametrize("stride,kh,h", [(1, 3, 7), (2, 3, 8), (2, 3, 7), (1, 1, 5), (2, 1, 6)])
def test_conv_same_matches_direct_correlation(stride, kh, h):
    rng = np.random.default_rng(stride * 10 + kh)
    x = rng.normal(size=(2, 3, h, h))
    k = rng.normal(size=(4, 3, kh, kh))
    b = rng.normal(size=4)
    out = T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, "same").data
    oh = -(-h // stride)
    total = max((oh - 1) * stride + kh - h, 0)
    pads = (total // 2, total - total // 2) * 2
    ref = naive_conv(x, k, b, stride, pads)
    assert out.shape == (2, 4, oh, oh)
    np.testing.assert_allclose(out, ref, rtol=1e-10, atol=1e-10)


def test_conv_valid_shrinks_by_kernel():
    x = np.arange(2 * 1 * 5 * 5, dtype=np.float64).reshape(2, 1, 5, 5)
    k = np.ones((1, 1, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(1)), 1, "valid").data
    assert out.shape == (2, 1, 3, 3)
    assert out[0, 0, 0, 0] == x[0, 0, :3, :3].sum()


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ShapeError, match="channels"):
        T.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))), Tensor(np.zeros(2)))


def test_conv_single_pixel_same_padding():
    out = T.conv2d(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 1.0


def test_avg_pool_counts_padding_as_zero():
    x = np.ones((1, 1, 4, 4))
    out = T.avg_pool3x3(Tensor(x), 1).data[0, 0]
    assert out[0, 0] == pytest.approx(4 / 9)
    assert out[0, 1] == pytest.approx(6 / 9)
    assert out[1, 1] == pytest.approx(1.0)


def test_dense_and_shape_errors():
    x, w, b = np.ones((2, 3)), np.full((3, 4), 0.5), np.arange(4.0)
    np.testing.assert_allclose(T.dense(Tensor(x), Tensor(w), Tensor(b)).data, 1.5 + np.arange(4.0)[None].repeat(2, 0))
    with pytest.raises(ShapeError):
        T.dense(Tensor(np.ones((2, 5))), Tensor(w), Tensor(b))


def test_softmax_is_stable_and_normalised():
    z = np.array([[1000.0, 1000.0], [-1000.0, 0.0]])
    p = T.softmax(Tensor(z)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    np.testing.assert_allclose(p[0], [0.5, 0.5])
    assert np.isfinite(p).all()


def test_cross_entropy_clamps_and_averages():
    probs = Tensor(np.array([[1.0, 0.0], [0.5, 0.5]]))
    loss = T.categorical_cross_entropy(probs, [1, 0]).item()
    assert loss == pytest.approx((-np.log(1e-7) - np.log(0.5)) / 2)
    with pytest.raises(ValueError):
        T.categorical_cross_entropy(probs, [2, 0])


def test_dropout_modes():
    x = Tensor(np.ones((200, 50), dtype=np.float32))
    assert T.dropout(x, 0.5, "infer") is x
    y = T.dropout(x, 0.5, "train", np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.05
    with pytest.raises(ValueError):
        T.dropout(x, 0.5, "train")


def test_float32_storage_by_default():
    assert Tensor([1, 2, 3]).data.dtype == np.float32
    assert Tensor(np.zeros(2)).data.dtype == np.float64


def test_backward_resets_instead_of_accumulating():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    for _ in range(2):
        T.backward(T.tensor_sum(T.mul_const(w, np.array([3.0, 4.0]))))
    np.testing.assert_array_equal(w.grad, [3.0, 4.0])


def test_backward_needs_scalar_and_zero_fills_unreached_inputs():
    w = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ShapeError):
        T.backward(T.relu(w))
    T.backward(T.tensor_sum(w), inputs=[w, unused])
    np.testing.assert_array_equal(unused.grad, 0.0)


def test_no_graph_without_requires_grad():
    y = T.relu(Tensor(np.ones(3)))
    assert not y.requires_grad and y._parents == ()


def test_shared_input_gradients_sum():
    x = Tensor(np.array([2.0]), requires_grad=True)
    T.backward(T.tensor_sum(T.add(x, x)))
    assert x.grad[0] == 2.0


def test_grad_check_detects_a_wrong_backward():
    def broken(x):
        out = T._result(x.data * 2.0, (x,), "broken", lambda g: (g * 3.0,))
        return T.tensor_sum(out)

    assert T.grad_check(broken, np.ones(4)) > 0.1


def test_grad_check_skips_relu_kinks():
    # the coordinate at 0 straddles the kink; it must not count
    err = T.grad_check(lambda x: T.tensor_sum(T.relu(x)), np.array([0.0, 1.0, -1.0]))
    assert err < 1e-9


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 2),
    c=st.integers(1, 3),
    h=st.integers(1, 6),
    f=st.integers(1, 3),
    stride=st.sampled_from([1, 2]),
    seed=st.integers(0, 2**16),
)
def test_conv_gradients_property(n, c, h, f, stride, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, c, h, h))
    k = rng.normal(size=(f, c, 3, 3))
    b = rng.normal(size=f)
    oh = -(-h // stride)
    proj = rng.normal(size=(n, f, oh, oh))
    err_x = T.grad_check(lambda t: T.tensor_sum(T.mul_const(T.conv2d(t, Tensor(k), Tensor(b), stride), proj)), x)
    err_k = T.grad_check(lambda t: T.tensor_sum(T.mul_const(T.conv2d(Tensor(x), t, Tensor(b), stride), proj)), k)
    assert err_x < 1e-6 and err_k < 1e-6


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 7), stride=st.sampled_from([1, 2]), seed=st.integers(0, 2**16))
def test_avg_pool_gradient_property(h, stride, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 2, h, h))
    oh = -(-h // stride)
    proj = rng.normal(size=(1, 2, oh, oh))
    assert T.grad_check(lambda t: T.tensor_sum(T.mul_const(T.avg_pool3x3(t, stride), proj)), x) < 1e-8
