"""Reverse-mode gradients against central finite differences."""
import numpy as np
import pytest

from ilmpq import autodiff as ad

RTOL = 1e-3


def numeric_grad(f, arr, eps=1e-6):
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + eps
        hi = f()
        arr[i] = old - eps
        lo = f()
        arr[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def check(op, *shapes, seed=0, positive_gap=False):
    """Compare d<R, op(inputs)>/d input with finite differences for every input."""
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]
    if positive_gap:
        # keep inputs away from relu / max kinks so finite differences are valid
        arrays = [np.where(np.abs(a) < 0.05, 0.3, a) for a in arrays]
    out = op(*[ad.Tensor(a) for a in arrays])
    r = rng.standard_normal(out.shape)

    def scalar():
        return float((op(*[ad.Tensor(a) for a in arrays]).data * r).sum())

    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    op(*tensors).backward(r)
    for t, a in zip(tensors, arrays):
        np.testing.assert_allclose(t.grad, numeric_grad(scalar, a), rtol=RTOL, atol=1e-7)


def test_dense_grad():
    check(ad.dense, (5, 4), (3, 4), (3,))


@pytest.mark.parametrize("stride, padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_grad(stride, padding):
    check(lambda x, w, b: ad.conv2d(x, w, b, stride, padding), (2, 3, 6, 6), (4, 3, 3, 3), (4,))


def test_relu_grad():
    check(ad.relu, (4, 7), positive_gap=True)


def test_maxpool_grad():
    check(lambda x: ad.maxpool2d(x, 2), (2, 3, 4, 4), seed=3)


def test_avgpool_grad():
    check(lambda x: ad.avgpool2d(x, 2), (2, 3, 4, 4))


def test_reshape_and_scale_grad():
    check(lambda x: ad.scale(ad.reshape(x, (3, 8)), 2.5), (2, 3, 4))


def test_softmax_cross_entropy_grad():
    labels = np.array([0, 2, 1, 2])
    check(lambda z: ad.softmax_cross_entropy(z, labels), (4, 3))


def test_composite_network_grad():
    def net(x, w1, w2):
        h = ad.relu(ad.conv2d(x, w1, ad.Tensor(np.zeros(2)), 1, 1))
        h = ad.reshape(ad.avgpool2d(h, 2), (2, -1))
        return ad.dense(h, w2, ad.Tensor(np.zeros(3)))
    check(net, (2, 1, 4, 4), (2, 1, 3, 3), (3, 8), seed=5)


def test_straight_through_masks_gradient():
    x = ad.Tensor(np.array([0.2, 9.0]), requires_grad=True)
    y = ad.straight_through(x, np.array([0.25, 6.0]), np.array([True, False]))
    y.backward(np.ones(2))
    np.testing.assert_array_equal(y.data, [0.25, 6.0])
    np.testing.assert_array_equal(x.grad, [1.0, 0.0])


def test_shared_node_accumulates():
    x = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    y = ad.dense(ad.reshape(x, (1, 2)), ad.Tensor(np.eye(2)), ad.Tensor(np.zeros(2)))
    z = ad.dense(y, ad.Tensor(np.eye(2)), ad.Tensor(np.zeros(2)))
    # both y and z feed the loss; x must collect both paths
    total = ad.Tensor(y.data + z.data, _parents=(y, z),
                      _backward=lambda g: (ad._accumulate(y, g), ad._accumulate(z, g)))
    total.backward(np.ones((1, 2)))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_conv_output_size():
    assert ad.conv_output_size(32, 3, 1, 1) == 32
    assert ad.conv_output_size(7, 3, 2, 1) == 4
