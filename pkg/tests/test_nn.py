import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tfcrnn.nn import (BatchNormState, BatchNormStateError, GRUParams, NonFiniteError, SGDNesterov,
                       ShapeError, Tensor, batchnorm1d, channel_scale, conv1d, cross_entropy, dropout,
                       global_maxpool, grad_check, gru_cell, linear, maxpool1d, no_grad, relu,
                       same_padding, sigmoid, softmax_cross_entropy, tanh)


def naive_conv(x, w, b, stride):
    n, c_in, length = x.shape
    out_len = -(-length // stride)
    total = max((out_len - 1) * stride + 3 - length, 0)
    left = total // 2
    out = np.zeros((n, w.shape[0], out_len))
    for i in range(n):
        for o in range(w.shape[0]):
            for t in range(out_len):
                acc = b[o]
                for c in range(c_in):
                    for k in range(3):
                        pos = t * stride + k - left
                        if 0 <= pos < length:
                            acc += w[o, c, k] * x[i, c, pos]
                out[i, o, t] = acc
    return out


@pytest.mark.parametrize("stride,length", [(1, 7), (3, 10), (3, 1600), (1, 1), (3, 2)])
def test_conv_matches_loop(stride, length):
    rng = np.random.default_rng(length)
    x = rng.normal(size=(2, 3, length))
    w = rng.normal(size=(4, 3, 3))
    b = rng.normal(size=4)
    got = conv1d(Tensor(x), Tensor(w), Tensor(b), stride=stride).data
    assert got.shape == (2, 4, -(-length // stride))
    np.testing.assert_allclose(got, naive_conv(x, w, b, stride), atol=1e-12)


def test_conv_length_examples():
    x = Tensor(np.zeros((1, 1, 1600), np.float32))
    w = Tensor(np.zeros((2, 1, 3), np.float32))
    assert conv1d(x, w, None, stride=3).shape == (1, 2, 534)
    assert conv1d(Tensor(np.zeros((1, 1, 9))), Tensor(np.zeros((2, 1, 3))), None, stride=1).shape[-1] == 9
    assert same_padding(1600, 3) == (1, 1)
    assert same_padding(8, 3) == (0, 1)


def test_conv_errors():
    with pytest.raises(ShapeError):
        conv1d(Tensor(np.zeros((1, 2, 5))), Tensor(np.zeros((1, 3, 3))), None)
    with pytest.raises(ShapeError):
        conv1d(Tensor(np.zeros((1, 1, 5))), Tensor(np.zeros((1, 1, 5))), None)
    with pytest.raises(ShapeError):
        conv1d(Tensor(np.zeros((1, 1, 5))), Tensor(np.zeros((1, 1, 3))), None, stride=2)


def test_maxpool_examples():
    x = Tensor(np.array([[[1.0, 3.0, 2.0, 5.0, 4.0, 0.0, 9.0]]]), requires_grad=True)
    y = maxpool1d(x)
    assert y.data.tolist() == [[[3.0, 5.0]]]
    y.backward(np.ones_like(y.data))
    assert x.grad.tolist() == [[[0, 1, 0, 1, 0, 0, 0]]]


def test_maxpool_tie_goes_to_first_index():
    x = Tensor(np.array([[[2.0, 2.0, 2.0]]]), requires_grad=True)
    y = maxpool1d(x)
    y.backward(np.ones_like(y.data))
    assert x.grad.tolist() == [[[1, 0, 0]]]


def test_maxpool_short_input():
    with pytest.raises(ShapeError):
        maxpool1d(Tensor(np.zeros((1, 1, 2))))


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 40), st.integers(0, 10_000))
def test_maxpool_brute_force(length, seed):
    x = np.random.default_rng(seed).normal(size=(2, 2, length))
    got = maxpool1d(Tensor(x)).data
    want = np.array([[[max(row[3 * j:3 * j + 3]) for j in range(length // 3)] for row in ch] for ch in x])
    np.testing.assert_array_equal(got, want)


def test_global_maxpool():
    x = np.random.default_rng(0).normal(size=(3, 4, 7))
    np.testing.assert_array_equal(global_maxpool(Tensor(x)).data, x.max(axis=2))


def test_relu_and_tanh():
    x = Tensor(np.array([-1.0, 0.0, 2.0]))
    assert relu(x).data.tolist() == [0.0, 0.0, 2.0]
    np.testing.assert_allclose(tanh(x).data, np.tanh([-1.0, 0.0, 2.0]))


def test_sigmoid_examples():
    assert sigmoid(Tensor(np.array([0.0]))).data[0] == 0.5
    big = sigmoid(Tensor(np.array([1e3, -1e3]))).data
    assert 1 - 1e-9 < big[0] < 1.0
    assert 0.0 < big[1] < 1e-9
    small = sigmoid(Tensor(np.array([1e3, -1e3], np.float32))).data
    assert 0.0 < small[1] and small[0] < 1.0


def test_batchnorm_train_normalizes_and_updates():
    rng = np.random.default_rng(0)
    x = rng.normal(3.0, 2.0, size=(8, 4, 10))
    state = BatchNormState.fresh(4, np.float64)
    y = batchnorm1d(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), state, training=True).data
    np.testing.assert_allclose(y.mean(axis=(0, 2)), 0, atol=1e-10)
    np.testing.assert_allclose(y.var(axis=(0, 2)), 1, atol=1e-3)
    mean = x.mean(axis=(0, 2))
    var = x.var(axis=(0, 2), ddof=1)
    np.testing.assert_allclose(state.running_mean, 0.1 * mean)
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * var)
    batchnorm1d(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), state, training=True)
    np.testing.assert_allclose(state.running_mean, 0.19 * mean)


def test_batchnorm_eval_uses_running_stats():
    state = BatchNormState.fresh(2, np.float64)
    state.seed(np.array([1.0, -1.0]), np.array([4.0, 1.0]))
    x = np.array([[[3.0], [0.0]]])
    y = batchnorm1d(Tensor(x), Tensor(np.array([2.0, 1.0])), Tensor(np.array([0.5, 0.0])), state, False).data
    np.testing.assert_allclose(y[0, :, 0], [2.0 * 2 / math.sqrt(4 + 1e-5) + 0.5, 1 / math.sqrt(1 + 1e-5)])


def test_batchnorm_eval_before_init():
    state = BatchNormState.fresh(2)
    with pytest.raises(BatchNormStateError):
        batchnorm1d(Tensor(np.zeros((1, 2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, False)


def test_dropout_expectation_and_determinism():
    x = Tensor(np.ones((200, 500)))
    a = dropout(x, 0.5, np.random.default_rng(3), True).data
    b = dropout(x, 0.5, np.random.default_rng(3), True).data
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 2.0}
    assert abs(a.mean() - 1.0) < 0.02
    assert dropout(x, 0.5, None, False) is x
    with pytest.raises(ValueError):
        dropout(x, 0.5, None, True)


def test_linear_and_channel_scale():
    x = np.arange(6.0).reshape(2, 3)
    w = np.arange(12.0).reshape(4, 3)
    np.testing.assert_allclose(linear(Tensor(x), Tensor(w), Tensor(np.ones(4))).data, x @ w.T + 1)
    maps = np.ones((2, 3, 4))
    s = np.array([[1.0, 2.0, 3.0], [0.5, 0.0, 1.0]])
    np.testing.assert_allclose(channel_scale(Tensor(maps), Tensor(s)).data, maps * s[:, :, None])
    with pytest.raises(ShapeError):
        channel_scale(Tensor(maps), Tensor(np.ones((2, 4))))


def gru_reference(x, h, wi, wh, b):
    hd = h.shape[-1]
    sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    gx = x @ wi.T + b
    z = sig(gx[:, :hd] + h @ wh[:hd].T)
    r = sig(gx[:, hd:2 * hd] + h @ wh[hd:2 * hd].T)
    c = np.tanh(gx[:, 2 * hd:] + (r * h) @ wh[2 * hd:].T)
    return (1 - z) * h + z * c


def test_gru_matches_loop_oracle():
    rng = np.random.default_rng(1)
    wi, wh, b = rng.normal(size=(9, 4)), rng.normal(size=(9, 3)), rng.normal(size=9)
    params = GRUParams(Tensor(wi), Tensor(wh), Tensor(b))
    h = np.zeros((2, 3))
    ht = Tensor(h)
    for _ in range(5):
        x = rng.normal(size=(2, 4))
        h = gru_reference(x, h, wi, wh, b)
        ht = gru_cell(Tensor(x), ht, params)
    np.testing.assert_allclose(ht.data, h, atol=1e-12)


def test_gru_zero_weights_keep_half():
    params = GRUParams(Tensor(np.zeros((6, 3))), Tensor(np.zeros((6, 2))), Tensor(np.zeros(6)))
    h = gru_cell(Tensor(np.ones((1, 3))), Tensor(np.array([[1.0, -1.0]])), params)
    np.testing.assert_allclose(h.data, [[0.5, -0.5]])
    with pytest.raises(ShapeError):
        gru_cell(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 5))), params)


def test_softmax_cross_entropy_examples():
    loss, grad = softmax_cross_entropy(np.zeros(35), 0)
    assert abs(loss - math.log(35)) < 1e-12
    assert abs(loss - 3.5553) < 1e-4
    np.testing.assert_allclose(grad.sum(), 0, atol=1e-12)
    loss, grad = softmax_cross_entropy(np.array([1000.0, 0.0]), 0)
    assert loss < 1e-12 and np.all(np.isfinite(grad))
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros(3), 3)


def test_batched_cross_entropy_gradient():
    logits = Tensor(np.random.default_rng(0).normal(size=(4, 5)), requires_grad=True)
    labels = np.array([0, 4, 2, 2])
    loss = cross_entropy(logits, labels)
    loss.backward()
    per = [softmax_cross_entropy(logits.data[i], labels[i]) for i in range(4)]
    assert abs(loss.item() - np.mean([p[0] for p in per])) < 1e-12
    np.testing.assert_allclose(logits.grad, np.stack([p[1] for p in per]) / 4, atol=1e-12)


def test_nesterov_scalar_recurrence():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = SGDNesterov([("p", p)], lr=0.1, momentum=0.9)
    ref_p, ref_v = 1.0, 0.0
    for _ in range(5):
        opt.zero_grad()
        (p * p).sum().backward()            # grad 2p
        g = 2 * ref_p
        ref_v = 0.9 * ref_v + g
        ref_p -= 0.1 * (g + 0.9 * ref_v)
        opt.step()
        assert abs(p.data[0] - ref_p) < 1e-12
    opt2 = SGDNesterov([("q", Tensor(np.array([1.0]), requires_grad=True))], lr=0.1)
    q = opt2.params["q"]
    (q * q).sum().backward()
    opt2.step()
    assert abs(q.data[0] - (1 - 0.1 * (2 + 0.9 * 2))) < 1e-12


def test_no_grad_and_non_finite():
    w = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = w * w
    assert not y.requires_grad
    with pytest.raises(NonFiniteError):
        Tensor(np.array([np.inf])) * w


def test_grad_check_detects_wrong_gradient():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)

    def good():
        return (x * x).sum()

    assert grad_check(good, [x]).max_rel_error < 1e-6

    def bad():
        y = Tensor.from_op(x.data * 2.0, (x,), lambda g: x._accumulate(g * 3.0))
        return y.sum()

    assert grad_check(bad, [x]).max_rel_error > 0.1
