import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from denseplan import ops
from denseplan.alloctrace import Accountant, use_accountant
from denseplan.errors import CapacityError, DegenerateBatchError, LabelError, ShapeError
from denseplan.gradcheck import numeric_grad, relative_error
from denseplan.tensor import ArenaTag, alloc, channel_view, wrap


def t(a):
    return wrap(np.asarray(a, dtype=float))


# -- concat ----------------------------------------------------------------

def test_concat_single_input_is_copy(rng):
    x = t(rng.standard_normal((1, 3, 4, 4)))
    y = ops.concat_forward([x])
    assert np.array_equal(y.data, x.data)
    assert not np.shares_memory(y.data, x.data)


def test_concat_channel_layout(rng):
    a, b = t(rng.standard_normal((1, 2, 4, 4))), t(rng.standard_normal((1, 3, 4, 4)))
    y = ops.concat_forward([a, b])
    assert y.data.shape == (1, 5, 4, 4) and y.contiguous
    assert np.array_equal(y.data[:, :2], a.data)
    assert np.array_equal(y.data[:, 2:], b.data)


@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(1, 3))
def test_concat_matches_element_loop(splits, n):
    rng = np.random.default_rng(sum(splits) * 7 + n)
    xs = [t(rng.standard_normal((n, c, 2, 3))) for c in splits]
    y = ops.concat_forward(xs).data
    offset = 0
    for x in xs:
        for idx in np.ndindex(x.data.shape):
            i, c, h, w = idx
            assert y[i, offset + c, h, w] == x.data[idx]
        offset += x.data.shape[1]


def test_concat_into_dst_allocates_nothing(rng):
    acct = Accountant()
    with use_accountant(acct):
        dst = alloc((1, 5, 2, 2), ArenaTag.SHARED1)
        before = acct.snapshot()
        ops.concat_forward([t(rng.standard_normal((1, 2, 2, 2))), t(rng.standard_normal((1, 3, 2, 2)))], dst=dst)
        assert acct.snapshot() == before


def test_concat_errors():
    with pytest.raises(ShapeError):
        ops.concat_forward([t(np.zeros((1, 1, 2, 2))), t(np.zeros((1, 1, 3, 2)))])
    with pytest.raises(CapacityError):
        ops.concat_forward([t(np.zeros((1, 3, 2, 2)))], dst=t(np.zeros((1, 2, 2, 2))))


def test_concat_backward_views_round_trip(rng):
    g = t(rng.standard_normal((1, 5, 4, 4)))
    (whole,) = ops.concat_backward(g, [5])
    assert np.array_equal(whole.data, g.data)
    a, b = ops.concat_backward(g, [2, 3])
    assert a.data.shape == (1, 2, 4, 4) and b.data.shape == (1, 3, 4, 4)
    assert np.shares_memory(a.data, g.data)
    assert np.array_equal(ops.concat_forward([a, b]).data, g.data)
    with pytest.raises(ShapeError):
        ops.concat_backward(g, [2, 2])


# -- batch norm ------------------------------------------------------------

def test_bn_constant_input_normalises_to_zero():
    st_ = ops.BatchNormState.create(2)
    y, stats = ops.batchnorm_forward(t(np.full((2, 2, 3, 3), 4.0)), st_, "train")
    assert np.all(y.data == 0.0)
    assert np.all(stats.var == 0.0)


def test_bn_beta_sets_mean(rng):
    st_ = ops.BatchNormState.create(3)
    st_.beta[:] = 5.0
    y, _ = ops.batchnorm_forward(t(rng.standard_normal((4, 3, 2, 2))), st_, "train")
    assert np.allclose(y.data.mean(axis=(0, 2, 3)), 5.0, atol=1e-12)


def test_bn_output_moments_two_pass_oracle(rng):
    x = rng.standard_normal((3, 2, 4, 4)) * 3 + 1
    st_ = ops.BatchNormState.create(2)
    st_.gamma[:] = [2.0, -0.5]
    st_.beta[:] = [0.3, -1.0]
    y, _ = ops.batchnorm_forward(t(x), st_, "train")
    for c in range(2):
        xc = x[:, c]
        mean = xc.sum() / xc.size
        var = ((xc - mean) ** 2).sum() / xc.size
        yc = y.data[:, c]
        assert abs(yc.mean() - st_.beta[c]) < 1e-10
        assert abs(yc.var() - st_.gamma[c] ** 2 * var / (var + ops.BN_EPS)) < 1e-10


def test_bn_running_stats_update(rng):
    x = rng.standard_normal((2, 1, 3, 3))
    st_ = ops.BatchNormState.create(1)
    ops.batchnorm_forward(t(x), st_, "train")
    m = x.size
    assert np.isclose(st_.running_mean[0], 0.1 * x.mean())
    assert np.isclose(st_.running_var[0], 0.9 + 0.1 * x.var() * m / (m - 1))


def test_bn_with_given_stats_leaves_running_stats(rng):
    x = t(rng.standard_normal((2, 2, 3, 3)))
    st_ = ops.BatchNormState.create(2)
    y1, stats = ops.batchnorm_forward(x, st_, "train")
    snapshot = st_.running_mean.copy(), st_.running_var.copy()
    y2, _ = ops.batchnorm_forward(x, st_, "train", stats=stats)
    assert np.array_equal(y1.data, y2.data)
    assert np.array_equal(snapshot[0], st_.running_mean) and np.array_equal(snapshot[1], st_.running_var)


def test_bn_train_is_deterministic(rng):
    x = t(rng.standard_normal((2, 3, 4, 4)))
    a, b = ops.BatchNormState.create(3), ops.BatchNormState.create(3)
    ya, sa = ops.batchnorm_forward(x, a, "train")
    yb, sb = ops.batchnorm_forward(x, b, "train")
    assert np.array_equal(ya.data, yb.data)
    assert np.array_equal(sa.mean, sb.mean) and np.array_equal(sa.var, sb.var)


def test_bn_eval_uses_running_stats(rng):
    st_ = ops.BatchNormState.create(2)
    st_.running_mean[:] = [1.0, -1.0]
    st_.running_var[:] = [4.0, 0.25]
    x = rng.standard_normal((2, 2, 3, 3))
    y, stats = ops.batchnorm_forward(t(x), st_, "eval")
    expect = (x - np.array([1.0, -1.0]).reshape(1, 2, 1, 1)) / np.sqrt(np.array([4.0, 0.25]) + ops.BN_EPS).reshape(1, 2, 1, 1)
    assert np.allclose(y.data, expect)
    assert np.array_equal(stats.mean, st_.running_mean)


def test_bn_errors():
    st_ = ops.BatchNormState.create(2)
    with pytest.raises(ShapeError):
        ops.batchnorm_forward(t(np.zeros((2, 3, 2, 2))), st_, "train")
    with pytest.raises(DegenerateBatchError):
        ops.batchnorm_forward(t(np.zeros((1, 2, 1, 1))), st_, "train")


def test_bn_backward_zero_grad(rng):
    x = t(rng.standard_normal((2, 2, 3, 3)))
    st_ = ops.BatchNormState.create(2)
    _, stats = ops.batchnorm_forward(x, st_, "train")
    gx, gg, gb = ops.batchnorm_backward(t(np.zeros((2, 2, 3, 3))), x, st_, stats)
    assert not gx.data.any() and not gg.any() and not gb.any()


def test_bn_backward_finite_differences(rng):
    x = rng.standard_normal((2, 1, 3, 3))
    g = rng.standard_normal(x.shape)
    st_ = ops.BatchNormState.create(1)
    _, stats = ops.batchnorm_forward(t(x), st_, "train")
    gx, _, gb = ops.batchnorm_backward(t(g), t(x), st_, stats)
    num = numeric_grad(lambda: float(np.sum(ops.batchnorm_forward(t(x), st_, "train")[0].data * g)), x, 1e-5)
    assert relative_error(gx.data, num, 1e-8).max() < 1e-6
    assert np.array_equal(gb, np.array([np.sum(g)]))


# -- ReLU ------------------------------------------------------------------

def test_relu_negative_and_positive(rng):
    neg = t(-np.abs(rng.standard_normal((1, 2, 2, 2))) - 0.1)
    assert not ops.relu_forward(neg).data.any()
    assert not ops.relu_backward(t(np.ones((1, 2, 2, 2))), neg).data.any()
    pos = t(np.abs(rng.standard_normal((1, 2, 2, 2))) + 0.1)
    g = t(rng.standard_normal((1, 2, 2, 2)))
    assert np.array_equal(ops.relu_forward(pos).data, pos.data)
    assert np.array_equal(ops.relu_backward(g, pos).data, g.data)


def test_relu_in_place(rng):
    x = t(rng.standard_normal((1, 2, 3, 3)))
    y = ops.relu_forward(x, out=x)
    assert y.data is x.data or np.shares_memory(y.data, x.data)
    assert (x.data >= 0).all()


def test_relu_finite_differences_with_kink_exclusion(rng):
    x = rng.standard_normal((2, 2, 3, 3))
    g = ops.relu_backward(t(np.ones_like(x)), t(x)).data
    num = numeric_grad(lambda: float(ops.relu_forward(t(x)).data.sum()), x, 1e-5)
    keep = np.abs(x) >= 1e-4
    assert relative_error(g[keep], num[keep], 1e-8).max() < 1e-6


# -- convolution -----------------------------------------------------------

def test_identity_1x1_conv(rng):
    x = t(rng.standard_normal((2, 3, 4, 4)))
    p = ops.ConvParams(np.eye(3).reshape(3, 3, 1, 1))
    assert np.array_equal(ops.conv2d_forward(x, p).data, x.data)


def test_ones_kernel_counts_neighbours():
    p = ops.ConvParams(np.ones((1, 1, 3, 3)), 1, 1)
    y = ops.conv2d_forward(t(np.ones((1, 1, 3, 3))), p).data[0, 0]
    assert y[1, 1] == 9 and y[0, 1] == 6 and y[0, 0] == 4


def test_conv_matches_direct_summation(rng):
    x = rng.standard_normal((2, 3, 5, 4))
    w = rng.standard_normal((2, 3, 3, 3))
    y = ops.conv2d_forward(t(x), ops.ConvParams(w, 2, 1)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    for n, o, i, j in np.ndindex(y.shape):
        patch = xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
        assert math.isclose(y[n, o, i, j], float((patch * w[o]).sum()), rel_tol=1e-12, abs_tol=1e-12)


def test_conv_grad_w_finite_differences(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    p = ops.ConvParams(w, 1, 1)
    g = rng.standard_normal((1, 3, 5, 5))
    _, gw = ops.conv2d_backward(t(g), t(x), p)
    num = numeric_grad(lambda: float(np.sum(ops.conv2d_forward(t(x), p).data * g)), w, 1e-5)
    assert relative_error(gw, num, 1e-8).max() < 1e-6


def test_conv_non_contiguous_input_equals_contiguous_copy(rng):
    parent = t(rng.standard_normal((2, 6, 4, 4)))
    view = channel_view(parent, 1, 3)
    assert not view.contiguous
    p = ops.ConvParams(rng.standard_normal((2, 3, 3, 3)), 1, 1)
    copy = t(np.ascontiguousarray(view.data))
    assert np.array_equal(ops.conv2d_forward(view, p).data, ops.conv2d_forward(copy, p).data)
    with pytest.raises(ShapeError):
        ops.conv2d_backward(t(np.zeros((2, 2, 4, 4))), view, p)


def test_conv_errors():
    p = ops.ConvParams(np.ones((1, 2, 3, 3)))
    with pytest.raises(ShapeError):
        ops.conv2d_forward(t(np.ones((1, 3, 4, 4))), p)
    with pytest.raises(ShapeError):
        ops.conv2d_forward(t(np.ones((1, 2, 2, 2))), p)


# -- pooling, linear, loss -------------------------------------------------

def test_avgpool_constant():
    y = ops.avgpool2d(t(np.full((1, 2, 4, 4), 3.5)))
    assert y.data.shape == (1, 2, 2, 2) and np.all(y.data == 3.5)
    assert np.all(ops.global_avgpool(t(np.full((2, 3, 4, 4), -2.0))).data == -2.0)


def test_uniform_logits_loss_is_log_k():
    loss, grad = ops.softmax_xent(t(np.zeros((3, 7, 1, 1))), np.array([0, 3, 6]))
    assert math.isclose(loss, math.log(7), rel_tol=1e-15)
    assert np.allclose(grad.data.sum(axis=1), 0)


def test_softmax_xent_finite_differences(rng):
    z = rng.standard_normal((3, 4, 1, 1))
    y = np.array([0, 2, 3])
    _, g = ops.softmax_xent(t(z), y)
    num = numeric_grad(lambda: ops.softmax_xent(t(z), y)[0], z, 1e-5)
    assert relative_error(g.data, num, 1e-8).max() < 1e-6


def test_label_errors():
    with pytest.raises(LabelError):
        ops.softmax_xent(t(np.zeros((2, 3, 1, 1))), np.array([0, 3]))
    with pytest.raises(LabelError):
        ops.softmax_xent(t(np.zeros((2, 3, 1, 1))), np.array([0]))


def test_linear_forward(rng):
    x = rng.standard_normal((2, 3, 1, 1))
    w = rng.standard_normal((4, 3))
    b = rng.standard_normal(4)
    y = ops.linear(t(x), w, b).data.reshape(2, 4)
    assert np.allclose(y, x.reshape(2, 3) @ w.T + b)
