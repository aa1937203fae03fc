import math

import numpy as np
import pytest

from kneebench import autograd as ag
from kneebench.errors import GraphCycle, ShapeMismatch


def T(a, grad=True):
    return ag.Tensor(np.asarray(a, dtype=float), requires_grad=grad)


def weighted_sum(out, seed=0):
    """Scalar with a non-trivial upstream gradient."""
    w = ag.Tensor(np.random.default_rng(seed).normal(size=out.shape))
    return ag.sum_all(ag.mul(out, w))


# --- conv1d --------------------------------------------------------------------


def test_conv1d_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 3, 7))
    w = np.eye(3)[:, :, None]
    out = ag.conv1d(T(x), T(w), T(np.zeros(3)))
    np.testing.assert_allclose(out.data, x)


def test_conv1d_box_filter_edges():
    out = ag.conv1d(T(np.ones((1, 1, 6))), T([[[1.0, 1.0, 1.0]]]), T([0.0]))
    assert out.data.ravel().tolist() == [2, 3, 3, 3, 3, 2]


def test_conv1d_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 9))
    for k in (1, 2, 3, 4, 11):
        w = rng.normal(size=(4, 3, k))
        b = rng.normal(size=4)
        left, right = ag.same_padding(k)
        xp = np.pad(x, ((0, 0), (0, 0), (left, right)))
        ref = np.zeros((2, 4, 9))
        for t in range(9):
            ref[:, :, t] = np.einsum("bcj,ocj->bo", xp[:, :, t:t + k], w) + b
        np.testing.assert_allclose(ag.conv1d(T(x), T(w), T(b)).data, ref, rtol=1e-12, atol=1e-12)


def test_even_kernel_pads_left():
    assert ag.same_padding(2) == (1, 0)
    out = ag.conv1d(T([[[1.0, 2.0, 3.0]]]), T([[[1.0, 0.0]]]))
    # out[t] = xp[t] with xp = [0, 1, 2, 3]
    assert out.data.ravel().tolist() == [0.0, 1.0, 2.0]


def test_conv1d_is_linear():
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(2, 2, 3, 12))
    w = T(rng.normal(size=(5, 3, 11)))
    lhs = ag.conv1d(T(2.0 * x - 3.0 * y), w).data
    rhs = 2.0 * ag.conv1d(T(x), w).data - 3.0 * ag.conv1d(T(y), w).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_conv1d_gradcheck():
    rng = np.random.default_rng(3)
    x, w, b = T(rng.normal(size=(2, 3, 16))), T(rng.normal(size=(4, 3, 11))), T(rng.normal(size=4))
    err = ag.gradcheck(lambda: weighted_sum(ag.conv1d(x, w, b)), [x, w, b], n_coords=100)
    assert err < 1e-6


def test_conv1d_shape_errors():
    with pytest.raises(ShapeMismatch):
        ag.conv1d(T(np.ones((1, 2, 5))), T(np.ones((1, 3, 3))))
    with pytest.raises(ShapeMismatch):
        ag.conv1d(T(np.ones((1, 2, 5))), T(np.ones((1, 2, 3))), T(np.ones(2)))


# --- pooling / upsampling ---------------------------------------------------------


def test_maxpool_values_and_tie_rule():
    x = T([[[1.0, 2.0, 3.0, 4.0]]])
    with ag.Graph() as g:
        out = ag.maxpool1d(x)
        loss = ag.sum_all(out)
    assert out.data.ravel().tolist() == [2.0, 4.0]
    c = T(np.full((1, 1, 4), 5.0))
    with ag.Graph() as g:
        loss = ag.sum_all(ag.maxpool1d(c))
    ag.backward(g, loss)
    assert c.grad.ravel().tolist() == [1.0, 0.0, 1.0, 0.0]


def test_maxpool_gradcheck_and_odd_length():
    x = T(np.random.default_rng(4).normal(size=(2, 3, 16)))
    assert ag.gradcheck(lambda: weighted_sum(ag.maxpool1d(x)), [x]) < 1e-6
    with pytest.raises(ShapeMismatch):
        ag.maxpool1d(T(np.ones((1, 1, 5))))


def test_transposed_conv_repeats_with_unit_weights():
    x = T([[[1.0, 2.0, 3.0]]])
    out = ag.transposed_conv1d(x, T([[[1.0, 1.0]]]), T([0.0]))
    assert out.data.ravel().tolist() == [1, 1, 2, 2, 3, 3]
    zeros = ag.transposed_conv1d(T(np.zeros((2, 3, 4))), T(np.ones((3, 5, 2))), T(np.zeros(5)))
    assert zeros.shape == (2, 5, 8) and not zeros.data.any()


def test_pool_then_upsample_keeps_length():
    x = T(np.random.default_rng(5).normal(size=(1, 2, 32)))
    up = ag.transposed_conv1d(ag.maxpool1d(x), T(np.ones((2, 2, 2))))
    assert up.shape == x.shape


def test_transposed_conv_gradcheck():
    rng = np.random.default_rng(6)
    x, w, b = T(rng.normal(size=(2, 3, 8))), T(rng.normal(size=(3, 4, 2))), T(rng.normal(size=4))
    assert ag.gradcheck(lambda: weighted_sum(ag.transposed_conv1d(x, w, b)), [x, w, b]) < 1e-6


# --- batch norm -----------------------------------------------------------------------


def test_batchnorm_train_statistics():
    x = T(np.random.default_rng(7).normal(3.0, 2.0, size=(4, 3, 20)))
    st = ag.BatchNormState.fresh(3)
    out = ag.batchnorm1d(x, T(np.ones(3)), T(np.zeros(3)), st, train=True)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2)), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.data.var(axis=(0, 2)), 1.0, atol=1e-4)  # eps = 1e-5 shrinks it slightly
    # running stats moved by momentum 0.1 from (0, 1)
    np.testing.assert_allclose(st.running_mean, 0.1 * x.data.mean(axis=(0, 2)))


def test_batchnorm_exact_variance_with_tiny_eps():
    x = T(np.random.default_rng(7).normal(size=(4, 3, 20)))
    st = ag.BatchNormState.fresh(3, eps=1e-12)
    out = ag.batchnorm1d(x, T(np.ones(3)), T(np.zeros(3)), st, train=True)
    np.testing.assert_allclose(out.data.var(axis=(0, 2)), 1.0, atol=1e-6)


def test_batchnorm_affine():
    x = T(np.random.default_rng(8).normal(size=(2, 2, 10)))
    plain = ag.batchnorm1d(x, T(np.ones(2)), T(np.zeros(2)), ag.BatchNormState.fresh(2), True).data
    scaled = ag.batchnorm1d(x, T(np.full(2, 2.0)), T(np.full(2, 3.0)), ag.BatchNormState.fresh(2), True).data
    np.testing.assert_allclose(scaled, 2 * plain + 3, atol=1e-12)


@pytest.mark.parametrize("train", [True, False])
def test_batchnorm_gradcheck(train):
    rng = np.random.default_rng(9)
    x = T(rng.normal(size=(3, 2, 10)))
    gamma, beta = T(rng.normal(size=2)), T(rng.normal(size=2))
    st = ag.BatchNormState(rng.normal(size=2), rng.uniform(0.5, 2, size=2))
    err = ag.gradcheck(lambda: weighted_sum(ag.batchnorm1d(x, gamma, beta, st, train)), [x, gamma, beta])
    assert err < 1e-5


def test_batchnorm_eval_uses_running_stats():
    st = ag.BatchNormState(np.array([1.0]), np.array([4.0]), eps=0.0)
    out = ag.batchnorm1d(T([[[1.0, 3.0, 5.0]]]), T([1.0]), T([0.0]), st, train=False)
    np.testing.assert_allclose(out.data.ravel(), [0.0, 1.0, 2.0])


def test_batchnorm_needs_two_values():
    with pytest.raises(ShapeMismatch):
        ag.batchnorm1d(T([[[1.0]]]), T([1.0]), T([0.0]), ag.BatchNormState.fresh(1), True)


# --- elementwise ------------------------------------------------------------------------


def test_relu_sigmoid_values():
    assert ag.relu(T([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
    assert ag.sigmoid(T([0.0])).data.tolist() == [0.5]
    big = ag.sigmoid(T([-800.0, 800.0])).data
    assert np.all(np.isfinite(big)) and big[0] == 0.0 and big[1] == 1.0


def test_concat_and_split_gradient():
    a, b = T(np.ones((2, 1, 4))), T(np.full((2, 3, 4), 2.0))
    with ag.Graph() as g:
        c = ag.concat_channels(a, b)
        loss = ag.sum_all(c)
    np.testing.assert_array_equal(c.data[:, :1], a.data)
    np.testing.assert_array_equal(c.data[:, 1:], b.data)
    ag.backward(g, loss)
    assert np.all(a.grad == 1) and np.all(b.grad == 1)
    with pytest.raises(ShapeMismatch):
        ag.concat_channels(a, T(np.ones((2, 1, 5))))


def test_elementwise_gradcheck():
    rng = np.random.default_rng(10)
    x = T(rng.normal(size=(2, 3, 8)))
    assert ag.gradcheck(lambda: weighted_sum(ag.sigmoid(x)), [x]) < 1e-6
    assert ag.gradcheck(lambda: weighted_sum(ag.relu(x)), [x]) < 1e-6
    y = T(rng.normal(size=(2, 2, 8)))
    assert ag.gradcheck(lambda: weighted_sum(ag.concat_channels(x, y)), [x, y]) < 1e-6
    assert ag.gradcheck(lambda: ag.mean_all(ag.mul(x, x)), [x]) < 1e-6


# --- backward / graph ---------------------------------------------------------------------


def test_sum_gives_unit_gradients():
    x = T(np.random.default_rng(0).normal(size=(3, 4)))
    with ag.Graph() as g:
        loss = ag.sum_all(x)
    ag.backward(g, loss)
    assert np.all(x.grad == 1.0)


def test_scalar_chain_rule():
    w, x = T([0.7]), T([-1.3])
    with ag.Graph() as g:
        loss = ag.sum_all(ag.sigmoid(ag.mul(w, x)))
    ag.backward(g, loss)
    s = 1 / (1 + math.exp(0.7 * 1.3))
    assert w.grad[0] == pytest.approx(s * (1 - s) * -1.3)
    assert x.grad[0] == pytest.approx(s * (1 - s) * 0.7)


def test_shared_input_accumulates():
    x = T([2.0, 3.0])
    with ag.Graph() as g:
        loss = ag.sum_all(ag.add(ag.mul(x, x), x))
    ag.backward(g, loss)
    assert x.grad.tolist() == [5.0, 7.0]


def test_graph_cycle_detected():
    x = T([1.0])
    with ag.Graph() as g:
        y = ag.relu(x)
    g.record("bad", (y,), y, lambda grad: (grad,))
    with pytest.raises(GraphCycle):
        ag.backward(g, y)


def test_no_recording_outside_graph():
    x = T([1.0, 2.0])
    y = ag.relu(x)
    assert not y.requires_grad


def test_non_scalar_loss_rejected():
    x = T([1.0, 2.0])
    with ag.Graph() as g:
        y = ag.relu(x)
    with pytest.raises(ShapeMismatch):
        ag.backward(g, y)


# --- AdaDelta ----------------------------------------------------------------------------


def test_adadelta_first_step():
    p = T([1.0])
    st = ag.AdaDeltaState(rho=0.5, eps=1e-6, lr=0.5)
    ag.adadelta_step([p], [np.array([1.0])], st)
    expected = -0.5 * math.sqrt(1e-6) / math.sqrt(0.5 + 1e-6)
    assert p.data[0] - 1.0 == pytest.approx(expected, rel=1e-12)


def test_adadelta_zero_gradient_decays_accumulators():
    p = T([1.0])
    st = ag.AdaDeltaState()
    ag.adadelta_step([p], [np.array([1.0])], st)
    before = (st.sq_grad[0].copy(), st.sq_update[0].copy(), p.data.copy())
    ag.adadelta_step([p], [np.array([0.0])], st)
    assert p.data[0] == before[2][0]
    assert st.sq_grad[0][0] == pytest.approx(0.5 * before[0][0])
    assert st.sq_update[0][0] == pytest.approx(0.5 * before[1][0])


def test_adadelta_matches_scalar_recurrence():
    rho, eps, lr = 0.5, 1e-6, 0.5
    rng = np.random.default_rng(12)
    grads = rng.normal(size=30)
    p = T([0.3])
    st = ag.AdaDeltaState(rho=rho, eps=eps, lr=lr)
    eg = ed = 0.0
    ref = 0.3
    for g in grads:
        ag.adadelta_step([p], [np.array([g])], st)
        eg = rho * eg + (1 - rho) * g * g
        delta = -math.sqrt(ed + eps) / math.sqrt(eg + eps) * g
        ed = rho * ed + (1 - rho) * delta * delta
        ref += lr * delta
    assert p.data[0] == pytest.approx(ref, rel=1e-12)


def test_adadelta_shape_checks():
    with pytest.raises(ShapeMismatch):
        ag.adadelta_step([T([1.0, 2.0])], [np.ones(3)], ag.AdaDeltaState())
    with pytest.raises(ValueError):
        ag.AdaDeltaState(rho=1.0)
