from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from marl_lns.nn import (AdamState, Mlp, NonFiniteGradientError, StaleCacheError, adam_step,
                         clip_grad_norm, finite_difference_check, global_norm, load_checkpoint,
                         orthogonal_init, save_checkpoint)


def test_zero_net_outputs_zero():
    net = Mlp([3, 5, 2])
    for p in net.parameters():
        p[...] = 0.0
    np.testing.assert_array_equal(net(np.random.default_rng(0).standard_normal((4, 3))), 0.0)


def test_identity_linear_layer():
    net = Mlp([3, 3])
    net.W[0][...] = np.eye(3)
    net.b[0][...] = 0.0
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(net(x), x)


def test_hand_computed_forward():
    net = Mlp([2, 2, 1])
    net.W[0][...] = [[0.5, -1.0], [1.0, 2.0]]
    net.b[0][...] = [0.1, 0.0]
    net.W[1][...] = [[1.0], [-1.0]]
    net.b[1][...] = [0.2]
    # tanh(1.6) - tanh(1.0) + 0.2, evaluated by hand
    assert net(np.array([[1.0, 1.0]]))[0, 0] == pytest.approx(0.3600743984507064, abs=1e-15)


def test_forward_shape_mismatch():
    with pytest.raises(ValueError):
        Mlp([3, 2]).forward(np.zeros((2, 4)))


def test_linear_gradient_is_outer_product():
    net = Mlp([3, 2])
    x = np.array([[1.0, 2.0, 3.0]])
    g = np.array([[0.5, -1.0]])
    _, cache = net.forward(x)
    grads, gin = net.backward(cache, g)
    np.testing.assert_allclose(grads[0], x.T @ g)
    np.testing.assert_allclose(grads[1], g[0])
    np.testing.assert_allclose(gin, g @ net.W[0].T)


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    net = Mlp([4, 8, 3], rng, output_gain=1.0)
    for b in net.b:
        b[...] = rng.standard_normal(b.shape) * 0.1
    x = rng.standard_normal((5, 4))
    target = rng.standard_normal((5, 3))

    def loss():
        return 0.5 * float(np.sum((net(x) - target) ** 2))

    out, cache = net.forward(x)
    grads, _ = net.backward(cache, out - target)
    assert finite_difference_check(loss, net.parameters(), grads, probes=100, eps=1e-5, rng=rng) <= 1e-5


def test_input_gradient_finite_difference():
    rng = np.random.default_rng(4)
    net = Mlp([3, 6, 2], rng)
    x = rng.standard_normal((2, 3))
    _, cache = net.forward(x)
    _, gin = net.backward(cache, np.ones((2, 2)))
    eps = 1e-6
    for i in range(2):
        for j in range(3):
            xp, xm = x.copy(), x.copy()
            xp[i, j] += eps
            xm[i, j] -= eps
            num = (net(xp).sum() - net(xm).sum()) / (2 * eps)
            assert gin[i, j] == pytest.approx(num, rel=1e-6, abs=1e-9)


def test_stale_cache_detected():
    net = Mlp([2, 3, 1])
    _, cache = net.forward(np.ones((1, 2)))
    net.mark_updated()
    with pytest.raises(StaleCacheError):
        net.backward(cache, np.ones((1, 1)))


@settings(max_examples=30, deadline=None)
@given(rows=st.integers(1, 20), cols=st.integers(1, 20), gain=st.floats(0.1, 3.0))
def test_orthogonal_init(rows, cols, gain):
    W = orthogonal_init((rows, cols), gain, np.random.default_rng(0))
    k = min(rows, cols)
    gram = W.T @ W if rows >= cols else W @ W.T
    np.testing.assert_allclose(gram, gain**2 * np.eye(k), atol=1e-10)


def test_adam_first_step_moves_by_lr():
    # bias-corrected first step is lr * g/|g| (up to eps) per coordinate
    st_ = AdamState(lr=0.1, eps=1e-12)
    p = [np.array([1.0, -2.0, 3.0])]
    adam_step(st_, p, [np.array([0.5, -4.0, 1e-3])])
    np.testing.assert_allclose(p[0], [0.9, -1.9, 2.9], rtol=1e-9)
    assert st_.step_count == 1
    assert st_.m[0].shape == p[0].shape and st_.v[0].shape == p[0].shape


def test_adam_defaults():
    s = AdamState()
    assert (s.lr, s.beta1, s.beta2, s.eps, s.weight_decay) == (5e-4, 0.9, 0.999, 1e-5, 0.0)


def test_adam_minimizes_quadratic():
    s = AdamState(lr=0.05)
    p = [np.array([3.0, -2.0])]
    for _ in range(2000):
        adam_step(s, p, [2 * p[0]])
    np.testing.assert_allclose(p[0], 0.0, atol=1e-3)


def test_adam_rejects_non_finite_gradient():
    with pytest.raises(NonFiniteGradientError, match="critic.W1"):
        adam_step(AdamState(), [np.zeros(2)], [np.array([1.0, np.nan])], names=["critic.W1"])


def test_clip_grad_norm():
    grads = [np.array([3.0]), np.array([4.0])]
    clipped, pre = clip_grad_norm(grads, max_norm=1.0)
    assert pre == pytest.approx(5.0)
    assert global_norm(clipped) == pytest.approx(1.0)
    unclipped, _ = clip_grad_norm([np.array([0.3])], max_norm=10.0)
    assert unclipped[0][0] == 0.3


def test_checkpoint_roundtrip(tmp_path):
    a = Mlp([3, 4, 2], np.random.default_rng(1))
    b = Mlp([3, 4, 2], np.random.default_rng(2))
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, {"actor": a})
    load_checkpoint(path, {"actor": b})
    for pa, pb in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(pa, pb)


def test_checkpoint_shape_mismatch(tmp_path):
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, {"actor": Mlp([3, 4, 2])})
    with pytest.raises(ValueError):
        load_checkpoint(path, {"actor": Mlp([3, 5, 2])})


def test_default_hidden_gain():
    net = Mlp([4, 4, 4], np.random.default_rng(0))
    np.testing.assert_allclose(net.W[0].T @ net.W[0], 2.0 * np.eye(4), atol=1e-10)
    assert math.isclose(np.linalg.norm(net.W[1], 2), 1.0)
