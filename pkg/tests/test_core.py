import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mcnb import core
from mcnb.core import _fallback

try:
    from mcnb.core import _kernels
except ImportError:  # extension not built
    _kernels = None

needs_ext = pytest.mark.skipif(_kernels is None, reason="compiled extension not built")


def small_net(seed, d=4, m=6, L=2):
    shape = core.NetworkShape(d, m, L)
    return shape, core.init_params(shape, seed)


# ---------------------------------------------------------------- oracles


def test_two_layer_forward_by_hand():
    # W1 = [[1, -1], [2, 0]], W2 = [3, -1]; x = (0.6, 0.8)
    shape = core.NetworkShape(2, 2, 2)
    theta = np.array([1.0, -1.0, 2.0, 0.0, 3.0, -1.0])
    x = np.array([0.6, 0.8])
    # hidden = relu([-0.2, 1.2]) = [0, 1.2]; f = -1.2
    assert core.forward(shape, theta, x) == pytest.approx(-1.2, abs=1e-15)
    g = core.backward(shape, theta, x)
    # dW1 row 0 masked (pre-activation < 0); row 1 = W2[1] * x = -x
    np.testing.assert_allclose(g, [0.0, 0.0, -0.6, -0.8, 0.0, 1.2], atol=1e-15)


def test_relu_subgradient_at_zero_is_zero():
    shape = core.NetworkShape(2, 1, 2)
    theta = np.array([1.0, -1.0, 5.0])
    x = np.array([1.0, 1.0]) / math.sqrt(2.0)  # pre-activation exactly 0
    g = core.backward(shape, theta, x)
    np.testing.assert_array_equal(g, [0.0, 0.0, 0.0])


def test_param_count_and_layout():
    shape = core.NetworkShape(3, 5, 3)
    assert shape.n_params == 3 * 5 + 5 * 5 + 5
    theta = np.arange(shape.n_params, dtype=float)
    w1, w2, w3 = core.unflatten(shape, theta)
    assert w1.shape == (5, 3) and w2.shape == (5, 5) and w3.shape == (1, 5)
    assert w1[1, 0] == 3.0  # row-major
    assert w2[0, 0] == 15.0 and w3[0, 0] == 40.0
    w1[0, 0] = -7.0  # views, not copies
    assert theta[0] == -7.0


def test_init_statistics():
    shape = core.NetworkShape(50, 400, 3)
    theta = core.init_params(shape, 0)
    w1, w2, w3 = core.unflatten(shape, theta)
    m = shape.width
    assert np.var(w1) == pytest.approx(2.0 / m, rel=0.03)
    assert np.var(w2) == pytest.approx(2.0 / m, rel=0.03)
    assert np.var(w3) == pytest.approx(1.0 / m, rel=0.25)
    assert abs(np.mean(w2)) < 4 * math.sqrt(2.0 / m / w2.size)


def test_init_is_seed_deterministic():
    shape = core.NetworkShape(4, 8, 2)
    np.testing.assert_array_equal(core.init_params(shape, 3), core.init_params(shape, 3))
    assert not np.array_equal(core.init_params(shape, 3), core.init_params(shape, 4))


def test_loss_and_grad_scales_gradient():
    shape, theta = small_net(0)
    x = np.ones(4) / 2.0
    f, g = core.value_and_grad(shape, theta, x)
    loss, lg = core.loss_and_grad(shape, theta, x, 0.25)
    assert loss == pytest.approx(0.5 * (f - 0.25) ** 2)
    np.testing.assert_allclose(lg, (f - 0.25) * g)


def test_plain_sgd_step():
    theta = np.array([1.0, 2.0])
    out = core.apply_step(theta, np.array([0.5, -1.0]), None, "plain-sgd", 0.1)
    np.testing.assert_allclose(out, [0.95, 2.1])
    np.testing.assert_array_equal(theta, [1.0, 2.0])  # input untouched


def test_adam_first_step_hand_unroll():
    # scalar hand recursion with g = 1, lr = 0.01
    b1, b2, eps, lr, g = 0.9, 0.999, 1e-8, 0.01, 1.0
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    mhat = m / (1 - b1)
    vhat = v / (1 - b2)
    expected = -lr * mhat / (math.sqrt(vhat) + eps)
    st_ = core.AdamState.zeros(1)
    out = core.apply_step(np.zeros(1), np.array([g]), st_, "adam", lr)
    assert out[0] == pytest.approx(expected, rel=1e-15)
    assert out[0] == pytest.approx(-0.01, rel=1e-6)
    assert st_.t == 1


def test_adam_two_steps_hand_unroll():
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.1
    grads = [0.3, -0.7]
    th, m, v = 0.5, 0.0, 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        th -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    st_ = core.AdamState.zeros(1)
    out = np.array([0.5])
    for g in grads:
        out = core.apply_step(out, np.array([g]), st_, "adam", lr)
    assert out[0] == pytest.approx(th, rel=1e-13)


def test_train_pass_equals_repeated_steps():
    shape, theta = small_net(1)
    rng = np.random.default_rng(0)
    X = rng.standard_normal((5, 4))
    r = rng.uniform(size=5)
    order = np.array([3, 0, 3, 1])
    for mode in ("plain-sgd", "adam"):
        a = theta.copy()
        core.train_pass(shape, a, X, r, order, core.Optimizer(mode, 0.05))
        b = theta.copy()
        st_ = core.AdamState.zeros(shape.n_params)
        for i in order:
            _, g = core.loss_and_grad(shape, b, X[i], r[i])
            b = core.apply_step(b, g, st_, mode, 0.05)
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)


def test_mean_loss_grad_is_average():
    shape, theta = small_net(2)
    rng = np.random.default_rng(1)
    X = rng.standard_normal((3, 4))
    r = np.array([0.1, 0.5, 0.9])
    loss, g = core.mean_loss_grad(shape, theta, X, r, [0, 2])
    l0, g0 = core.loss_and_grad(shape, theta, X[0], r[0])
    l2, g2 = core.loss_and_grad(shape, theta, X[2], r[2])
    assert loss == pytest.approx((l0 + l2) / 2)
    np.testing.assert_allclose(g, (g0 + g2) / 2, rtol=1e-12)


# ---------------------------------------------------------------- errors


def test_dimension_error():
    shape, theta = small_net(0)
    with pytest.raises(core.DimensionError) as ei:
        core.forward(shape, theta, np.ones(5))
    assert ei.value.expected == 4 and ei.value.actual == 5


def test_layout_errors():
    shape, theta = small_net(0)
    with pytest.raises(core.LayoutError):
        core.forward(shape, theta[:-1], np.ones(4))
    with pytest.raises(core.LayoutError):
        core.apply_step(theta, theta[:-1], None, "plain-sgd", 0.1)
    with pytest.raises(core.LayoutError):
        core.apply_step(theta, theta, None, "adam", 0.1)
    with pytest.raises(core.LayoutError):
        core.grad_l2_distance(theta, theta[:3])


@pytest.mark.parametrize("kw", [dict(input_dim=0, width=3), dict(input_dim=2, width=0), dict(input_dim=2, width=3, depth=1)])
def test_invalid_shape(kw):
    with pytest.raises(ValueError):
        core.NetworkShape(**kw)


def test_invalid_optimizer():
    with pytest.raises(ValueError):
        core.Optimizer("rmsprop", 0.1)
    with pytest.raises(ValueError):
        core.Optimizer("adam", 0.0)
    with pytest.raises(ValueError):
        core.apply_step(np.zeros(1), np.zeros(1), None, "plain-sgd", -1.0)


# ---------------------------------------------------------------- properties


@given(st.integers(0, 2**31), st.integers(1, 6), st.integers(1, 8), st.integers(2, 4))
def test_flatten_unflatten_round_trip(seed, d, m, L):
    shape = core.NetworkShape(d, m, L)
    theta = core.init_params(shape, seed)
    np.testing.assert_array_equal(core.flatten(core.unflatten(shape, theta)), theta)


@given(st.integers(0, 2**31), st.floats(0.01, 100.0))
def test_forward_homogeneous_in_output_layer(seed, c):
    shape, theta = small_net(seed, L=3)
    x = np.random.default_rng(seed).standard_normal(4)
    scaled = theta.copy()
    scaled[-shape.width:] *= c
    assert core.forward(shape, scaled, x) == pytest.approx(c * core.forward(shape, theta, x), rel=1e-12, abs=1e-14)


@given(st.integers(0, 2**31))
def test_forward_many_matches_forward(seed):
    shape = core.NetworkShape(3, 5, 3)
    rng = np.random.default_rng(seed)
    thetas = np.stack([core.init_params(shape, s) for s in rng.integers(0, 1000, 4)])
    x = rng.standard_normal(3)
    np.testing.assert_allclose(core.forward_many(shape, thetas, x),
                               [core.forward(shape, t, x) for t in thetas], rtol=1e-12, atol=1e-15)


@needs_ext
@given(st.integers(0, 2**31), st.integers(2, 4))
def test_compiled_matches_fallback(seed, L):
    rng = np.random.default_rng(seed)
    d, m = 5, 7
    shape = core.NetworkShape(d, m, L)
    theta = core.init_params(shape, seed)
    X = rng.standard_normal((6, d))
    r = rng.uniform(size=6)
    order = rng.integers(0, 6, 8).astype(np.int64)
    p = shape.n_params
    assert _kernels.forward(theta, X[0], d, m, L) == pytest.approx(_fallback.forward(theta, X[0], d, m, L), rel=1e-12, abs=1e-15)
    g1, g2 = np.empty(p), np.empty(p)
    _kernels.gradient(theta, X[0], d, m, L, g1)
    _fallback.gradient(theta, X[0], d, m, L, g2)
    np.testing.assert_allclose(g1, g2, rtol=1e-12, atol=1e-15)
    for fn in ("sgd_pass",):
        a, b = theta.copy(), theta.copy()
        _kernels.sgd_pass(a, X, r, order, 0.05, d, m, L)
        _fallback.sgd_pass(b, X, r, order, 0.05, d, m, L)
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-13)
    a, b = theta.copy(), theta.copy()
    ma, va, mb, vb = np.zeros(p), np.zeros(p), np.zeros(p), np.zeros(p)
    ta = _kernels.adam_pass(a, ma, va, 0, X, r, order, 0.01, 0.9, 0.999, 1e-8, d, m, L)
    tb = _fallback.adam_pass(b, mb, vb, 0, X, r, order, 0.01, 0.9, 0.999, 1e-8, d, m, L)
    assert ta == tb == len(order)
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-13)
    la = _kernels.mean_loss_grad(theta, X, r, order, d, m, L, g1)
    lb = _fallback.mean_loss_grad(theta, X, r, order, d, m, L, g2)
    assert la == pytest.approx(lb, rel=1e-12)
    np.testing.assert_allclose(g1, g2, rtol=1e-10, atol=1e-14)


def test_backend_reported():
    assert core.BACKEND in ("compiled", "python")
