"""Approximator correctness: exact gradients, optimizer, soft updates.

Every backward path is checked against central finite differences; the
optimizer is checked on problems with known optima.
"""
import numpy as np
import pytest

from tsopt.nn import (
    AdamState,
    Mlp,
    NonFiniteGradientError,
    adam_step,
    load_mlp,
    save_mlp,
    soft_update,
)


def numeric_grads(net: Mlp, x: np.ndarray, upstream: np.ndarray, h: float = 1e-6):
    """Central finite differences of sum(upstream * forward(x))."""

    def objective():
        return float(np.sum(upstream * net.forward(x)))

    grads = []
    for w, b in zip(net.weights, net.biases):
        dw = np.zeros_like(w)
        for i in np.ndindex(w.shape):
            old = w[i]
            w[i] = old + h
            up = objective()
            w[i] = old - h
            down = objective()
            w[i] = old
            dw[i] = (up - down) / (2 * h)
        db = np.zeros_like(b)
        for i in np.ndindex(b.shape):
            old = b[i]
            b[i] = old + h
            up = objective()
            b[i] = old - h
            down = objective()
            b[i] = old
            db[i] = (up - down) / (2 * h)
        grads.append((dw, db))
    return grads


def assert_close(analytic, numeric, tol):
    for (aw, ab), (nw, nb) in zip(analytic, numeric):
        assert np.allclose(aw, nw, rtol=tol, atol=tol)
        assert np.allclose(ab, nb, rtol=tol, atol=tol)


def test_zeroed_net_outputs_zero():
    net = Mlp((3, 4, 2), seed=0).zero_()
    assert np.allclose(net.forward(np.ones(3)), 0.0)


def test_single_linear_layer_is_affine():
    net = Mlp((3, 2), seed=1)
    x = np.array([0.5, -1.0, 2.0])
    want = net.weights[0] @ x + net.biases[0]
    assert np.allclose(net.forward(x), want)


def test_tanh_head_stays_inside_unit_box():
    net = Mlp((4, 8, 3), output="tanh", seed=2)
    rng = np.random.default_rng(0)
    out = net.forward(rng.uniform(-5, 5, size=(50, 4)))
    assert np.all(out > -1.0) and np.all(out < 1.0)


def test_linear_param_gradient_is_outer_product():
    net = Mlp((3, 2), seed=3)
    x = np.array([1.0, -2.0, 0.5])
    upstream = np.array([0.7, -0.3])
    grads, dx = net.backward(x, upstream)
    assert np.allclose(grads[0][0], np.outer(upstream, x))
    assert np.allclose(grads[0][1], upstream)
    assert np.allclose(dx, net.weights[0].T @ upstream)


def test_zero_upstream_gives_zero_gradients():
    net = Mlp((3, 5, 2), seed=4)
    grads, dx = net.backward(np.ones(3), np.zeros(2))
    for dw, db in grads:
        assert np.allclose(dw, 0.0) and np.allclose(db, 0.0)
    assert np.allclose(dx, 0.0)


@pytest.mark.parametrize("output", ["identity", "tanh"])
@pytest.mark.parametrize("sizes", [(2, 3), (3, 4, 2), (2, 5, 4, 1)])
def test_backward_matches_finite_differences(output, sizes):
    rng = np.random.default_rng([len(output), *sizes])
    net = Mlp(sizes, output=output, seed=int(rng.integers(1000)))
    x = rng.normal(size=sizes[0])
    upstream = rng.normal(size=sizes[-1])
    analytic, _ = net.backward(x, upstream)
    numeric = numeric_grads(net, x, upstream)
    assert_close(analytic, numeric, 1e-4)


def test_backward_batched_sums_over_batch():
    net = Mlp((3, 4, 2), seed=5)
    rng = np.random.default_rng(1)
    xs = rng.normal(size=(6, 3))
    ups = rng.normal(size=(6, 2))
    batched, dxs = net.backward(xs, ups)
    for k in range(net.num_layers):
        dw = sum(net.backward(xs[i], ups[i])[0][k][0] for i in range(6))
        assert np.allclose(batched[k][0], dw)
    assert dxs.shape == (6, 3)
    numeric = numeric_grads(net, xs, ups)
    assert_close(batched, numeric, 1e-4)


def test_input_gradient_matches_finite_differences():
    net = Mlp((3, 4, 2), output="tanh", seed=6)
    rng = np.random.default_rng(2)
    x = rng.normal(size=3)
    upstream = rng.normal(size=2)
    _, dx = net.backward(x, upstream)
    h = 1e-6
    for i in range(3):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        want = (np.sum(upstream * net.forward(xp)) - np.sum(upstream * net.forward(xm))) / (2 * h)
        assert abs(dx[i] - want) < 1e-6


def test_adam_zero_gradient_is_a_no_op():
    net = Mlp((2, 2), seed=7)
    before = [w.copy() for w in net.weights]
    state = AdamState.for_net(net, lr=0.1)
    adam_step(net, [(np.zeros((2, 2)), np.zeros(2))], state)
    for w, old in zip(net.weights, before):
        assert np.array_equal(w, old)


def test_adam_descends_a_scalar_quadratic():
    net = Mlp((1, 1), seed=8).zero_()
    net.weights[0][0, 0] = 1.0
    state = AdamState.for_net(net, lr=0.05)

    def f():
        return net.weights[0][0, 0] ** 2

    before = f()
    adam_step(net, [(np.array([[2 * net.weights[0][0, 0]]]), np.zeros(1))], state)
    assert f() < before


def test_adam_converges_on_convex_quadratic():
    net = Mlp((3, 2), seed=9)
    target_w = np.arange(6, dtype=float).reshape(2, 3)
    target_b = np.array([0.5, -0.5])
    state = AdamState.for_net(net, lr=0.01)
    for _ in range(5000):
        grads = [(2 * (net.weights[0] - target_w), 2 * (net.biases[0] - target_b))]
        adam_step(net, grads, state)
    loss = float(np.sum((net.weights[0] - target_w) ** 2) + np.sum((net.biases[0] - target_b) ** 2))
    assert loss < 1e-6


def test_adam_rejects_non_finite_gradients():
    net = Mlp((2, 2), seed=10)
    state = AdamState.for_net(net, lr=0.1)
    bad = [(np.full((2, 2), np.nan), np.zeros(2))]
    with pytest.raises(NonFiniteGradientError):
        adam_step(net, bad, state)


def test_soft_update_blends_and_converges():
    target = Mlp((2, 3), seed=11).zero_()
    online = Mlp((2, 3), seed=12)
    for w in online.weights:
        w[:] = 1.0
    for b in online.biases:
        b[:] = 1.0
    soft_update(target, online, tau=0.01)
    assert np.allclose(target.weights[0], 0.01)
    assert np.allclose(target.biases[0], 0.01)
    for _ in range(2000):
        soft_update(target, online, tau=0.01)
    assert np.allclose(target.weights[0], 1.0, atol=1e-8)
    full = Mlp((2, 3), seed=13).zero_()
    soft_update(full, online, tau=1.0)
    assert np.array_equal(full.weights[0], online.weights[0])


def test_soft_update_shape_mismatch_raises():
    with pytest.raises(ValueError):
        soft_update(Mlp((2, 3), seed=0), Mlp((2, 4), seed=0), 0.5)
    with pytest.raises(ValueError):
        soft_update(Mlp((2, 3), seed=0), Mlp((2, 3), seed=0), 1.5)


def test_mlp_json_roundtrip(tmp_path):
    net = Mlp((3, 5, 2), output="tanh", seed=14)
    path = tmp_path / "net.json"
    save_mlp(net, path)
    clone = load_mlp(path)
    x = np.array([0.1, -0.2, 0.3])
    assert np.array_equal(clone.forward(x), net.forward(x))
    assert clone.sizes == net.sizes and clone.output == net.output


def test_constructor_validation():
    with pytest.raises(ValueError):
        Mlp((3,), seed=0)
    with pytest.raises(ValueError):
        Mlp((3, 0), seed=0)
    with pytest.raises(ValueError):
        Mlp((3, 2), output="relu", seed=0)
    net = Mlp((3, 2), seed=0)
    with pytest.raises(ValueError):
        net.forward(np.ones(4))
