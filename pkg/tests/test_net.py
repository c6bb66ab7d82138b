import numpy as np
import pytest

from ppde_nrde import net


def test_forward_zero_params_gives_zero():
    mlp = net.init_mlp([3, 4, 2], seed=0)
    for w in mlp.weights:
        w[...] = 0.0
    assert np.all(net.forward(mlp, np.ones(3)) == 0.0)


def test_forward_single_affine_layer():
    mlp = net.init_mlp([3, 2], seed=1)
    mlp.biases[0][...] = [0.5, -0.5]
    x = np.array([1.0, 2.0, -1.0])
    assert np.allclose(net.forward(mlp, x), mlp.weights[0] @ x + mlp.biases[0])


def _independent_forward(sizes, weights, biases, x):
    """Plain loop re-computation with explicit matrix indexing."""
    h = list(x)
    for layer, (w, b) in enumerate(zip(weights, biases)):
        out = []
        for i in range(w.shape[0]):
            acc = b[i]
            for j in range(w.shape[1]):
                acc += w[i, j] * h[j]
            out.append(acc)
        if layer < len(weights) - 1:
            out = [np.tanh(v) for v in out]
        h = out
    return np.array(h)


def test_forward_matches_independent_recomputation():
    rng = np.random.default_rng(5)
    mlp = net.init_mlp([4, 6, 3], seed=7)
    for _ in range(3):
        x = rng.standard_normal(4)
        want = _independent_forward(mlp.sizes, mlp.weights, mlp.biases, x)
        assert np.allclose(net.forward(mlp, x), want, atol=1e-13)


def test_forward_is_batched():
    mlp = net.init_mlp([3, 5, 2], seed=2)
    x = np.random.default_rng(0).standard_normal((4, 7, 3))
    y = net.forward(mlp, x)
    assert y.shape == (4, 7, 2)
    assert np.allclose(y[2, 3], net.forward(mlp, x[2, 3]))


def test_forward_rejects_bad_input():
    mlp = net.init_mlp([3, 2], seed=0)
    with pytest.raises(ValueError):
        net.forward(mlp, np.ones(4))
    with pytest.raises(ValueError):
        net.forward(mlp, np.array([1.0, np.nan, 0.0]))


def test_vjp_linear_layer_is_transpose():
    mlp = net.init_mlp([3, 2], seed=3)
    cot = np.array([1.0, -2.0])
    grad_x, grads = net.vjp(mlp, np.array([0.2, 0.4, -0.6]), cot)
    assert np.allclose(grad_x, mlp.weights[0].T @ cot)
    assert np.allclose(grads[0][1], cot)


def test_vjp_zero_cotangent():
    mlp = net.init_mlp([3, 4, 2], seed=4)
    grad_x, grads = net.vjp(mlp, np.ones(3), np.zeros(2))
    assert np.all(grad_x == 0)
    assert all(np.all(dw == 0) and np.all(db == 0) for dw, db in grads)


@pytest.mark.parametrize("sizes", [[2, 3], [3, 5, 1], [4, 8, 8, 2], [5, 45, 45, 45, 1]])
def test_vjp_matches_central_differences(sizes):
    rng = np.random.default_rng(11)
    mlp = net.init_mlp(sizes, seed=13)
    x = rng.standard_normal(sizes[0]) * 0.7
    cot = rng.standard_normal(sizes[-1])
    grad_x, grads = net.vjp(mlp, x, cot)
    flat = net.flatten_grads(mlp, grads)
    params = net.flatten_params(mlp)
    h = 1e-5
    picks = rng.choice(len(params), size=min(25, len(params)), replace=False)
    for idx in picks:
        bump = params.copy()
        bump[idx] += h
        net.set_params(mlp, bump)
        fp = float(net.forward(mlp, x) @ cot)
        bump[idx] -= 2 * h
        net.set_params(mlp, bump)
        fm = float(net.forward(mlp, x) @ cot)
        net.set_params(mlp, params)
        fd = (fp - fm) / (2 * h)
        assert abs(fd - flat[idx]) <= 1e-6 * max(1.0, abs(fd))
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        fd = float((net.forward(mlp, x + e) - net.forward(mlp, x - e)) @ cot) / (2 * h)
        assert abs(fd - grad_x[j]) <= 1e-6 * max(1.0, abs(fd))


def test_vjp_shape_mismatch():
    mlp = net.init_mlp([3, 2], seed=0)
    with pytest.raises(ValueError):
        net.vjp(mlp, np.ones(3), np.ones(3))


def test_init_is_deterministic_and_in_bounds():
    a = net.init_mlp([4, 7, 2], seed=99)
    b = net.init_mlp([4, 7, 2], seed=99)
    c = net.init_mlp([4, 7, 2], seed=100)
    for wa, wb in zip(a.weights, b.weights):
        assert np.array_equal(wa, wb)
    assert not all(np.array_equal(wa, wc) for wa, wc in zip(a.weights, c.weights))
    assert np.all(np.abs(a.weights[0]) <= np.sqrt(1 / 4))
    assert np.all(np.abs(a.weights[1]) <= np.sqrt(1 / 7))
    assert all(np.all(b == 0) for b in a.biases)


def test_param_flatten_roundtrip():
    mlp = net.init_mlp([3, 5, 2], seed=21)
    vec = net.flatten_params(mlp)
    assert len(vec) == mlp.n_params == (3 + 1) * 5 + (5 + 1) * 2
    net.set_params(mlp, vec * 2.0)
    assert np.allclose(net.flatten_params(mlp), vec * 2.0)
    with pytest.raises(ValueError):
        net.set_params(mlp, vec[:-1])


def test_adagrad_first_step_size():
    state = net.AdagradState(3, lr=0.1, eps=1e-10)
    p = np.zeros(3)
    p2 = net.adagrad_step(state, p, np.ones(3))
    assert np.allclose(p2, -0.1, rtol=1e-9)


def test_adagrad_zero_gradient_keeps_params():
    state = net.AdagradState(4, lr=0.5)
    p = np.arange(4.0)
    assert np.array_equal(net.adagrad_step(state, p, np.zeros(4)), p)


def test_adagrad_steps_shrink():
    state = net.AdagradState(1, lr=0.1)
    p0 = np.array([0.0])
    p1 = net.adagrad_step(state, p0, np.array([2.0]))
    p2 = net.adagrad_step(state, p1, np.array([2.0]))
    assert abs(p2[0] - p1[0]) < abs(p1[0] - p0[0])
    assert np.all(np.diff([0.0, *state.acc]) >= 0)


def test_adagrad_validation():
    with pytest.raises(ValueError):
        net.AdagradState(3, lr=-1.0)
    state = net.AdagradState(3)
    with pytest.raises(ValueError):
        net.adagrad_step(state, np.zeros(2), np.zeros(2))
