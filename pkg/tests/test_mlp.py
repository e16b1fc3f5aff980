import numpy as np
import pytest

from dynrad.diffcore import ParamStore, Mlp, grad_check


def build_mlp(dims, acts, rng=None, dtype=np.float64):
    store = ParamStore(dtype=dtype)
    mlp = Mlp(store, "net", dims, acts, rng=rng)
    store.finalize()
    return store, mlp


def test_zero_weights_return_bias():
    store, mlp = build_mlp([3, 2], ["linear"])
    store.view("net.b0")[:] = [0.7, -0.3]
    y, _ = mlp.forward(np.array([[1.0, 2.0, 3.0]]))
    np.testing.assert_allclose(y, [[0.7, -0.3]])


def test_identity_layer():
    store, mlp = build_mlp([2, 2], ["linear"])
    store.view("net.w0")[:] = np.eye(2)
    y, _ = mlp.forward(np.array([[0.3, -0.2]]))
    np.testing.assert_allclose(y, [[0.3, -0.2]])


def test_two_layer_hand_evaluation():
    # relu(x) @ W2 + b2 with x=(-1,2): relu -> (0,2); (0+2) + 0.5 = 2.5
    store, mlp = build_mlp([2, 2, 1], ["relu", "linear"])
    store.view("net.w0")[:] = np.eye(2)
    store.view("net.w1")[:] = [[1.0, 1.0]]
    store.view("net.b1")[:] = [0.5]
    y, _ = mlp.forward(np.array([[-1.0, 2.0]]))
    np.testing.assert_allclose(y, [[2.5]])


def test_dimension_mismatch_raises():
    _, mlp = build_mlp([3, 2], ["linear"])
    with pytest.raises(ValueError):
        mlp.forward(np.zeros((1, 4)))


def test_zero_upstream_gradient():
    rng = np.random.default_rng(0)
    store, mlp = build_mlp([3, 4, 2], ["relu", "linear"], rng=rng)
    x = rng.normal(size=(5, 3))
    _, cache = mlp.forward(x)
    grads = store.new_grad()
    dx = mlp.backward(cache, np.zeros((5, 2)), grads)
    assert np.all(grads.flat == 0)
    assert np.all(dx == 0)


def test_single_linear_layer_calculus():
    # dx = W^T dy, dW = dy x^T
    rng = np.random.default_rng(1)
    store, mlp = build_mlp([3, 2], ["linear"], rng=rng)
    x = rng.normal(size=(1, 3))
    dy = rng.normal(size=(1, 2))
    _, cache = mlp.forward(x)
    grads = store.new_grad()
    dx = mlp.backward(cache, dy, grads)
    W = store.view("net.w0")
    np.testing.assert_allclose(dx, dy @ W)
    np.testing.assert_allclose(grads.view("net.w0"), dy.T @ x)
    np.testing.assert_allclose(grads.view("net.b0"), dy[0])


@pytest.mark.parametrize("acts", [["relu", "relu", "linear"],
                                  ["relu", "relu", "sigmoid"],
                                  ["tanh", "relu", "softplus"]])
def test_random_net_matches_finite_differences(acts):
    rng = np.random.default_rng(42)
    store, mlp = build_mlp([4, 8, 8, 3], acts, rng=rng)
    x = rng.normal(size=(6, 4))
    dy = rng.normal(size=(6, 3))

    def f(flat):
        store.flat[:] = flat
        y, _ = mlp.forward(x)
        return float(np.sum(y * dy))

    _, cache = mlp.forward(x)
    grads = store.new_grad()
    mlp.backward(cache, dy, grads)
    err = grad_check(f, store.flat.copy(), grads.flat, h=1e-4)
    assert err < 1e-4


def test_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    store, mlp = build_mlp([4, 8, 2], ["relu", "linear"], rng=rng)
    x0 = rng.normal(size=(3, 4))
    dy = rng.normal(size=(3, 2))

    def f(flat_x):
        y, _ = mlp.forward(flat_x.reshape(3, 4))
        return float(np.sum(y * dy))

    _, cache = mlp.forward(x0)
    dx = mlp.backward(cache, dy, store.new_grad())
    err = grad_check(f, x0.ravel().copy(), dx.ravel(), h=1e-4)
    assert err < 1e-4


def test_forward_is_deterministic():
    rng = np.random.default_rng(3)
    store, mlp = build_mlp([3, 16, 2], ["relu", "sigmoid"], rng=rng)
    x = rng.normal(size=(10, 3))
    y1, _ = mlp.forward(x)
    y2, _ = mlp.forward(x)
    assert np.array_equal(y1, y2)
