import numpy as np
import pytest

from dynrad.diffcore import ParamStore, HashGrid, grad_check, sample_indices


def small_grid(rng=None, n_levels=2, table_size=64, base_res=4, growth=1.5,
               n_features=2):
    store = ParamStore(dtype=np.float64)
    grid = HashGrid(store, "g", n_levels=n_levels, table_size=table_size,
                    n_features=n_features, base_res=base_res, growth=growth,
                    rng=rng, init_scale=0.5)
    store.finalize()
    return store, grid


def test_table_size_must_be_power_of_two():
    store = ParamStore()
    with pytest.raises(ValueError):
        HashGrid(store, "g", table_size=100)


def test_resolutions_strictly_increase():
    store = ParamStore()
    with pytest.raises(ValueError):
        HashGrid(store, "g", n_levels=4, base_res=2, growth=1.01)


def test_query_at_vertex_returns_stored_feature():
    rng = np.random.default_rng(0)
    store, grid = small_grid(rng=rng, n_levels=1, base_res=4)
    # vertex (1,2,3) of the level-0 grid with resolution 4
    x = np.array([[0.25, 0.5, 0.75]])
    feat, _ = grid.forward(x)
    slot = grid._hash(np.array([[1, 2, 3]], dtype=np.int64))[0]
    np.testing.assert_allclose(feat[0], store.view("g.level0")[slot], atol=1e-12)


def test_cell_center_is_mean_of_corners():
    rng = np.random.default_rng(1)
    store, grid = small_grid(rng=rng, n_levels=1, base_res=4)
    x = np.array([[0.125, 0.125, 0.125]])  # center of cell (0,0,0)
    feat, _ = grid.forward(x)
    corners = np.array([[cx, cy, cz] for cx in (0, 1) for cy in (0, 1) for cz in (0, 1)],
                       dtype=np.int64)
    slots = grid._hash(corners)
    mean = store.view("g.level0")[slots].mean(axis=0)
    np.testing.assert_allclose(feat[0], mean, atol=1e-12)


def test_outside_unit_cube_raises():
    _, grid = small_grid()
    with pytest.raises(ValueError):
        grid.forward(np.array([[1.2, 0.0, 0.0]]))


def test_zero_dfeat_gives_zero_grads():
    rng = np.random.default_rng(2)
    store, grid = small_grid(rng=rng)
    x = rng.uniform(0.01, 0.99, size=(5, 3))
    _, cache = grid.forward(x)
    grads = store.new_grad()
    dx = grid.backward(cache, np.zeros((5, grid.out_dim)), grads)
    assert np.all(grads.flat == 0)
    assert np.all(dx == 0)


def test_vertex_query_scatters_to_single_slot():
    rng = np.random.default_rng(3)
    store, grid = small_grid(rng=rng, n_levels=1, base_res=4)
    x = np.array([[0.25, 0.5, 0.75]])
    _, cache = grid.forward(x)
    grads = store.new_grad()
    g = np.array([[1.5, -2.0]])
    grid.backward(cache, g, grads)
    slot = grid._hash(np.array([[1, 2, 3]], dtype=np.int64))[0]
    gtab = grads.view("g.level0")
    np.testing.assert_allclose(gtab[slot], g[0])
    mask = np.ones(len(gtab), dtype=bool)
    mask[slot] = False
    assert np.all(gtab[mask] == 0)


def test_table_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    store, grid = small_grid(rng=rng)
    x = rng.uniform(0.05, 0.95, size=(4, 3))
    dfeat = rng.normal(size=(4, grid.out_dim))

    def f(flat):
        store.flat[:] = flat
        feat, _ = grid.forward(x)
        return float(np.sum(feat * dfeat))

    _, cache = grid.forward(x)
    grads = store.new_grad()
    grid.backward(cache, dfeat, grads)
    idx = sample_indices(store.size, 80, rng)
    err = grad_check(f, store.flat.copy(), grads.flat, h=1e-4, indices=idx)
    assert err < 1e-4


def test_position_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    store, grid = small_grid(rng=rng)
    # keep probes away from cell faces so the finite difference stays inside
    # one trilinear patch
    x0 = rng.uniform(0.05, 0.95, size=(4, 3))
    x0 = np.round(x0 * 64) / 64 + 1 / 128
    dfeat = rng.normal(size=(4, grid.out_dim))

    def f(flat_x):
        feat, _ = grid.forward(flat_x.reshape(4, 3))
        return float(np.sum(feat * dfeat))

    _, cache = grid.forward(x0)
    dx = grid.backward(cache, dfeat, store.new_grad())
    err = grad_check(f, x0.ravel().copy(), dx.ravel(), h=1e-5)
    assert err < 1e-4


def test_encoding_is_continuous():
    rng = np.random.default_rng(6)
    _, grid = small_grid(rng=rng)
    x = rng.uniform(0.1, 0.9, size=(50, 3))
    eps = 1e-7
    f1, _ = grid.forward(x)
    f2, _ = grid.forward(x + eps)
    # Lipschitz bound: finest resolution times max feature scale times 3 axes
    bound = 3 * grid.resolutions[-1] * 0.5 * eps * 8
    assert np.max(np.abs(f1 - f2)) < bound
