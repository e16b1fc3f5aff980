import numpy as np
import pytest

from dynrad.diffcore import grad_check, sample_indices, sh_encode, softplus
from dynrad.fields import (FieldConfig, SceneModels, STAGE_A, STAGE_B,
                           aggregate_temporal, aggregation_weights,
                           shade_points, shade_backward)


def tiny_models(rng=None, n_frames=5, dtype=np.float64, **over):
    kw = dict(n_levels=2, table_size=256, n_features=2, base_res=4,
              growth=2.0, geo_dim=6, base_hidden=16, color_hidden=16,
              shadow_hidden=8, flow_hidden=16, time_freqs=2,
              flow_pos_freqs=2, flow_time_freqs=1, shadow_pos_freqs=1)
    kw.update(over)
    return SceneModels(FieldConfig(**kw), n_frames, rng, dtype=dtype)


def test_zero_init_density_is_uniform_softplus_zero():
    models = tiny_models(rng=None)
    x = np.random.default_rng(0).uniform(-0.8, 0.8, size=(10, 3))
    sigma, _, _ = models.query_static(x)
    np.testing.assert_allclose(sigma, softplus(0.0), atol=1e-12)


def test_static_query_deterministic():
    models = tiny_models(rng=np.random.default_rng(1))
    x = np.random.default_rng(2).uniform(-1, 1, size=(6, 3))
    s1, f1, _ = models.query_static(x)
    s2, f2, _ = models.query_static(x)
    assert np.array_equal(s1, s2) and np.array_equal(f1, f2)


def test_static_nonfinite_input_rejected():
    models = tiny_models()
    with pytest.raises(ValueError):
        models.query_static(np.array([[np.nan, 0.0, 0.0]]))


def test_static_hand_set_single_layer():
    # collapse the base MLP to a bias-only map and check the affine chain
    models = tiny_models(rng=None)
    models.store.view("static_mlp.b2")[:] = np.arange(7) * 0.1
    x = np.zeros((1, 3))
    sigma, feat, _ = models.query_static(x)
    np.testing.assert_allclose(sigma, softplus(0.0), atol=1e-12)
    np.testing.assert_allclose(feat[0], np.arange(1, 7) * 0.1, atol=1e-12)


def test_dynamic_zero_init_time_invariant():
    models = tiny_models(rng=None)
    x = np.random.default_rng(3).uniform(-0.5, 0.5, size=(4, 3))
    s1, f1, _ = models.query_dynamic_raw(x, np.full(4, 0.2))
    s2, f2, _ = models.query_dynamic_raw(x, np.full(4, 0.8))
    np.testing.assert_array_equal(s1, s2)
    np.testing.assert_array_equal(f1, f2)


def test_flow_zero_at_init():
    # random trunk but zeroed last layer: flow must be exactly zero
    models = tiny_models(rng=np.random.default_rng(4))
    x = np.random.default_rng(5).uniform(-2, 2, size=(8, 3))
    vf, vb, _ = models.query_flow(x, np.linspace(0, 1, 8))
    np.testing.assert_array_equal(vf, 0)
    np.testing.assert_array_equal(vb, 0)


def test_flow_norm_clamped():
    models = tiny_models(rng=np.random.default_rng(6))
    # blow up the last layer to force saturation
    models.store.view("flow_mlp.w2")[:] = 30.0
    models.store.view("flow_mlp.b2")[:] = 10.0
    x = np.random.default_rng(7).uniform(-2, 2, size=(50, 3))
    vf, vb, _ = models.query_flow(x, np.linspace(0, 1, 50))
    assert np.all(np.linalg.norm(vf, axis=1) <= models.cfg.flow_max + 1e-9)
    assert np.all(np.linalg.norm(vb, axis=1) <= models.cfg.flow_max + 1e-9)


def test_aggregation_weights_paper_values():
    wp, wc, wn = aggregation_weights([True], [True])
    assert (wp[0], wc[0], wn[0]) == (0.25, 0.5, 0.25)


def test_aggregation_weights_boundaries():
    wp, wc, wn = aggregation_weights([False], [True])
    np.testing.assert_allclose([wp[0], wc[0], wn[0]], [0, 2 / 3, 1 / 3])
    wp, wc, wn = aggregation_weights([True], [False])
    np.testing.assert_allclose([wp[0], wc[0], wn[0]], [1 / 3, 2 / 3, 0])
    wp, wc, wn = aggregation_weights([False], [False])
    np.testing.assert_allclose([wp[0], wc[0], wn[0]], [0, 1, 0])
    for flags in [(True, True), (False, True), (True, False)]:
        wp, wc, wn = aggregation_weights([flags[0]], [flags[1]])
        assert abs(wp[0] + wc[0] + wn[0] - 1.0) < 1e-15


def test_aggregate_equal_inputs_identity():
    # all three queries equal (zero flow, time-invariant zero-init model)
    models = tiny_models(rng=None)
    x = np.random.default_rng(8).uniform(-0.5, 0.5, size=(4, 3))
    t = np.full(4, 0.5)
    z = np.zeros((4, 3))
    sigma, feat, _ = aggregate_temporal(models, x, t, 0.25,
                                        np.ones(4, bool), np.ones(4, bool),
                                        z, z)
    s_c, f_c, _ = models.query_dynamic_raw(x, t)
    np.testing.assert_allclose(sigma, s_c, atol=1e-12)
    np.testing.assert_allclose(feat, f_c, atol=1e-12)


def test_aggregate_hand_values():
    # densities (1, 2, 3) at (t-1, t, t+1) -> 0.25*1 + 0.5*2 + 0.25*3 = 2.0
    assert 0.25 * 1 + 0.5 * 2 + 0.25 * 3 == 2.0
    wp, wc, wn = aggregation_weights([True], [True])
    assert wp[0] * 1 + wc[0] * 2 + wn[0] * 3 == 2.0


def test_aggregate_is_convex_combination():
    rng = np.random.default_rng(9)
    models = tiny_models(rng=rng)
    x = rng.uniform(-0.5, 0.5, size=(20, 3))
    t = rng.uniform(0.3, 0.7, size=20)
    vf, vb, _ = models.query_flow(x, t)
    hp = rng.random(20) > 0.3
    hn = rng.random(20) > 0.3
    sigma, feat, _ = aggregate_temporal(models, x, t, 0.2, hp, hn, vf, vb)
    wp, wc, wn = aggregation_weights(hp, hn)
    s_c, f_c, _ = models.query_dynamic_raw(x, t)
    s_p, f_p, _ = models.query_dynamic_raw(x + vb, t - 0.2)
    s_n, f_n, _ = models.query_dynamic_raw(x + vf, t + 0.2)
    stack = np.stack([np.where(hp, s_p, s_c), s_c, np.where(hn, s_n, s_c)])
    assert np.all(sigma >= stack.min(axis=0) - 1e-12)
    assert np.all(sigma <= stack.max(axis=0) + 1e-12)


def test_shadow_zero_init_is_half():
    models = tiny_models(rng=None)
    feat = np.zeros((3, 6))
    rho, _ = models.query_shadow(feat, np.zeros((3, 3)))
    np.testing.assert_allclose(rho, 0.5, atol=1e-12)


def test_shadow_always_in_unit_interval():
    rng = np.random.default_rng(10)
    models = tiny_models(rng=rng)
    feat = rng.normal(size=(200, 6)) * 5
    x = rng.uniform(-2, 2, size=(200, 3))
    rho, _ = models.query_shadow(feat, x)
    assert np.all(rho >= 0) and np.all(rho <= 1)


def test_color_zero_init_is_half_gray():
    models = tiny_models(rng=None)
    d = np.tile([0.0, 0.0, 1.0], (2, 1))
    c, _ = models.query_color_dir(np.zeros((2, 6)), d)
    np.testing.assert_allclose(c, 0.5, atol=1e-12)


def test_color_requires_unit_direction():
    models = tiny_models()
    with pytest.raises(ValueError):
        models.query_color_dir(np.zeros((1, 6)), np.array([[0.0, 0.0, 2.0]]))


def test_color_deterministic_and_hand_case():
    rng = np.random.default_rng(11)
    models = tiny_models(rng=rng)
    feat = rng.normal(size=(3, 6))
    d = rng.normal(size=(3, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    c1, _ = models.query_color_dir(feat, d)
    c2, _ = models.query_color_dir(feat, d)
    np.testing.assert_array_equal(c1, c2)
    # hand case: zero weights, bias b -> sigmoid(b)
    models2 = tiny_models(rng=None)
    models2.store.view("color_mlp.b2")[:] = [1.0, 0.0, -1.0]
    c, _ = models2.query_color_dir(np.zeros((1, 6)), np.array([[0.0, 0, 1.0]]))
    expect = 1 / (1 + np.exp(-np.array([1.0, 0.0, -1.0])))
    np.testing.assert_allclose(c[0], expect, atol=1e-12)


def test_stage_a_freezes_dynamic_branch():
    rng = np.random.default_rng(12)
    models = tiny_models(rng=rng)
    # give the dynamic branch wild weights; stage A must ignore them
    models.store.view("dyn_mlp.b2")[:] = 9.0
    x = rng.uniform(-0.5, 0.5, size=(5, 3))
    sh = sh_encode(np.tile([0.0, 0.0, 1.0], (5, 1)))
    t = np.full(5, 0.5)
    flags = np.ones(5, bool)
    out, _ = shade_points(models, x, sh, t, 0.25, flags, flags, STAGE_A)
    assert np.all(out["sigma_d"] == 0)
    assert np.all(out["rho"] == 0)


def test_stage_b_zero_init_dynamic():
    models = tiny_models(rng=None)
    x = np.zeros((2, 3))
    sh = sh_encode(np.tile([0.0, 0.0, 1.0], (2, 1)))
    t = np.full(2, 0.5)
    flags = np.ones(2, bool)
    out, _ = shade_points(models, x, sh, t, 0.25, flags, flags, STAGE_B)
    np.testing.assert_allclose(out["sigma_d"], softplus(0.0), atol=1e-12)
    np.testing.assert_allclose(out["rho"], 0.5, atol=1e-12)


def test_shade_matches_scripted_composition():
    """Scripted oracle: compose the documented pipeline step by step and
    compare with shade_points."""
    rng = np.random.default_rng(13)
    models = tiny_models(rng=rng)
    x = rng.uniform(-0.5, 0.5, size=(4, 3))
    d = rng.normal(size=(4, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    sh = sh_encode(d)
    t = np.full(4, 0.5)
    flags = np.ones(4, bool)
    out, _ = shade_points(models, x, sh, t, 0.25, flags, flags, STAGE_B)

    vf, vb, _ = models.query_flow(x, t)
    s_c, f_c, _ = models.query_dynamic_raw(x, t)
    s_p, f_p, _ = models.query_dynamic_raw(x + vb, t - 0.25)
    s_n, f_n, _ = models.query_dynamic_raw(x + vf, t + 0.25)
    sigma_d = 0.25 * s_p + 0.5 * s_c + 0.25 * s_n
    feat_d = 0.25 * f_p + 0.5 * f_c + 0.25 * f_n
    rho, _ = models.query_shadow(feat_d, x)
    c_d, _ = models.query_color(feat_d, sh)
    np.testing.assert_allclose(out["sigma_d"], sigma_d, atol=1e-12)
    np.testing.assert_allclose(out["rho"], rho, atol=1e-12)
    np.testing.assert_allclose(out["c_d"], c_d, atol=1e-12)


def test_flow_displacement_gradient():
    """d sigma_hat / d v_f matches finite differences through the
    displaced query (rel err < 1e-3, f64)."""
    rng = np.random.default_rng(14)
    models = tiny_models(rng=rng)
    x = rng.uniform(-0.4, 0.4, size=(3, 3))
    t = np.full(3, 0.5)
    flags = np.ones(3, bool)
    dsig = rng.normal(size=3)

    def f(vf_flat):
        vf = vf_flat.reshape(3, 3)
        sigma, _, _ = aggregate_temporal(models, x, t, 0.25, flags, flags,
                                         vf, np.zeros((3, 3)))
        return float(np.sum(sigma * dsig))

    vf0 = rng.uniform(-0.05, 0.05, size=(3, 3))
    sigma, feat, cache = aggregate_temporal(models, x, t, 0.25, flags, flags,
                                            vf0, np.zeros((3, 3)))
    from dynrad.fields import aggregate_backward
    grads = models.store.new_grad()
    _, dvf, _ = aggregate_backward(models, cache, dsig, np.zeros_like(feat),
                                   grads)
    assert grad_check(f, vf0.ravel().copy(), dvf.ravel(), h=1e-5) < 1e-3


def test_shade_backward_full_gradcheck():
    rng = np.random.default_rng(15)
    models = tiny_models(rng=rng)
    B = 4
    x0 = rng.uniform(-0.5, 0.5, size=(B, 3))
    d = rng.normal(size=(B, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    sh0 = sh_encode(d)
    t = rng.uniform(0.3, 0.7, size=B)
    hp = np.array([True, True, False, True])
    hn = np.array([True, False, True, True])
    up = {"sigma_s": rng.normal(size=B), "sigma_d": rng.normal(size=B),
          "c_s": rng.normal(size=(B, 3)), "c_d": rng.normal(size=(B, 3)),
          "rho": rng.normal(size=B), "v_f": rng.normal(size=(B, 3)),
          "v_b": rng.normal(size=(B, 3))}

    def value():
        out, _ = shade_points(models, x0, sh0, t, 0.25, hp, hn, STAGE_B)
        return sum(float(np.sum(out[k] * v)) for k, v in up.items())

    def f_params(flat):
        models.store.flat[:] = flat
        return value()

    out, cache = shade_points(models, x0, sh0, t, 0.25, hp, hn, STAGE_B)
    grads = models.store.new_grad()
    dx, dsh = shade_backward(models, cache, up, grads)

    p0 = models.store.flat.copy()
    idx = sample_indices(models.store.size, 200, rng)
    assert grad_check(f_params, p0, grads.flat, h=1e-5, indices=idx) < 1e-4
    models.store.flat[:] = p0

    def f_x(flat):
        nonlocal x0
        keep = x0
        x0 = flat.reshape(B, 3)
        v = value()
        x0 = keep
        return v

    assert grad_check(f_x, x0.ravel().copy(), dx.ravel(), h=1e-5) < 1e-4

    def f_sh(flat):
        nonlocal sh0
        keep = sh0
        sh0 = flat.reshape(B, -1)
        v = value()
        sh0 = keep
        return v

    assert grad_check(f_sh, sh0.ravel().copy(), dsh.ravel(), h=1e-5) < 1e-4
