"""Static and dynamic radiance fields.

A SceneModels bundle holds, for one sub-scene:
  * a static field (hash grid -> base MLP -> density + feature),
  * a dynamic field conditioned on time (hash grid + sinusoidal time
    features -> base MLP), whose density/feature are aggregated over the
    two adjacent timesteps through predicted 3D scene flow,
  * a flow head mapping (position, time) to forward/backward 3D flow,
  * a shadow head mapping the aggregated dynamic feature plus a
    low-frequency position encoding to a weight in [0, 1],
  * a single color head shared by both fields, conditioned on a
    spherical-harmonics view-direction basis,
  * a learnable background color,
  * the per-frame pose increments (the pose table).

shade_points / shade_backward run the whole per-sample pipeline with
hand-derived gradients, including the chain through the flow displacement
and back to the sample positions (which is what lets pose gradients flow).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .contraction import (contract, contract_backward, to_unit_cube,
                          unit_cube_backward)
from .diffcore import (GradBuffer, HashGrid, Mlp, ParamStore, sigmoid,
                       sinusoid_backward, sinusoid_dim, sinusoid_encode,
                       softplus)

STAGE_A = "A"  # progressive pose + static only
STAGE_B = "B"  # dynamic branch active


@dataclass
class FieldConfig:
    n_levels: int = 8
    table_size: int = 2 ** 14
    n_features: int = 2
    base_res: int = 16
    growth: float = 1.5
    geo_dim: int = 15
    base_hidden: int = 64
    color_hidden: int = 64
    shadow_hidden: int = 32
    flow_hidden: int = 64
    time_freqs: int = 4
    flow_pos_freqs: int = 4
    flow_time_freqs: int = 2
    shadow_pos_freqs: int = 2
    flow_max: float = 0.5
    density_bias: float = 0.0
    sh_dim: int = 16


def _softclamp_forward(raw, vmax):
    """Norm-limited smooth clamp: v = r * vmax*tanh(|r|/vmax)/|r|."""
    n = np.linalg.norm(raw, axis=-1, keepdims=True)
    small = n < 1e-4 * vmax
    safe_n = np.where(small, 1.0, n)
    g = np.where(small, 1.0 - n * n / (3.0 * vmax * vmax),
                 vmax * np.tanh(safe_n / vmax) / safe_n)
    return raw * g, (raw, n, g)


def _softclamp_backward(cache, dv, vmax):
    raw, n, g = cache
    small = n < 1e-4 * vmax
    safe_n = np.where(small, 1.0, n)
    u = safe_n / vmax
    sech2 = 1.0 / np.cosh(u) ** 2
    gprime_over_n = np.where(
        small, -2.0 / (3.0 * vmax * vmax),
        (safe_n * sech2 - vmax * np.tanh(u)) / (safe_n ** 3))
    radial = np.sum(raw * dv, axis=-1, keepdims=True)
    return g * dv + gprime_over_n * radial * raw


class SceneModels:
    """All learnable state of one sub-scene, on one flat buffer.

    Parameter layout groups are contiguous so each optimizer group is a
    slice: [pose | static (grid, base, color, background) | dynamic
    (grid, base, flow, shadow)].
    """

    def __init__(self, cfg: FieldConfig, n_frames: int, rng, dtype=np.float32):
        self.cfg = cfg
        self.n_frames = int(n_frames)
        store = ParamStore(dtype=dtype)
        self.store = store

        store.declare("pose.delta", (self.n_frames, 6), np.zeros((self.n_frames, 6)))

        self.static_grid = HashGrid(store, "static_grid", cfg.n_levels,
                                    cfg.table_size, cfg.n_features,
                                    cfg.base_res, cfg.growth, rng=rng)
        grid_dim = self.static_grid.out_dim
        self.static_mlp = Mlp(store, "static_mlp",
                              [grid_dim, cfg.base_hidden, cfg.base_hidden,
                               1 + cfg.geo_dim],
                              ["relu", "relu", "linear"], rng=rng)
        self.color_mlp = Mlp(store, "color_mlp",
                             [cfg.geo_dim + cfg.sh_dim, cfg.color_hidden,
                              cfg.color_hidden, 3],
                             ["relu", "relu", "sigmoid"], rng=rng)
        store.declare("bg.raw", (3,), np.zeros(3))

        self.time_dim = sinusoid_dim(1, cfg.time_freqs)
        self.dyn_grid = HashGrid(store, "dyn_grid", cfg.n_levels,
                                 cfg.table_size, cfg.n_features,
                                 cfg.base_res, cfg.growth, rng=rng)
        self.dyn_mlp = Mlp(store, "dyn_mlp",
                           [grid_dim + self.time_dim, cfg.base_hidden,
                            cfg.base_hidden, 1 + cfg.geo_dim],
                           ["relu", "relu", "linear"], rng=rng)
        self.flow_in_dim = (sinusoid_dim(3, cfg.flow_pos_freqs)
                            + sinusoid_dim(1, cfg.flow_time_freqs))
        # zero-init last layer keeps initial flow exactly zero
        self.flow_mlp = Mlp(store, "flow_mlp",
                            [self.flow_in_dim, cfg.flow_hidden,
                             cfg.flow_hidden, 6],
                            ["relu", "relu", "linear"], rng=rng)
        self.shadow_in_dim = cfg.geo_dim + sinusoid_dim(3, cfg.shadow_pos_freqs)
        self.shadow_mlp = Mlp(store, "shadow_mlp",
                              [self.shadow_in_dim, cfg.shadow_hidden, 1],
                              ["relu", "sigmoid"], rng=rng)
        store.finalize()
        if rng is not None:
            # flow starts at exactly zero so displaced queries match the
            # center query until training moves them
            self.store.view("flow_mlp.w2")[:] = 0.0
            self.store.view("flow_mlp.b2")[:] = 0.0

        self.group_slices = self._compute_groups()

    def _compute_groups(self):
        pose_lo, pose_hi = self.store.slice_of("pose.delta")
        st_lo = self.store.slice_of("static_grid.level0")[0]
        st_hi = self.store.slice_of("bg.raw")[1]
        dy_lo = self.store.slice_of("dyn_grid.level0")[0]
        dy_hi = self.store.size
        return {"pose": (pose_lo, pose_hi), "static": (st_lo, st_hi),
                "dynamic": (dy_lo, dy_hi)}

    # ---------------- individual heads ----------------

    def background(self):
        return sigmoid(self.store.view("bg.raw"))

    def background_backward(self, dbg, grads: GradBuffer):
        raw = self.store.view("bg.raw")
        s = sigmoid(raw)
        grads.view("bg.raw")[:] += dbg * s * (1.0 - s)

    def _contract_to_unit(self, x):
        c = contract(x)
        return to_unit_cube(c)

    def _unit_backward(self, x, du):
        return contract_backward(x, unit_cube_backward(du))

    def query_static(self, x_world):
        """x_world: [B,3] -> (sigma_s: [B], feat: [B,G], cache)."""
        if not np.all(np.isfinite(x_world)):
            raise ValueError("non-finite query position")
        u = self._contract_to_unit(x_world)
        hfeat, hcache = self.static_grid.forward(u)
        out, mcache = self.static_mlp.forward(hfeat)
        raw = out[:, 0] + self.cfg.density_bias
        sigma = softplus(raw)
        feat = out[:, 1:]
        return sigma, feat, (x_world, hcache, mcache, raw)

    def query_static_backward(self, cache, dsigma, dfeat, grads):
        x_world, hcache, mcache, raw = cache
        draw = dsigma * sigmoid(raw)
        dout = np.concatenate([draw[:, None], dfeat], axis=1)
        dhfeat = self.static_mlp.backward(mcache, dout, grads)
        du = self.static_grid.backward(hcache, dhfeat, grads)
        return self._unit_backward(x_world, du)

    def query_dynamic_raw(self, x_world, t_norm):
        """Dynamic field at one timestep. t_norm: [B] in [0,1]-ish."""
        u = self._contract_to_unit(x_world)
        hfeat, hcache = self.dyn_grid.forward(u)
        tfeat, tcache = sinusoid_encode(t_norm[:, None], self.cfg.time_freqs)
        inp = np.concatenate([hfeat, tfeat], axis=1)
        out, mcache = self.dyn_mlp.forward(inp)
        raw = out[:, 0] + self.cfg.density_bias
        sigma = softplus(raw)
        feat = out[:, 1:]
        return sigma, feat, (x_world, hcache, mcache, raw, hfeat.shape[1])

    def query_dynamic_backward(self, cache, dsigma, dfeat, grads):
        x_world, hcache, mcache, raw, hdim = cache
        draw = dsigma * sigmoid(raw)
        dout = np.concatenate([draw[:, None], dfeat], axis=1)
        dinp = self.dyn_mlp.backward(mcache, dout, grads)
        du = self.dyn_grid.backward(hcache, dinp[:, :hdim], grads)
        return self._unit_backward(x_world, du)

    def query_flow(self, x_world, t_norm):
        """(v_f, v_b): [B,3] each, norm-limited to cfg.flow_max."""
        pex, pex_cache = sinusoid_encode(x_world, self.cfg.flow_pos_freqs)
        pet, _ = sinusoid_encode(t_norm[:, None], self.cfg.flow_time_freqs)
        inp = np.concatenate([pex, pet], axis=1)
        out, mcache = self.flow_mlp.forward(inp)
        vf, cf = _softclamp_forward(out[:, :3], self.cfg.flow_max)
        vb, cb = _softclamp_forward(out[:, 3:], self.cfg.flow_max)
        return vf, vb, (pex_cache, mcache, cf, cb, pex.shape[1])

    def query_flow_backward(self, cache, dvf, dvb, grads):
        pex_cache, mcache, cf, cb, pdim = cache
        draw = np.concatenate([
            _softclamp_backward(cf, dvf, self.cfg.flow_max),
            _softclamp_backward(cb, dvb, self.cfg.flow_max)], axis=1)
        dinp = self.flow_mlp.backward(mcache, draw, grads)
        return sinusoid_backward(pex_cache, dinp[:, :pdim])

    def query_shadow(self, feat_dyn, x_world):
        u = self._contract_to_unit(x_world)
        peu, pe_cache = sinusoid_encode(u, self.cfg.shadow_pos_freqs)
        inp = np.concatenate([feat_dyn, peu], axis=1)
        out, mcache = self.shadow_mlp.forward(inp)
        return out[:, 0], (x_world, pe_cache, mcache, feat_dyn.shape[1])

    def query_shadow_backward(self, cache, drho, grads):
        x_world, pe_cache, mcache, gdim = cache
        dinp = self.shadow_mlp.backward(mcache, drho[:, None], grads)
        du = sinusoid_backward(pe_cache, dinp[:, gdim:])
        return dinp[:, :gdim], self._unit_backward(x_world, du)

    def query_color(self, feat, sh):
        """feat: [B,G] field feature, sh: [B,16] direction basis -> RGB."""
        inp = np.concatenate([feat, sh], axis=1)
        out, mcache = self.color_mlp.forward(inp)
        return out, (mcache, feat.shape[1])

    def query_color_dir(self, feat, d):
        """As query_color but from raw unit directions d: [B,3]."""
        from .diffcore import sh_encode
        norms = np.linalg.norm(d, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("view directions must be unit vectors")
        return self.query_color(feat, sh_encode(d))

    def query_color_backward(self, cache, dc, grads):
        mcache, gdim = cache
        dinp = self.color_mlp.backward(mcache, dc, grads)
        return dinp[:, :gdim], dinp[:, gdim:]


def aggregation_weights(has_prev, has_next):
    """Convex weights (prev, center, next) of the temporal aggregation,
    renormalized at sequence boundaries: interior (0.25, 0.5, 0.25)."""
    has_prev = np.asarray(has_prev, dtype=bool)
    has_next = np.asarray(has_next, dtype=bool)
    wp = np.where(has_prev, 0.25, 0.0)
    wn = np.where(has_next, 0.25, 0.0)
    wc = np.full_like(wp, 0.5)
    total = wp + wc + wn
    return wp / total, wc / total, wn / total


def aggregate_temporal(models: SceneModels, x_world, t_norm, dt,
                       has_prev, has_next, vf, vb):
    """Eq.-style aggregation of dynamic density/feature across t-1, t, t+1
    through the scene-flow displacement. Returns aggregated values plus the
    caches needed for the backward pass."""
    wp, wc, wn = aggregation_weights(has_prev, has_next)
    s_c, f_c, cache_c = models.query_dynamic_raw(x_world, t_norm)
    s_p, f_p, cache_p = models.query_dynamic_raw(x_world + vb, t_norm - dt)
    s_n, f_n, cache_n = models.query_dynamic_raw(x_world + vf, t_norm + dt)
    sigma = wp * s_p + wc * s_c + wn * s_n
    feat = (wp[:, None] * f_p + wc[:, None] * f_c + wn[:, None] * f_n)
    cache = (wp, wc, wn, cache_p, cache_c, cache_n)
    return sigma, feat, cache


def aggregate_backward(models: SceneModels, cache, dsigma, dfeat, grads):
    """Returns (dx_center_total, dvf, dvb)."""
    wp, wc, wn, cache_p, cache_c, cache_n = cache
    dx_c = models.query_dynamic_backward(cache_c, dsigma * wc,
                                         dfeat * wc[:, None], grads)
    dx_p = models.query_dynamic_backward(cache_p, dsigma * wp,
                                         dfeat * wp[:, None], grads)
    dx_n = models.query_dynamic_backward(cache_n, dsigma * wn,
                                         dfeat * wn[:, None], grads)
    dx = dx_c + dx_p + dx_n
    return dx, dx_n.copy(), dx_p.copy()


class ShadeCache:
    __slots__ = ("stage", "static", "color_s", "flow", "agg", "shadow",
                 "color_d", "x_world")

    def __init__(self, **kw):
        for k in self.__slots__:
            setattr(self, k, kw.get(k))


def shade_points(models: SceneModels, x_world, sh, t_norm, dt,
                 has_prev, has_next, stage):
    """Full per-sample shading.

    x_world: [B,3], sh: [B,16], t_norm/has_prev/has_next: [B].
    Returns a dict with sigma_s, sigma_d, c_s, c_d, rho, v_f, v_b (all [B]
    or [B,3]) and a ShadeCache. In stage A the dynamic branch is skipped
    entirely: sigma_d = 0 and rho = 0 by construction.
    """
    if stage not in (STAGE_A, STAGE_B):
        raise ValueError(f"unknown stage {stage!r}")
    B = x_world.shape[0]
    sigma_s, feat_s, cache_s = models.query_static(x_world)
    c_s, cache_cs = models.query_color(feat_s, sh)
    out = {"sigma_s": sigma_s, "c_s": c_s}
    cache = ShadeCache(stage=stage, static=cache_s, color_s=cache_cs,
                       x_world=x_world)
    if stage == STAGE_A:
        zero3 = np.zeros((B, 3), dtype=x_world.dtype)
        out.update(sigma_d=np.zeros(B, dtype=x_world.dtype), c_d=zero3,
                   rho=np.zeros(B, dtype=x_world.dtype),
                   v_f=zero3, v_b=zero3.copy())
        return out, cache
    vf, vb, cache_f = models.query_flow(x_world, t_norm)
    sigma_d, feat_d, cache_a = aggregate_temporal(
        models, x_world, t_norm, dt, has_prev, has_next, vf, vb)
    rho, cache_sh = models.query_shadow(feat_d, x_world)
    c_d, cache_cd = models.query_color(feat_d, sh)
    out.update(sigma_d=sigma_d, c_d=c_d, rho=rho, v_f=vf, v_b=vb)
    cache.flow, cache.agg, cache.shadow, cache.color_d = \
        cache_f, cache_a, cache_sh, cache_cd
    return out, cache


def shade_backward(models: SceneModels, cache: ShadeCache, up, grads):
    """Backward of shade_points.

    up: dict of upstream gradients, any of sigma_s, sigma_d, c_s, c_d,
    rho, v_f, v_b (missing entries treated as zero).
    Returns (dx_world: [B,3], dsh: [B,16]).
    """
    B = cache.x_world.shape[0]
    dtype = cache.x_world.dtype
    zero1 = np.zeros(B, dtype=dtype)
    zero3 = np.zeros((B, 3), dtype=dtype)

    dfeat_s, dsh_s = models.query_color_backward(
        cache.color_s, up.get("c_s", zero3), grads)
    dx = models.query_static_backward(
        cache.static, up.get("sigma_s", zero1), dfeat_s, grads)
    dsh = dsh_s
    if cache.stage == STAGE_A:
        return dx, dsh

    dfeat_d, dsh_d = models.query_color_backward(
        cache.color_d, up.get("c_d", zero3), grads)
    dsh = dsh + dsh_d
    dfeat_sh, dx_sh = models.query_shadow_backward(
        cache.shadow, up.get("rho", zero1), grads)
    dx += dx_sh
    dx_agg, dvf_disp, dvb_disp = aggregate_backward(
        models, cache.agg, up.get("sigma_d", zero1), dfeat_d + dfeat_sh, grads)
    dx += dx_agg
    dvf = up.get("v_f", zero3) + dvf_disp
    dvb = up.get("v_b", zero3) + dvb_disp
    dx += models.query_flow_backward(cache.flow, dvf, dvb, grads)
    return dx, dsh
